"""Labels, seasons and train/validation/test day assignment."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TRAIN, VALIDATION, TEST, DROPPED = "train", "validation", "test", "dropped"
SEASONS = ("all", "summer", "winter")


def threshold_labels(obs: np.ndarray, threshold: float) -> np.ndarray:
    """1 where the observation strictly exceeds the threshold."""
    return (np.asarray(obs) > threshold).astype(np.int8)


def season_of(day: date) -> str:
    """Summer runs from 15 April to 14 October inclusive."""
    if (day.month, day.day) >= (4, 15) and (day.month, day.day) <= (10, 14):
        return "summer"
    return "winter"


def in_season(day: date, season: str) -> bool:
    if season not in SEASONS:
        raise ValueError(f"unknown season {season!r}")
    return season == "all" or season_of(day) == season


class EmptyPartitionError(ValueError):
    pass


@dataclass(frozen=True)
class SplitPlan:
    fold_year: int
    season: str
    lead_hours: int
    threshold: float
    days: tuple[date, ...]
    assignment: tuple[str, ...]
    reason: tuple[str, ...]

    def days_in(self, part: str) -> list[date]:
        return [d for d, a in zip(self.days, self.assignment) if a == part]

    def index_in(self, part: str, days: Sequence[date]) -> np.ndarray:
        """Positions within ``days`` that belong to ``part``."""
        wanted = set(self.days_in(part))
        return np.array([i for i, d in enumerate(days) if d in wanted], dtype=np.int64)

    def write_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["date", "assignment", "reason"])
            for d, a, r in zip(self.days, self.assignment, self.reason):
                w.writerow([d.isoformat(), a, r])


def make_splits(all_days: Iterable[date], fold_year: int, season: str = "all",
                missing_days: Iterable[date] = (), lead_hours: int = 12, threshold: float = 0.5,
                train_first: bool = True) -> SplitPlan:
    """Test on ``fold_year``; alternate the other in-season, non-missing days
    train/validation in chronological order."""
    days = sorted(set(all_days))
    if not any(d.year == fold_year for d in days):
        raise ValueError(f"fold year {fold_year} has no days")
    missing = set(missing_days)
    assignment, reason = [], []
    parity = 0 if train_first else 1
    for d in days:
        if d in missing:
            assignment.append(DROPPED)
            reason.append("missing")
        elif not in_season(d, season):
            assignment.append(DROPPED)
            reason.append("out_of_season")
        elif d.year == fold_year:
            assignment.append(TEST)
            reason.append("")
        else:
            assignment.append(TRAIN if parity % 2 == 0 else VALIDATION)
            reason.append("")
            parity += 1
    plan = SplitPlan(fold_year, season, lead_hours, float(threshold), tuple(days), tuple(assignment), tuple(reason))
    if not plan.days_in(TRAIN) or not plan.days_in(VALIDATION):
        raise EmptyPartitionError("split leaves the train or validation partition empty")
    return plan
