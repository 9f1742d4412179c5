from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stratus.experiment import (DROPPED, TEST, TRAIN, VALIDATION, EmptyPartitionError, in_season, make_splits,
                                season_of, threshold_labels)


def days_between(a, b, step=1):
    out, d = [], a
    while d <= b:
        out.append(d)
        d += timedelta(days=step)
    return out


THREE_YEARS = days_between(date(2015, 1, 1), date(2017, 12, 31), 5)


def test_labels_strict():
    assert threshold_labels(np.array([0.5, 0.50001, 0.0]), 0.5).tolist() == [0, 1, 0]
    assert not threshold_labels(np.zeros((3, 3)), 1.0).any()


def test_tuned_scenario_cover(small_context):
    cube = small_context.cube(12, 0.5)
    frac = threshold_labels(cube.target, 0.5)[:, cube.mask.valid].mean()
    assert frac == pytest.approx(0.055, abs=0.005)


@pytest.mark.parametrize("day,season", [((4, 15), "summer"), ((4, 14), "winter"), ((10, 14), "summer"),
                                        ((10, 15), "winter"), ((1, 1), "winter")])
def test_season_boundaries(day, season):
    assert season_of(date(2016, *day)) == season


def test_unknown_season():
    with pytest.raises(ValueError):
        in_season(date(2016, 1, 1), "autumn")


def test_fold_alternates_train_first():
    plan = make_splits(THREE_YEARS, 2016)
    assert all(d.year == 2016 for d in plan.days_in(TEST))
    assert len(plan.days_in(TEST)) == sum(d.year == 2016 for d in THREE_YEARS)
    rest = [a for d, a in zip(plan.days, plan.assignment) if d.year != 2016]
    assert rest[:4] == [TRAIN, VALIDATION, TRAIN, VALIDATION]
    assert len(plan.days_in(TRAIN)) - len(plan.days_in(VALIDATION)) in (0, 1)


def test_validation_first_parity():
    plan = make_splits(THREE_YEARS, 2016, train_first=False)
    assert plan.assignment[0] == VALIDATION


def test_missing_day_dropped():
    missing = THREE_YEARS[7]
    plan = make_splits(THREE_YEARS, 2016, missing_days=[missing])
    assert plan.assignment.count(DROPPED) == 1
    assert plan.reason[plan.days.index(missing)] == "missing"


def test_summer_only():
    plan = make_splits(THREE_YEARS, 2016, season="summer")
    kept = [d for d, a in zip(plan.days, plan.assignment) if a != DROPPED]
    assert kept and all(season_of(d) == "summer" for d in kept)
    assert set(r for r, a in zip(plan.reason, plan.assignment) if a == DROPPED) == {"out_of_season"}


def test_empty_partitions_rejected():
    with pytest.raises(EmptyPartitionError):
        make_splits(days_between(date(2016, 1, 1), date(2016, 3, 1)) + [date(2015, 5, 1)], 2016)
    with pytest.raises(ValueError):
        make_splits(THREE_YEARS, 2019)


@given(st.sets(st.integers(0, len(THREE_YEARS) - 1), max_size=20), st.sampled_from(["all", "summer", "winter"]),
       st.sampled_from([2015, 2016, 2017]))
def test_partitions_disjoint_and_exhaustive(missing_idx, season, fold):
    missing = [THREE_YEARS[i] for i in missing_idx]
    try:
        plan = make_splits(THREE_YEARS, fold, season, missing)
    except EmptyPartitionError:
        return
    parts = [set(plan.days_in(p)) for p in (TRAIN, VALIDATION, TEST)]
    assert not (parts[0] & parts[1]) and not (parts[0] & parts[2]) and not (parts[1] & parts[2])
    eligible = {d for d in THREE_YEARS if d not in set(missing) and in_season(d, season)}
    assert parts[0] | parts[1] | parts[2] == eligible
    assert len(parts[0]) - len(parts[1]) in (0, 1)


def test_plan_csv(tmp_path):
    plan = make_splits(THREE_YEARS[:80], 2015, missing_days=[THREE_YEARS[3]])
    plan.write_csv(tmp_path / "split.csv")
    lines = (tmp_path / "split.csv").read_text().splitlines()
    assert lines[0] == "date,assignment,reason" and len(lines) == 81
