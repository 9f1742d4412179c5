"""Test BSS of the linear model on the fine and coarse forecasts, alone
and combined, next to isotonic calibration of each input.

    python3 scripts/multimodel_benefit.py [--seeds 0 1 2]
"""

import argparse

import numpy as np

from stratus.ablation import ExperimentSpec, run_config
from stratus.pipeline import DataContext
from stratus.scenario import ScenarioConfig, generate_scenario

FINE, COARSE = "harmonie", "gefs_avg"
RUNS = {
    "linear_fine": ("linear", (FINE,)),
    "linear_coarse": ("linear", (COARSE,)),
    "linear_both": ("linear", (FINE, COARSE)),
    "isotonic_fine": ("isotonic_input", (FINE,)),
    "isotonic_coarse": ("isotonic_input", (COARSE,)),
}


def scores(seed: int) -> dict[str, float]:
    """Test BSS per run on the default scenario generated with ``seed``."""
    ctx = DataContext(generate_scenario(ScenarioConfig(seed=seed)))
    return {name: run_config(ExperimentSpec.with_default_grid(fam, feats, seed=seed), ctx).test_bss
            for name, (fam, feats) in RUNS.items()}


def summarize(per_seed: list[dict[str, float]]) -> dict[str, float]:
    med = {k: float(np.median([s[k] for s in per_seed])) for k in RUNS}
    med["margin_over_single"] = med["linear_both"] - max(med["linear_fine"], med["linear_coarse"])
    med["margin_over_isotonic"] = med["linear_both"] - max(med["isotonic_fine"], med["isotonic_coarse"])
    return med


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a = p.parse_args()
    per_seed = []
    for seed in a.seeds:
        per_seed.append(scores(seed))
        print(f"seed {seed}: " + "  ".join(f"{k} {v:.4f}" for k, v in per_seed[-1].items()), flush=True)
    for k, v in summarize(per_seed).items():
        print(f"median {k}: {v:.4f}")
