"""Duplicate an informative feature and contrast the twins' MDI shares
with the ablation delta of removing one twin.

    python3 scripts/duplicate_diagnostic.py [--seed 0] [--feature harmonie] [--out diag.csv]
"""

import argparse

from stratus.ablation import duplicate_feature_diagnostic
from stratus.pipeline import DataContext
from stratus.scenario import ScenarioConfig, generate_scenario


def diagnose(seed: int = 0, feature: str = "harmonie"):
    ctx = DataContext(generate_scenario(ScenarioConfig(seed=seed)))
    return duplicate_feature_diagnostic(ctx, seed, feature)


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feature", default="harmonie")
    p.add_argument("--out", help="write the diagnostic table as CSV")
    a = p.parse_args()
    diag = diagnose(a.seed, a.feature)
    for name, value in diag.rows():
        print(f"{name}: {value:.4f}")
    if a.out:
        diag.write_csv(a.out)
