"""End-to-end demo: synthesize a scenario, fit every model family, run a
small ablation and merge the reports.

    python3 scripts/demo_pipeline.py OUT_DIR [--seed N] [--epochs N]

Every output lands under OUT_DIR; re-running with the same seed
reproduces all CSVs and rasters byte for byte.
"""

import argparse
import sys
from pathlib import Path

from stratus.cli import main as stratus

RUNS = {
    "isotonic_harmonie": ["--model", "isotonic_input", "--feature", "harmonie"],
    "isotonic_gefs_avg": ["--model", "isotonic_input", "--feature", "gefs_avg"],
    "linear": ["--model", "linear"],
    "forest": ["--model", "forest", "--set", "forest.n_estimators=20", "--set", "forest.max_samples=20000"],
}


def step(*argv) -> None:
    rc = stratus([str(a) for a in argv])
    if rc != 0:
        raise SystemExit(f"step failed with exit code {rc}: stratus {' '.join(map(str, argv))}")


def run_demo(out: Path, seed: int = 0, epochs: int = 2) -> None:
    out.mkdir(parents=True, exist_ok=True)
    scenario = out / "scenario"
    scenario.mkdir(exist_ok=True)
    step("synth", "--output-dir", scenario, "--seed", seed)
    common = ["--scenario-dir", scenario, "--seed", seed]
    runs = dict(RUNS)
    runs["network"] = ["--model", "network", "--set", f"trainer.max_epochs={epochs}",
                       "--set", "experiment.features=[harmonie, gefs_avg, xdim, ydim, tdim]",
                       "--set", "experiment.grid=[{base_filters: 8}]"]
    for name, args in runs.items():
        d = out / "runs" / name
        d.mkdir(parents=True, exist_ok=True)
        step("run", *common, "--output-dir", d, *args)
    ablation = out / "ablation"
    ablation.mkdir(exist_ok=True)
    step("ablate", *common, "--output-dir", ablation, "--set", "ablation.add=[twin:harmonie, noise:0]",
         "--set", "ablation.folds=[2015, 2016, 2017]")
    merged = out / "merged"
    merged.mkdir(exist_ok=True)
    step("report", *sorted((out / "runs").iterdir()), "--output-dir", merged)


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=2, help="network training epochs")
    a = p.parse_args()
    run_demo(Path(a.out_dir), a.seed, a.epochs)
    sys.exit(0)
