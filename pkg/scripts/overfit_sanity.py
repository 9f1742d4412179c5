"""Network training sanity checks on the default scenario.

    python3 scripts/overfit_sanity.py overfit [--images 40]
    python3 scripts/overfit_sanity.py plateau [--epochs 150]

``overfit`` trains on a few images with a small batch, a larger step and
no step decay, and stops once training Brier falls below 0.02.
``plateau`` trains the default configuration on the full training set
and summarizes the shape of the loss curves.
"""

import argparse

import numpy as np

from stratus.cli import OVERFIT_TRAINER
from stratus.features import CNN_MAIN_CHANNELS, LATE_CHANNELS
from stratus.nn.segnet import SegNetParams, build_segnet
from stratus.nn.train import TrainerConfig, loss_plateau, train
from stratus.pipeline import DataContext, image_sets, prepare
from stratus.scenario import ScenarioConfig, generate_scenario


def _problem(seed: int):
    ctx = DataContext(generate_scenario(ScenarioConfig(seed=seed)))
    prep = prepare(ctx, CNN_MAIN_CHANNELS + LATE_CHANNELS, 12, 0.5, 2016, "all", seed)
    sets, main, late = image_sets(prep)
    spec, _ = build_segnet(SegNetParams(input_size=prep.cube.mask.geometry.height_px, input_channels=len(main),
                                        late_channels=len(late)))
    return spec, sets


def overfit(n_images: int = 40, seed: int = 0):
    spec, sets = _problem(seed)
    cfg = TrainerConfig(**{**OVERFIT_TRAINER, "seed": seed})
    return train(spec, sets["train"].take(np.arange(n_images)), sets["validation"].take(np.arange(4)), cfg)


def full_run(max_epochs: int = 150, seed: int = 0):
    spec, sets = _problem(seed)
    return train(spec, sets["train"], sets["validation"], TrainerConfig(max_epochs=max_epochs, seed=seed))


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("mode", choices=("overfit", "plateau"))
    p.add_argument("--images", type=int, default=40)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--history", help="write the per-epoch history as CSV")
    a = p.parse_args()
    result = overfit(a.images, a.seed) if a.mode == "overfit" else full_run(a.epochs, a.seed)
    for r in result.history:
        print(f"epoch {r.epoch}: train loss {r.train_loss:.4f} brier {r.train_brier:.4f}  "
              f"val loss {r.val_loss:.4f} brier {r.val_brier:.4f}  lr {r.lr:g}", flush=True)
    if a.mode == "plateau":
        print(loss_plateau(result.history))
    if a.history:
        result.write_history(a.history)
