"""Acceptance suite: one test per criterion, each recording a pass/fail
line that is printed in the terminal summary.  Oracles and helpers are
shared with the unit tests; experiments come from scripts/."""

import itertools
import sys
import time
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
import pytest

from stratus import rng
from stratus.gridcore import FieldSeries, lag_correlation_check, regrid_array
from stratus.linear import LinearFitConfig, LinearParams, lr_fit_batch, penalized_loss
from stratus.nn import layers as L
from stratus.nn.graph import backward, forward, trainable_keys
from stratus.nn.segnet import build_segnet
from stratus.nn.train import loss_plateau
from stratus.scenario import BiasSpec, ScenarioConfig, generate_scenario, well_specified_table
from stratus.verify import brier, calibrate, pava_fit, reliability_curve

from conftest import ACCEPTANCE_LINES, SMALL
from test_linear import X4, Y4, grid_search_min
from test_nn_layers import numeric_grad, rel_error
from test_nn_network import network_numeric_grad, tiny_problem
from test_scenario import merged_fine
from test_verify import pooled_oracle

SCRIPTS = Path(__file__).resolve().parents[1] / "scripts"
sys.path.insert(0, str(SCRIPTS))

import demo_pipeline  # noqa: E402
import duplicate_diagnostic  # noqa: E402
import multimodel_benefit  # noqa: E402
import overfit_sanity  # noqa: E402


def check(number: int, ok: bool, detail: str):
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def benefit_scores():
    per_seed = [multimodel_benefit.scores(seed) for seed in (0, 1, 2)]
    return per_seed


def test_criterion_01_architecture():
    t0 = time.perf_counter()
    _, report = build_segnet()
    elapsed = time.perf_counter() - t0
    concat = next(r for r in report.rows if r[0] == "concat_out")
    got = (report.total, report.trainable, report.params_of("conv1"), report.params_of("conv_out"), concat[2][2])
    check(1, got == (503_446, 501_316, 1016, 26, 25) and elapsed < 1.0,
          f"total/trainable/conv1/conv_out/concat depth {got}, {elapsed:.2f} s")


def _layer_errors():
    g = np.random.default_rng(0)
    r = lambda *s: g.normal(size=s)
    errs = {}
    x, w, b, up = r(2, 4, 5, 3), r(3, 3, 3, 2), r(2), r(2, 4, 5, 2)
    dx, dw, db = L.conv2d_backward(up, x, w)
    f = lambda: float(np.sum(L.conv2d(x, w, b) * up))
    errs["conv"] = max(rel_error(dx, numeric_grad(f, x)), rel_error(dw, numeric_grad(f, w)),
                       rel_error(db, numeric_grad(f, b)))
    x, ga, be, up = r(3, 2, 3, 2), r(2), r(2), r(3, 2, 3, 2)
    _, cache, _, _ = L.batchnorm_train(x, ga, be)
    dx, dg, db = L.batchnorm_backward(up, cache)
    f = lambda: float(np.sum(L.batchnorm_train(x, ga, be)[0] * up))
    errs["batchnorm"] = max(rel_error(dx, numeric_grad(f, x)), rel_error(dg, numeric_grad(f, ga)),
                            rel_error(db, numeric_grad(f, be)))
    x, up = r(2, 3, 3, 2), r(2, 3, 3, 2)
    x[np.abs(x) < 0.01] = 0.5
    errs["relu"] = rel_error(L.relu_backward(up, x), numeric_grad(lambda: float(np.sum(L.relu(x) * up)), x))
    x, up = r(3, 7), r(3, 7)
    errs["sigmoid"] = rel_error(L.sigmoid_backward(up, L.sigmoid(x)),
                                numeric_grad(lambda: float(np.sum(L.sigmoid(x) * up)), x))
    x, up = r(2, 4, 4, 2), r(2, 2, 2, 2)
    _, idx = L.maxpool_argmax(x)
    errs["maxpool"] = rel_error(L.maxpool_backward(up, idx, x.shape),
                                numeric_grad(lambda: float(np.sum(L.maxpool_argmax(x)[0] * up)), x))
    p, up = r(2, 2, 2, 2), r(2, 4, 4, 2)
    errs["unpool"] = rel_error(L.unpool_backward(up, idx),
                               numeric_grad(lambda: float(np.sum(L.unpool(p, idx, (2, 4, 4, 2)) * up)), p))
    x, up = r(1, 2, 3, 2), r(1, 4, 6, 2)
    errs["upsample"] = rel_error(L.upsample_backward(up), numeric_grad(lambda: float(np.sum(L.upsample(x) * up)), x))
    p = g.uniform(0.05, 0.95, size=(3, 10))
    y = (g.random((3, 10)) < 0.3).astype(float)
    errs["loss"] = rel_error(L.masked_log_loss(p, y)[1], numeric_grad(lambda: L.masked_log_loss(p, y)[0], p, h=1e-6))
    return errs


def test_criterion_02_gradients():
    t0 = time.perf_counter()
    errs = _layer_errors()
    spec, weights, inputs, labels, mask = tiny_problem()
    p, tape = forward(spec, weights, inputs, mask, training=True)
    grads = backward(spec, weights, tape, L.masked_log_loss(p, labels)[1], mask)
    errs["network"] = max(rel_error(grads[k], network_numeric_grad(spec, weights, inputs, labels, mask, k),
                                    floor=1e-6) for k in trainable_keys(spec, 8, 8))
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    check(2, errs[worst] <= 1e-4 and elapsed < 60,
          f"max relative error {errs[worst]:.1e} ({worst}) over {len(errs)} checks, {elapsed:.1f} s")


def test_criterion_03_pava_oracle():
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    for length in range(2, 9):   # a single sample is rejected by design
        preds = [i / 10 for i in range(length)]
        for labels in itertools.product((0, 1), repeat=length):
            _, oracle = pooled_oracle(preds, labels)
            worst = max(worst, float(np.max(np.abs(pava_fit(preds, labels).outputs - oracle))))
            n += 1
    elapsed = time.perf_counter() - t0
    check(3, worst <= 1e-9 and elapsed < 30, f"{n} sequences, max deviation {worst:.1e}, {elapsed:.1f} s")


def test_criterion_04_logistic_oracle():
    fitted = penalized_loss(lr_fit_batch(X4, Y4, LinearFitConfig(C=1.0)), X4, Y4, 1.0)
    grid_min, _, _ = grid_search_min(X4, Y4, 1.0)
    g = rng.stream(0, 4)
    violations = 0
    for _ in range(1000):
        t1, t2 = g.normal(scale=3, size=2), g.normal(scale=3, size=2)
        C = 10 ** g.uniform(-2, 2)
        loss = lambda t: penalized_loss(LinearParams(t[0], t[1:]), X4, Y4, C)
        violations += loss((t1 + t2) / 2) > (loss(t1) + loss(t2)) / 2 + 1e-9
    gap = abs(fitted - grid_min)
    check(4, gap <= 1e-6 and violations == 0,
          f"loss gap to grid search {gap:.1e}, convexity violations {violations}/1000")


@pytest.mark.slow
def test_criterion_05_overfit_and_plateau():
    small = overfit_sanity.overfit(40)
    reached = small.history[-1].train_brier
    full = overfit_sanity.full_run(150)
    shape = loss_plateau(full.history)
    ok = reached < 0.02 and len(small.history) <= 500 and shape.plateaued()
    check(5, ok, f"40 images: train Brier {reached:.4f} after {len(small.history)} epochs; full set: val rise "
                 f"{shape.max_val_rise:.1%}, last-{shape.window} change val {shape.val_change:.1%} "
                 f"train {shape.train_change:.1%}")


@pytest.mark.slow
def test_criterion_06_multi_model_benefit(benefit_scores):
    margins = {s: float(np.median([r["linear_both"] - r[f"linear_{s}"] for r in benefit_scores]))
               for s in ("fine", "coarse")}
    check(6, min(margins.values()) >= 0.02,
          "median margin of the combined model over fine {fine:.3f}, over coarse {coarse:.3f}".format(**margins))


@pytest.mark.slow
def test_criterion_07_mdi_vs_ablation():
    diag = duplicate_diagnostic.diagnose(0)
    shares_ok = all(0.3 <= s <= 0.7 for s in diag.twin_shares)
    check(7, shares_ok and abs(diag.delta_remove_twin) < 0.005,
          f"twin MDI shares {diag.twin_shares[0]:.3f}/{diag.twin_shares[1]:.3f}, delta removing one twin "
          f"{diag.delta_remove_twin:+.5f}, removing both {diag.delta_remove_both:+.3f}")


def test_criterion_08_calibration():
    coef = [2.0, 1.3, 0.6]
    x, y, _ = well_specified_table(550_000, seed=4, intercept=0.0, coefficients=coef)
    score = np.tanh(x @ np.array(coef) / 3)
    fit_s, fit_y, test_s, test_y = score[:500_000], y[:500_000], score[500_000:], y[500_000:]
    cmap = pava_fit(fit_s, fit_y)
    rel = reliability_curve(calibrate(cmap, test_s), test_y, 10)
    occupied = rel.count > 0
    frac = float(rel.inside_band()[occupied].mean())
    never_worse = brier(calibrate(cmap, fit_s), fit_y) <= brier(fit_s, fit_y) + 1e-12
    g = rng.stream(0, 8)
    for _ in range(200):
        n = int(g.integers(2, 200))
        p, lab = g.random(n), (g.random(n) < g.random()).astype(float)
        never_worse &= brier(calibrate(pava_fit(p, lab), p), lab) <= brier(p, lab) + 1e-12
    check(8, frac >= 0.9 and never_worse,
          f"{frac:.0%} of {int(occupied.sum())} occupied bins inside the band ({test_y.size} test samples); "
          f"fitting-set Brier never increased: {never_worse}")


@pytest.mark.slow
def test_criterion_09_beats_calibrated_input(benefit_scores):
    margin = float(np.median([r["linear_both"] - max(r["isotonic_fine"], r["isotonic_coarse"])
                              for r in benefit_scores]))
    check(9, margin >= 0, f"median margin of the linear model over the best calibrated input {margin:+.3f}")


def test_criterion_10_scenario_targets():
    cfg = ScenarioConfig()
    s = generate_scenario(cfg)
    lead = cfg.leads[0]
    obs = np.stack([s.observations.at(datetime(d.year, d.month, d.day) + timedelta(hours=lead)).values
                    for d in s.days])[:, s.mask.valid]
    errors = {h: abs(float(np.mean(obs > h)) - c) for h, c in cfg.target_cover.items()}
    shifted = generate_scenario(SMALL.replace(n_days=8, fine=BiasSpec(timing_shift_hours=1)))
    fine = merged_fine(shifted)
    on_obs = FieldSeries.from_arrays(fine.times, regrid_array(fine.stack(), shifted.fine_geometry,
                                                              shifted.obs_geometry), shifted.obs_geometry)
    best = lag_correlation_check(on_obs, shifted.observations, [-2, -1, 0, 1, 2], shifted.mask).best_lag
    worst = max(errors.values())
    check(10, worst <= 0.005 and best == 1,
          f"largest cover error {worst * 100:.3f} pp over thresholds {sorted(errors)}; recovered lag {best:+d} h")


@pytest.mark.slow
def test_criterion_11_determinism(tmp_path):
    outputs = []
    for name in ("a", "b"):
        demo_pipeline.run_demo(tmp_path / name, seed=0, epochs=2)
        files = sorted(p.relative_to(tmp_path / name) for p in (tmp_path / name).rglob("*")
                       if p.suffix in (".csv", ".grid", ".series"))
        outputs.append({f: (tmp_path / name / f).read_bytes() for f in files})
    a, b = outputs
    differing = [str(f) for f in a if a[f] != b.get(f)]
    check(11, a.keys() == b.keys() and not differing and len(a) > 0,
          f"{len(a)} CSV/raster/series files compared, {len(differing)} differ")
