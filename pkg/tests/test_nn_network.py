import numpy as np
import pytest

from stratus.nn import layers as L
from stratus.nn import train as T
from stratus.nn.graph import NetworkSpec, Node, backward, forward, init_weights, param_report, trainable_keys
from stratus.nn.io import load_weights, save_weights
from stratus.nn.segnet import SegNetParams, build_segnet
from stratus.nn.train import ImageSet, TrainerConfig, predict, train

from test_nn_layers import numeric_grad, rel_error

# parameter counts of every convolution in the reference layer table, in order
REFERENCE_CONV_PARAMS = [1016, 584, 1168, 2320, 4640, 9248, 9248, 18496, 36928, 36928, 36928, 36928, 36928,
                         36928, 36928, 36928, 36928, 36928, 36928, 18464, 9248, 9248, 4624, 2320, 1160, 584, 584]
REFERENCE_CONV_WIDTHS = [8, 8, 16, 16, 32, 32, 32, 64, 64, 64, 64, 64, 64, 64, 64, 64, 64, 64, 64, 32, 32, 32, 16,
                         16, 8, 8, 8]


def tiny_problem(seed=0, size=8, main=2, late=1, **kw):
    params = SegNetParams(input_size=size, input_channels=main, late_channels=late, base_filters=2,
                          n_pools=3, **kw)
    spec, _ = build_segnet(params)
    g = np.random.default_rng(seed)
    mask = g.random((size, size)) < 0.7
    inputs = {"main": g.normal(size=(3, size, size, main)), "late": g.normal(size=(3, size, size, late))}
    labels = (g.random((3, int(mask.sum()))) < 0.4).astype(float)
    weights = init_weights(spec, size, size, seed, dtype=np.float64)
    for k in weights:
        if k.endswith("/bias") or k.endswith("/beta"):
            weights[k] = g.normal(scale=0.1, size=weights[k].shape)
        if k.endswith("/gamma"):
            weights[k] = 1 + g.normal(scale=0.1, size=weights[k].shape)
    return spec, weights, inputs, labels, mask


def network_loss(spec, weights, inputs, labels, mask):
    p, _ = forward(spec, weights, inputs, mask, training=True)
    return L.masked_log_loss(p, labels)[0]


def activation_pattern(spec, weights, inputs, mask):
    """ReLU on/off states and pooling argmaxes: the piecewise region."""
    _, tape = forward(spec, weights, inputs, mask, training=True)
    relus = [tape.values[n.name] > 0 for n in spec.nodes if n.kind == "relu"]
    pools = [tape.caches[n.name] for n in spec.nodes if n.kind == "maxpool"]
    return relus + pools


def network_numeric_grad(spec, weights, inputs, labels, mask, key, steps=(1e-4, 1e-5, 1e-6)):
    """Central differences with the first step in ``steps``; entries whose
    perturbation leaves the current ReLU/argmax region are redone with the
    next smaller step, since the loss is not differentiable across those
    boundaries.  (A 1e-3 step leaves O(h^2) truncation error near 1e-4
    through the stacked batch-norm layers.)"""
    x = weights[key]
    base = activation_pattern(spec, weights, inputs, mask)
    same = lambda: all(np.array_equal(a, b) for a, b in zip(base, activation_pattern(spec, weights, inputs, mask)))
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        for step in steps:
            x[i] = old + step
            up, ok_up = network_loss(spec, weights, inputs, labels, mask), same()
            x[i] = old - step
            down, ok_down = network_loss(spec, weights, inputs, labels, mask), same()
            x[i] = old
            g[i] = (up - down) / (2 * step)
            if ok_up and ok_down:
                break
    return g


class TestArchitecture:
    def test_reference_totals(self):
        _, report = build_segnet()
        assert report.total == 503_446
        assert report.trainable == 501_316
        assert report.non_trainable == 2_130

    def test_spot_checks(self):
        spec, report = build_segnet()
        assert report.params_of("conv1") == 1016
        assert report.params_of("conv_out") == 26
        assert report.params_of("bn_out") == 4
        concat = next(r for r in report.rows if r[0] == "concat_out")
        assert concat[2] == (384, 384, 25)

    def test_layer_table(self):
        spec, report = build_segnet()
        convs = [r for r in report.rows if r[1] == "conv" and r[0] != "conv_out"]
        assert [r[3] for r in convs] == REFERENCE_CONV_PARAMS
        assert [r[2][2] for r in convs] == REFERENCE_CONV_WIDTHS
        bns = [r for r in report.rows if r[1] == "batchnorm" and r[0] != "bn_out"]
        assert [r[3] for r in bns] == [4 * w for w in REFERENCE_CONV_WIDTHS]
        pools = [r[2] for r in report.rows if r[1] == "maxpool"]
        assert [p[0] for p in pools] == [192, 96, 48, 24, 12, 6, 3]
        unpools = [r[2] for r in report.rows if r[1] == "unpool"]
        assert [p[0] for p in unpools] == [6, 12, 24, 48, 96, 192, 384]

    def test_every_unpool_pairs_with_a_pool(self):
        spec, _ = build_segnet()
        pools = [n.name for n in spec.nodes if n.kind == "maxpool"]
        paired = [n.pool for n in spec.nodes if n.kind == "unpool"]
        assert sorted(paired) == sorted(pools) and len(set(paired)) == len(paired)

    def test_indivisible_size_rejected(self):
        with pytest.raises(ValueError):
            SegNetParams(input_size=100)

    def test_unpool_must_reference_pool(self):
        with pytest.raises(ValueError):
            NetworkSpec((Node("main", "input", channels=1), Node("u", "unpool", ("main",), pool="main")),
                        ("main",), "u")

    @pytest.mark.parametrize("kw", [dict(unpool=False), dict(skip=True), dict(x_last=False), dict(odd_pool=False)])
    def test_variants_build_and_run(self, kw):
        spec, weights, inputs, labels, mask = tiny_problem(**kw)
        p, _ = forward(spec, weights, inputs, mask)
        assert p.shape == labels.shape


class TestForward:
    def test_output_length_and_range(self):
        spec, weights, inputs, labels, mask = tiny_problem()
        p, _ = forward(spec, weights, inputs, mask)
        assert p.shape == (3, mask.sum())
        assert np.all((p > 0) & (p < 1))

    def test_pure_function(self):
        spec, weights, inputs, _, mask = tiny_problem()
        a, _ = forward(spec, weights, inputs, mask, training=True)
        b, _ = forward(spec, weights, inputs, mask, training=True)
        assert np.array_equal(a, b)

    def test_bad_input_channels(self):
        spec, weights, inputs, _, mask = tiny_problem()
        inputs["main"] = inputs["main"][..., :1]
        with pytest.raises(ValueError):
            forward(spec, weights, inputs, mask)


class TestBackward:
    def test_composed_network_matches_finite_differences(self):
        spec, weights, inputs, labels, mask = tiny_problem()
        p, tape = forward(spec, weights, inputs, mask, training=True)
        _, dp = L.masked_log_loss(p, labels)
        grads = backward(spec, weights, tape, dp, mask)
        keys = trainable_keys(spec, 8, 8)
        assert set(grads) == set(keys)
        worst = 0.0
        for k in keys:
            num = network_numeric_grad(spec, weights, inputs, labels, mask, k)
            worst = max(worst, rel_error(grads[k], num, floor=1e-6))
        assert worst <= 1e-4

    def test_inference_mode_batchnorm_gradient(self):
        spec, weights, inputs, labels, mask = tiny_problem(seed=1)
        for k in weights:
            if k.endswith("moving_variance"):
                weights[k] = np.full_like(weights[k], 1.7)
        p, tape = forward(spec, weights, inputs, mask, training=False)
        _, dp = L.masked_log_loss(p, labels)
        grads = backward(spec, weights, tape, dp, mask)

        def loss():
            return L.masked_log_loss(forward(spec, weights, inputs, mask)[0], labels)[0]

        for k in ("conv1/kernel", "bn_out/gamma", "conv_out/kernel"):
            assert rel_error(grads[k], numeric_grad(loss, weights[k])) <= 1e-4

    def test_correlated_late_channel_gets_gradient(self):
        spec, weights, inputs, labels, mask = tiny_problem(seed=2)
        full = np.zeros((3, 8, 8))
        full[:, mask] = labels
        inputs["late"] = (2 * full - 1)[..., None]
        p, tape = forward(spec, weights, inputs, mask, training=True)
        _, dp = L.masked_log_loss(p, labels)
        grads = backward(spec, weights, tape, dp, mask)
        # late channel is the last input of the 1x1 head
        assert abs(grads["conv_out/kernel"][0, 0, -1, 0]) > 1e-3


class TestTrainer:
    def image_set(self, seed, n=6):
        spec, weights, inputs, labels, mask = tiny_problem(seed)
        g = np.random.default_rng(seed)
        main = g.normal(size=(n, 8, 8, 2)).astype(np.float32)
        late = g.normal(size=(n, 8, 8, 1)).astype(np.float32)
        y = (main[..., 0][:, mask] > 0).astype(np.float32)
        return spec, ImageSet(main, late, y, mask)

    def scripted(self, monkeypatch, briers):
        """Replace validation prediction so epoch ``e`` scores ``briers[e-1]``,
        recording the weights it saw."""
        seen = []

        def fake_predict(spec, weights, data, batch_size=16):
            e = len(seen)
            seen.append({k: v.copy() for k, v in weights.items()})
            return np.full(data.labels.shape, np.sqrt(briers[e]))

        monkeypatch.setattr(T, "predict", fake_predict)
        return seen

    def test_early_stop_restores_best_epoch(self, monkeypatch):
        spec, data = self.image_set(0)
        zero = np.zeros_like(data.labels)
        data = ImageSet(data.main, data.late, zero, data.mask)
        briers = [0.5, 0.4, 0.3, 0.2, 0.1] + [0.2] * 100
        seen = self.scripted(monkeypatch, briers)
        res = train(spec, data, data, TrainerConfig(batch_size=3, patience=20, reduce_lr=False, max_epochs=100))
        assert len(res.history) == 25 and res.stopped_early and res.best_epoch == 5
        for k in res.weights:
            assert np.array_equal(res.weights[k], seen[4][k])

    def test_learning_rate_reduced_after_plateau(self, monkeypatch):
        spec, data = self.image_set(1)
        data = ImageSet(data.main, data.late, np.zeros_like(data.labels), data.mask)
        self.scripted(monkeypatch, [0.1] + [0.2] * 100)
        res = train(spec, data, data, TrainerConfig(batch_size=3, max_epochs=30))
        lrs = [r.lr for r in res.history]
        # ten epochs without improvement after epoch 1: epoch 12 runs at the reduced rate
        assert lrs[10] == pytest.approx(0.01) and lrs[11] == pytest.approx(0.001)
        assert res.stopped_early and len(res.history) == 21

    def test_deterministic_given_seed(self):
        spec, data = self.image_set(2)
        cfg = TrainerConfig(batch_size=2, max_epochs=2, seed=5)
        a, b = train(spec, data, data, cfg), train(spec, data, data, cfg)
        assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)
        assert [r.val_brier for r in a.history] == [r.val_brier for r in b.history]

    def test_learns_a_simple_rule(self):
        spec, data = self.image_set(3, n=8)
        res = train(spec, data, data, TrainerConfig(batch_size=4, learning_rate=0.05, max_epochs=30))
        assert res.history[-1].train_loss < res.history[0].train_loss

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_history(self):
        spec, data = self.image_set(4)
        with pytest.raises(T.TrainingDiverged) as info:
            train(spec, data, data, TrainerConfig(batch_size=2, learning_rate=1e30, max_epochs=5))
        assert isinstance(info.value.history, list)

    def test_rejects_empty_validation_and_bad_config(self):
        spec, data = self.image_set(5)
        with pytest.raises(ValueError):
            train(spec, data, data.take(np.arange(0)))
        with pytest.raises(ValueError):
            TrainerConfig(patience=0)
        with pytest.raises(ValueError):
            TrainerConfig(patience=5, plateau_epochs=10)

    def test_history_csv(self, tmp_path):
        spec, data = self.image_set(6)
        res = train(spec, data, data, TrainerConfig(batch_size=3, max_epochs=2))
        res.write_history(tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0].startswith("epoch,train_loss,val_brier,lr") and len(lines) == 3

    def test_predict_shape(self):
        spec, data = self.image_set(7)
        w = init_weights(spec, 8, 8, 0)
        assert predict(spec, w, data, batch_size=4).shape == data.labels.shape


def test_weights_roundtrip(tmp_path):
    spec, _ = build_segnet(SegNetParams(input_size=16, base_filters=2, n_pools=2))
    w = init_weights(spec, 16, 16, 3)
    save_weights(tmp_path / "w", w)
    back = load_weights(tmp_path / "w")
    assert set(back) == set(w)
    assert all(np.array_equal(back[k], w[k]) for k in w)
    assert (tmp_path / "w.bin").stat().st_size == 4 * sum(v.size for v in w.values())


def test_truncated_weight_file_rejected(tmp_path):
    save_weights(tmp_path / "w", {"a": np.ones(4, np.float32)})
    (tmp_path / "w.bin").write_bytes(b"\0" * 8)
    with pytest.raises(ValueError):
        load_weights(tmp_path / "w")


def test_loss_plateau_summary():
    rec = lambda e, tl, vl: T.EpochRecord(e, tl, 0.0, 0.01, vl, 0.0)
    falling = [rec(e, 1 / e, 1 / e) for e in range(1, 101)]
    p = T.loss_plateau(falling)
    assert p.max_val_rise == 0.0 and p.val_change == pytest.approx(1 - 90 / 100)
    rising = falling[:50] + [rec(51 + e, 0.01, 0.02 * 1.1) for e in range(20)]
    p = T.loss_plateau(rising)
    assert p.max_val_rise == pytest.approx(0.1) and not p.plateaued()
    flat = [rec(e, 0.5, 0.5) for e in range(1, 30)]
    assert T.loss_plateau(flat).plateaued()
    with pytest.raises(ValueError):
        T.loss_plateau(flat[:10])
