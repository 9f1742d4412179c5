"""A small static computation graph over the layers in :mod:`.layers`.

A :class:`NetworkSpec` is a topologically ordered tuple of nodes; every
node names its inputs.  Weights live in a flat dict keyed
``"<node>/<param>"``.  ``forward`` returns the output and a tape that
``backward`` consumes; batch-norm batch statistics come back on the tape so
the caller decides whether to fold them into the running averages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L


@dataclass(frozen=True)
class Node:
    name: str
    kind: str                      # input conv batchnorm relu sigmoid maxpool unpool upsample concat reshape gather
    inputs: tuple[str, ...] = ()
    channels: int = 0              # input: channel count; conv: filters
    kernel: int = 0
    pool: str = ""                 # unpool: paired pool node


@dataclass(frozen=True)
class NetworkSpec:
    nodes: tuple[Node, ...]
    input_names: tuple[str, ...]
    output: str

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def __post_init__(self):
        seen = set()
        for n in self.nodes:
            if n.name in seen:
                raise ValueError(f"duplicate node name {n.name!r}")
            for i in n.inputs:
                if i not in seen:
                    raise ValueError(f"node {n.name!r} uses {i!r} before it is defined")
            if n.kind == "unpool":
                if n.pool not in seen or self.node(n.pool).kind != "maxpool":
                    raise ValueError(f"unpool {n.name!r} must reference an earlier maxpool")
            seen.add(n.name)


# --------------------------------------------------------------------------
# shapes and parameters


def infer_shapes(spec: NetworkSpec, height: int, width: int, n_valid: int | None = None) -> dict[str, tuple]:
    """Per-node output shape without the batch axis."""
    shapes: dict[str, tuple] = {}
    for n in spec.nodes:
        ins = [shapes[i] for i in n.inputs]
        if n.kind == "input":
            shapes[n.name] = (height, width, n.channels)
        elif n.kind == "conv":
            shapes[n.name] = ins[0][:2] + (n.channels,)
        elif n.kind in ("batchnorm", "relu", "sigmoid"):
            shapes[n.name] = ins[0]
        elif n.kind == "maxpool":
            h, w, c = ins[0]
            if h % 2 or w % 2:
                raise ValueError(f"{n.name}: cannot pool odd spatial dims {h}x{w}")
            shapes[n.name] = (h // 2, w // 2, c)
        elif n.kind == "unpool":
            pre = shapes[spec.node(n.pool).inputs[0]]
            if (ins[0][0] * 2, ins[0][1] * 2) != pre[:2]:
                raise ValueError(f"{n.name}: shape does not match paired pool {n.pool}")
            shapes[n.name] = pre[:2] + (ins[0][2],)
        elif n.kind == "upsample":
            shapes[n.name] = (ins[0][0] * 2, ins[0][1] * 2, ins[0][2])
        elif n.kind == "concat":
            if len({s[:2] for s in ins}) != 1:
                raise ValueError(f"{n.name}: spatial dims differ across concat inputs")
            shapes[n.name] = ins[0][:2] + (sum(s[2] for s in ins),)
        elif n.kind == "reshape":
            shapes[n.name] = (int(np.prod(ins[0])),)
        elif n.kind == "gather":
            shapes[n.name] = (n_valid if n_valid is not None else ins[0][0],)
        else:
            raise ValueError(f"unknown node kind {n.kind!r}")
    return shapes


def param_shapes(spec: NetworkSpec, height: int, width: int) -> dict[str, tuple[tuple, bool]]:
    """``"node/param" -> (shape, trainable)`` for every weight."""
    shapes = infer_shapes(spec, height, width)
    out: dict[str, tuple[tuple, bool]] = {}
    for n in spec.nodes:
        if n.kind == "conv":
            cin = shapes[n.inputs[0]][-1]
            out[f"{n.name}/kernel"] = ((n.kernel, n.kernel, cin, n.channels), True)
            out[f"{n.name}/bias"] = ((n.channels,), True)
        elif n.kind == "batchnorm":
            c = shapes[n.inputs[0]][-1]
            out[f"{n.name}/gamma"] = ((c,), True)
            out[f"{n.name}/beta"] = ((c,), True)
            out[f"{n.name}/moving_mean"] = ((c,), False)
            out[f"{n.name}/moving_variance"] = ((c,), False)
    return out


@dataclass(frozen=True)
class ParamReport:
    rows: tuple[tuple[str, str, tuple, int], ...]   # name, kind, output shape, parameter count
    total: int
    trainable: int

    @property
    def non_trainable(self) -> int:
        return self.total - self.trainable

    def params_of(self, name: str) -> int:
        return next(r[3] for r in self.rows if r[0] == name)

    def format(self) -> str:
        lines = [f"{'layer':<16}{'kind':<11}{'output shape':<22}{'params':>8}"]
        for name, kind, shape, count in self.rows:
            lines.append(f"{name:<16}{kind:<11}{str(shape):<22}{count:>8}")
        lines.append(f"total {self.total:,}  trainable {self.trainable:,}  non-trainable {self.non_trainable:,}")
        return "\n".join(lines)


def param_report(spec: NetworkSpec, height: int, width: int, n_valid: int | None = None) -> ParamReport:
    shapes = infer_shapes(spec, height, width, n_valid)
    pshapes = param_shapes(spec, height, width)
    counts: dict[str, int] = {}
    total = trainable = 0
    for key, (shape, is_trainable) in pshapes.items():
        size = int(np.prod(shape))
        node = key.split("/")[0]
        counts[node] = counts.get(node, 0) + size
        total += size
        trainable += size if is_trainable else 0
    rows = tuple((n.name, n.kind, shapes[n.name], counts.get(n.name, 0)) for n in spec.nodes)
    return ParamReport(rows, total, trainable)


def init_weights(spec: NetworkSpec, height: int, width: int, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Glorot-uniform kernels, zero biases, unit gamma, zero beta."""
    from .. import rng

    weights = {}
    for i, (key, (shape, _)) in enumerate(param_shapes(spec, height, width).items()):
        kind = key.split("/")[1]
        if kind == "kernel":
            k, _, cin, cout = shape
            limit = np.sqrt(6.0 / (k * k * cin + k * k * cout))
            weights[key] = rng.stream(seed, 41, i).uniform(-limit, limit, size=shape).astype(dtype)
        elif kind in ("gamma", "moving_variance"):
            weights[key] = np.ones(shape, dtype=dtype)
        else:
            weights[key] = np.zeros(shape, dtype=dtype)
    return weights


# --------------------------------------------------------------------------
# execution


@dataclass
class Tape:
    values: dict = field(default_factory=dict)
    caches: dict = field(default_factory=dict)
    batch_stats: dict = field(default_factory=dict)


def forward(spec: NetworkSpec, weights: dict, inputs: dict, mask: np.ndarray | None = None,
            training: bool = False) -> tuple[np.ndarray, Tape]:
    tape = Tape()
    vals = tape.values
    for n in spec.nodes:
        x = vals[n.inputs[0]] if n.inputs else None
        if n.kind == "input":
            out = inputs[n.name]
            if out.ndim != 4 or out.shape[-1] != n.channels:
                raise ValueError(f"input {n.name!r} must be (batch, H, W, {n.channels}), got {out.shape}")
        elif n.kind == "conv":
            out = L.conv2d(x, weights[f"{n.name}/kernel"], weights[f"{n.name}/bias"])
        elif n.kind == "batchnorm":
            g, b = weights[f"{n.name}/gamma"], weights[f"{n.name}/beta"]
            if training:
                out, cache, mean, var = L.batchnorm_train(x, g, b)
                tape.caches[n.name] = cache
                tape.batch_stats[n.name] = (mean, var)
            else:
                out, scale = L.batchnorm_infer(x, g, b, weights[f"{n.name}/moving_mean"],
                                               weights[f"{n.name}/moving_variance"])
                tape.caches[n.name] = scale
        elif n.kind == "relu":
            out = L.relu(x)
        elif n.kind == "sigmoid":
            out = L.sigmoid(x)
        elif n.kind == "maxpool":
            out, idx = L.maxpool_argmax(x)
            tape.caches[n.name] = idx
        elif n.kind == "unpool":
            pre = vals[spec.node(n.pool).inputs[0]]
            out = L.unpool(x, tape.caches[n.pool], x.shape[:1] + pre.shape[1:3] + x.shape[3:])
        elif n.kind == "upsample":
            out = L.upsample(x)
        elif n.kind == "concat":
            out = np.concatenate([vals[i] for i in n.inputs], axis=-1)
        elif n.kind == "reshape":
            out = x.reshape(x.shape[0], -1)
        elif n.kind == "gather":
            if mask is None:
                raise ValueError("gather needs a mask")
            out = x[:, np.flatnonzero(np.asarray(mask).reshape(-1))]
        else:
            raise ValueError(f"unknown node kind {n.kind!r}")
        vals[n.name] = out
    return vals[spec.output], tape


def backward(spec: NetworkSpec, weights: dict, tape: Tape, dout: np.ndarray,
             mask: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar whose gradient with respect to
    the network output is ``dout``.  Requires a training-mode tape for
    batch-norm layers."""
    vals = tape.values
    grads: dict[str, np.ndarray] = {}
    upstream: dict[str, np.ndarray] = {spec.output: dout}

    def push(name, g):
        if name in upstream:
            upstream[name] = upstream[name] + g
        else:
            upstream[name] = g

    for n in reversed(spec.nodes):
        g = upstream.pop(n.name, None)
        if g is None or n.kind == "input":
            continue
        x = vals[n.inputs[0]] if n.inputs else None
        if n.kind == "conv":
            dx, dk, db = L.conv2d_backward(g, x, weights[f"{n.name}/kernel"])
            grads[f"{n.name}/kernel"], grads[f"{n.name}/bias"] = dk, db
            push(n.inputs[0], dx)
        elif n.kind == "batchnorm":
            cache = tape.caches[n.name]
            if isinstance(cache, tuple):
                dx, dg, db = L.batchnorm_backward(g, cache)
            else:  # inference mode: affine map
                xhat = (x - weights[f"{n.name}/moving_mean"]) / np.sqrt(
                    weights[f"{n.name}/moving_variance"] + L.BN_EPSILON)
                axes = tuple(range(g.ndim - 1))
                dx, dg, db = g * cache, (g * xhat).sum(axis=axes), g.sum(axis=axes)
            grads[f"{n.name}/gamma"], grads[f"{n.name}/beta"] = dg, db
            push(n.inputs[0], dx)
        elif n.kind == "relu":
            push(n.inputs[0], L.relu_backward(g, x))
        elif n.kind == "sigmoid":
            push(n.inputs[0], L.sigmoid_backward(g, vals[n.name]))
        elif n.kind == "maxpool":
            push(n.inputs[0], L.maxpool_backward(g, tape.caches[n.name], x.shape))
        elif n.kind == "unpool":
            push(n.inputs[0], L.unpool_backward(g, tape.caches[n.pool]))
        elif n.kind == "upsample":
            push(n.inputs[0], L.upsample_backward(g))
        elif n.kind == "concat":
            start = 0
            for i in n.inputs:
                c = vals[i].shape[-1]
                push(i, g[..., start:start + c])
                start += c
        elif n.kind == "reshape":
            push(n.inputs[0], g.reshape(x.shape))
        elif n.kind == "gather":
            full = np.zeros(x.shape, dtype=g.dtype)
            full[:, np.flatnonzero(np.asarray(mask).reshape(-1))] = g
            push(n.inputs[0], full)
    return grads


def apply_batch_stats(weights: dict, tape: Tape, momentum: float = L.BN_MOMENTUM):
    for name, (mean, var) in tape.batch_stats.items():
        weights[f"{name}/moving_mean"] = L.update_moving(weights[f"{name}/moving_mean"], mean, momentum)
        weights[f"{name}/moving_variance"] = L.update_moving(weights[f"{name}/moving_variance"], var, momentum)


def trainable_keys(spec: NetworkSpec, height: int, width: int) -> list[str]:
    return [k for k, (_, t) in param_shapes(spec, height, width).items() if t]
