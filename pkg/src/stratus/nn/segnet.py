"""SegNet-style encoder-decoder with masked per-pixel output.

Default layout (widths in multiples of ``base_filters``), one pool after
every encoder group and one paired unpool before every decoder group::

    encoder  [1] [1] [2 2] [4] [4 4] [8 8 8] [8 8 8]   7 pools
    middle   [8]
    decoder  [8 8 8] [8 8 4] [4] [4 2] [2 1] [1] [1]   7 unpools

The decoder output is concatenated with the main input and the late
(coordinate) input, then a 1x1 convolution, batch norm, sigmoid and a
gather of the mask-valid pixels produce one probability per valid pixel.
With ``odd_pool=False`` every group holds two convolutions instead.
"""

from __future__ import annotations

from dataclasses import dataclass

from .graph import NetworkSpec, Node, ParamReport, param_report

ENCODER_ODD = ((1,), (1,), (2, 2), (4,), (4, 4), (8, 8, 8), (8, 8, 8))
DECODER_ODD = ((8, 8, 8), (8, 8, 4), (4,), (4, 2), (2, 1), (1,), (1,))
ENCODER_EVEN = ((1, 1), (2, 2), (4, 4), (8, 8), (8, 8), (8, 8), (8, 8))
DECODER_EVEN = ((8, 8), (8, 8), (8, 8), (8, 4), (4, 2), (2, 1), (1, 1))


@dataclass(frozen=True)
class SegNetParams:
    input_size: int = 384
    input_channels: int = 14
    late_channels: int = 3
    base_filters: int = 8
    kernel: int = 3
    n_pools: int = 7
    unpool: bool = True
    skip: bool = False
    x_last: bool = True
    odd_pool: bool = True
    dense: bool = False

    def __post_init__(self):
        if self.dense:
            raise ValueError("dense decoder heads are not supported")
        if not 1 <= self.n_pools <= 7:
            raise ValueError("n_pools must lie in 1..7")
        if self.input_size % (2 ** self.n_pools):
            raise ValueError(f"input size {self.input_size} is not divisible by 2^{self.n_pools}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")


def build_segnet(params: SegNetParams = SegNetParams()) -> tuple[NetworkSpec, ParamReport]:
    p = params
    enc_all, dec_all = (ENCODER_ODD, DECODER_ODD) if p.odd_pool else (ENCODER_EVEN, DECODER_EVEN)
    enc = enc_all[:p.n_pools]
    dec = dec_all[len(dec_all) - p.n_pools:]
    nodes: list[Node] = []
    count = {"conv": 0}

    def conv_block(src: str, mult: int, kernel: int) -> str:
        count["conv"] += 1
        i = count["conv"]
        nodes.append(Node(f"conv{i}", "conv", (src,), channels=mult * p.base_filters, kernel=kernel))
        nodes.append(Node(f"bn{i}", "batchnorm", (f"conv{i}",)))
        nodes.append(Node(f"relu{i}", "relu", (f"bn{i}",)))
        return f"relu{i}"

    nodes.append(Node("main", "input", channels=p.input_channels))
    nodes.append(Node("late", "input", channels=p.late_channels))
    x = "main"
    if not p.x_last:
        nodes.append(Node("stem", "concat", ("main", "late")))
        x = "stem"
    pools, skips = [], []
    for level, group in enumerate(enc, start=1):
        for mult in group:
            x = conv_block(x, mult, p.kernel)
        skips.append(x)
        nodes.append(Node(f"pool{level}", "maxpool", (x,)))
        pools.append(f"pool{level}")
        x = f"pool{level}"
    x = conv_block(x, enc[-1][-1], p.kernel)
    for level, group in enumerate(dec, start=1):
        pool = pools[-level]
        name = f"up{level}"
        if p.unpool:
            nodes.append(Node(name, "unpool", (x,), pool=pool))
        else:
            nodes.append(Node(name, "upsample", (x,)))
        x = name
        if p.skip:
            nodes.append(Node(f"skip{level}", "concat", (x, skips[-level])))
            x = f"skip{level}"
        for mult in group:
            x = conv_block(x, mult, p.kernel)
    head_inputs = (x, "main", "late") if p.x_last else (x,)
    nodes.append(Node("concat_out", "concat", head_inputs))
    nodes.append(Node("conv_out", "conv", ("concat_out",), channels=1, kernel=1))
    nodes.append(Node("bn_out", "batchnorm", ("conv_out",)))
    nodes.append(Node("flatten", "reshape", ("bn_out",)))
    nodes.append(Node("prob", "sigmoid", ("flatten",)))
    nodes.append(Node("masked", "gather", ("prob",)))
    spec = NetworkSpec(tuple(nodes), ("main", "late"), "masked")
    return spec, param_report(spec, p.input_size, p.input_size)
