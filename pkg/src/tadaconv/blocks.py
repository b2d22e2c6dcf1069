"""Network building: temporal feature aggregation, bottleneck blocks, presets.

Networks are declared by `NetSpec` (stem plus four-ish stages of bottleneck
blocks) and built into plain-Python module trees. The calibrated middle conv
comes bundled with the two-branch temporal aggregation; with the generator at
identity and the pooled branch's batchnorm zeroed, a calibrated network is
function-identical to its shared-kernel twin, so pretrained-style base
weights can be dropped in unchanged.

Downsampling convention used by every preset: no pooling after the stem, the
spatial stride-2 sits on each stage's first 3x3 conv, and the temporal
resolution is never reduced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationGenerator, TAdaConvConfig, tadaconv_forward
from .errors import ConfigError, DimensionError, ParameterError
from .ops import (
    BatchNormParams,
    LinearParams,
    batchnorm,
    conv2d_per_frame,
    conv3d,
    gap_spatiotemporal,
    kaiming_uniform,
    linear,
    make_batchnorm,
    temporal_avg_pool_strided,
    temporal_max_pool_strided,
)
from .tensor import Tensor, as_tensor, mul, relu, resolve_dtype

CONV_KINDS = ("spatial", "tada", "2plus1d", "3d")
POOL_KINDS = ("avg", "max", "mix")


# ---------------------------------------------------------------------------
# temporal feature aggregation
# ---------------------------------------------------------------------------

@dataclass
class AggregationParams:
    """Two batchnorms for the pass-through and pooled branches of aggregation."""

    bn_main: BatchNormParams
    bn_pool: BatchNormParams
    pool_kind: str = "avg"
    window: int = 3

    def __post_init__(self):
        if self.pool_kind not in POOL_KINDS:
            raise ConfigError(f"pool_kind must be one of {POOL_KINDS}, got {self.pool_kind!r}")
        if self.window < 1:
            raise ParameterError(f"pooling window must be >= 1, got {self.window}")


def make_aggregation(channels: int, dtype="f64", pool_kind: str = "avg", window: int = 3,
                     eps: float = 1e-5) -> AggregationParams:
    """Fresh aggregation parameters; the pooled branch's scale starts at zero."""
    return AggregationParams(
        bn_main=make_batchnorm(channels, dtype=dtype, eps=eps),
        bn_pool=make_batchnorm(channels, dtype=dtype, eps=eps, zero_init=True),
        pool_kind=pool_kind,
        window=window,
    )


@dataclass
class BlockVariantFlags:
    """Ablation switches for the aggregation structure."""

    use_aggregation: bool = True
    use_shortcut_branch: bool = True
    separate_bn: bool = True

    def __post_init__(self):
        if self.separate_bn and not self.use_shortcut_branch:
            raise ConfigError("separate_bn requires the shortcut branch")


def _pool(x, kind: str, window: int):
    if kind == "avg":
        return temporal_avg_pool_strided(x, window)
    if kind == "max":
        return temporal_max_pool_strided(x, window)
    return mul(
        temporal_avg_pool_strided(x, window) + temporal_max_pool_strided(x, window), 0.5
    )


def aggregate(conv_out, params: AggregationParams, flags: BlockVariantFlags | None = None,
              training: bool = True) -> Tensor:
    """relu(bn_main(x) + bn_pool(pool_k(x))), or the ablated variants of it.

    Without aggregation only the pass-through branch remains; without the
    shortcut branch only the pooled one; without separate batchnorm the pooled
    branch reuses bn_main's parameters.
    """
    flags = flags if flags is not None else BlockVariantFlags()
    conv_out = as_tensor(conv_out)
    if not flags.use_aggregation:
        return relu(batchnorm(conv_out, params.bn_main, training))
    pooled = _pool(conv_out, params.pool_kind, params.window)
    if not flags.use_shortcut_branch:
        return relu(batchnorm(pooled, params.bn_main, training))
    bn_pool = params.bn_pool if flags.separate_bn else params.bn_main
    return relu(batchnorm(conv_out, params.bn_main, training) + batchnorm(pooled, bn_pool, training))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class ConvBN:
    """Bias-free convolution plus batchnorm; 2-D per frame, or 3-D when kt > 1."""

    def __init__(self, cin, cout, k=3, kt=1, stride=1, pad=None, dtype="f64", rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.k, self.kt, self.stride = k, kt, stride
        self.pad = (k - 1) // 2 if pad is None else pad
        shape = (cout, cin, k, k) if kt == 1 else (cout, cin, kt, k, k)
        self.weight = Tensor(kaiming_uniform(shape, cin * k * k * kt, rng, dtype), requires_grad=True)
        self.bn = make_batchnorm(cout, dtype=dtype)

    def forward(self, x, training=True):
        if self.kt == 1:
            y = conv2d_per_frame(x, self.weight, stride=self.stride, pad=self.pad)
        else:
            y = conv3d(x, self.weight, stride=self.stride, pad=self.pad)
        return batchnorm(y, self.bn, training)

    def named_parameters(self, prefix=""):
        yield prefix + "w", self.weight
        yield prefix + "bn.gamma", self.bn.gamma
        yield prefix + "bn.beta", self.bn.beta


class TAdaConvAggregate:
    """Calibrated 3x3 conv followed by two-branch temporal aggregation."""

    def __init__(self, channels, cfg: TAdaConvConfig, frames, stride=1, dtype="f64", rng=None,
                 flags: BlockVariantFlags | None = None, pool_kind="avg", pool_window=3):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.base_weight = Tensor(
            kaiming_uniform((channels, channels, 3, 3), channels * 9, rng, dtype), requires_grad=True
        )
        self.gen = CalibrationGenerator(channels, channels, 3, cfg, frames=frames, dtype=dtype, rng=rng)
        self.agg = make_aggregation(channels, dtype=dtype, pool_kind=pool_kind, window=pool_window)
        self.flags = flags if flags is not None else BlockVariantFlags()

    @property
    def bn(self):
        # the pass-through branch's batchnorm fills the plain conv's bn slot
        return self.agg.bn_main

    def forward(self, x, training=True):
        y = tadaconv_forward(x, self.base_weight, self.gen, stride=self.stride, pad=1, training=training)
        return aggregate(y, self.agg, self.flags, training)

    def named_parameters(self, prefix=""):
        yield prefix + "w", self.base_weight
        yield prefix + "bn.gamma", self.agg.bn_main.gamma
        yield prefix + "bn.beta", self.agg.bn_main.beta
        yield prefix + "bn_pool.gamma", self.agg.bn_pool.gamma
        yield prefix + "bn_pool.beta", self.agg.bn_pool.beta
        yield from self.gen.named_parameters(prefix + "gen.")


# ---------------------------------------------------------------------------
# declarative network specs
# ---------------------------------------------------------------------------

@dataclass
class StageSpec:
    blocks: int
    mid: int
    out: int
    stride: int = 2
    conv_kind: str = "spatial"

    def __post_init__(self):
        if self.blocks < 1 or self.mid < 1 or self.out < 1:
            raise ConfigError("stage extents must be positive")
        if self.conv_kind not in CONV_KINDS:
            raise ConfigError(f"conv_kind must be one of {CONV_KINDS}, got {self.conv_kind!r}")


@dataclass
class NetSpec:
    """Stem + stages + head, enough to build the model or to cost it statically."""

    name: str
    stages: list[StageSpec]
    in_channels: int = 3
    stem_width: int = 64
    stem_kernel: int = 7
    stem_temporal_kernel: int = 1
    stem_stride: int = 2
    num_classes: int = 400
    frames: int = 8
    height: int = 224
    width: int = 224

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("a network needs at least one stage")
        for v in (self.in_channels, self.stem_width, self.num_classes, self.frames, self.height, self.width):
            if v < 1:
                raise ConfigError("network extents must be positive")


def _resnet50_stages(kind: str) -> list[StageSpec]:
    widths = [(3, 64, 256), (4, 128, 512), (6, 256, 1024), (3, 512, 2048)]
    return [StageSpec(blocks=b, mid=m, out=o, stride=2, conv_kind=kind) for b, m, o in widths]


def _tiny_stages(kind: str) -> list[StageSpec]:
    return [
        StageSpec(blocks=1, mid=4, out=16, stride=1, conv_kind=kind),
        StageSpec(blocks=1, mid=4, out=16, stride=1, conv_kind=kind),
    ]


def _tiny_spec(name: str, kind: str) -> NetSpec:
    return NetSpec(
        name=name,
        stages=_tiny_stages(kind),
        in_channels=1,
        stem_width=8,
        stem_kernel=3,
        stem_temporal_kernel=3 if kind == "3d" else 1,
        stem_stride=1,
        num_classes=2,
        frames=8,
        height=8,
        width=8,
    )


_PRESETS = {
    "r2d50": lambda: NetSpec(name="r2d50", stages=_resnet50_stages("spatial")),
    "tada2d50": lambda: NetSpec(name="tada2d50", stages=_resnet50_stages("tada")),
    "r2plus1d50": lambda: NetSpec(name="r2plus1d50", stages=_resnet50_stages("2plus1d")),
    "r3d50": lambda: NetSpec(name="r3d50", stages=_resnet50_stages("3d"), stem_temporal_kernel=3),
    "r2d_tiny": lambda: _tiny_spec("r2d_tiny", "spatial"),
    "tada2d_tiny": lambda: _tiny_spec("tada2d_tiny", "tada"),
    "r2plus1d_tiny": lambda: _tiny_spec("r2plus1d_tiny", "2plus1d"),
    "r3d_tiny": lambda: _tiny_spec("r3d_tiny", "3d"),
}


def preset_names() -> list[str]:
    return sorted(_PRESETS)


def preset(name: str) -> NetSpec:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(preset_names())}") from None


def _conv_out(extent: int, k: int, stride: int, pad: int) -> int:
    out = (extent + 2 * pad - k) // stride + 1
    if out < 1:
        raise ConfigError(f"geometry underflow: extent {extent} with k={k}, stride={stride}, pad={pad}")
    return out


@dataclass
class BlockGeometry:
    """Static geometry of one bottleneck block, as the cost model walks it."""

    stage: int
    block: int
    cin: int
    mid: int
    cout: int
    stride: int
    conv_kind: str
    h_in: int
    w_in: int
    h_out: int
    w_out: int
    has_projection: bool


def walk_blocks(spec: NetSpec):
    """Yield per-block geometry after shape-propagating the stem and stages."""
    h = _conv_out(spec.height, spec.stem_kernel, spec.stem_stride, (spec.stem_kernel - 1) // 2)
    w = _conv_out(spec.width, spec.stem_kernel, spec.stem_stride, (spec.stem_kernel - 1) // 2)
    cin = spec.stem_width
    for si, stage in enumerate(spec.stages):
        for bi in range(stage.blocks):
            stride = stage.stride if bi == 0 else 1
            h_out = _conv_out(h, 3, stride, 1)
            w_out = _conv_out(w, 3, stride, 1)
            yield BlockGeometry(
                stage=si, block=bi, cin=cin, mid=stage.mid, cout=stage.out, stride=stride,
                conv_kind=stage.conv_kind, h_in=h, w_in=w, h_out=h_out, w_out=w_out,
                has_projection=(stride != 1 or cin != stage.out),
            )
            h, w, cin = h_out, w_out, stage.out


def stage_output_sizes(spec: NetSpec) -> list[tuple[int, int, int]]:
    """(T, H, W) leaving each stage; frames are never downsampled."""
    sizes = []
    for g in walk_blocks(spec):
        if g.block == spec.stages[g.stage].blocks - 1:
            sizes.append((spec.frames, g.h_out, g.w_out))
    return sizes


# ---------------------------------------------------------------------------
# built blocks and networks
# ---------------------------------------------------------------------------

class Bottleneck:
    """1x1 reduce, configurable 3x3 middle, 1x1 expand, residual add."""

    def __init__(self, geo: BlockGeometry, cfg: TAdaConvConfig, frames: int,
                 dtype="f64", rng=None, agg_flags=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kind = geo.conv_kind
        self.reduce = ConvBN(geo.cin, geo.mid, k=1, stride=1, dtype=dtype, rng=rng)
        if geo.conv_kind == "spatial":
            self.middle = ConvBN(geo.mid, geo.mid, k=3, stride=geo.stride, dtype=dtype, rng=rng)
        elif geo.conv_kind == "tada":
            self.middle = TAdaConvAggregate(geo.mid, cfg, frames, stride=geo.stride,
                                            dtype=dtype, rng=rng, flags=agg_flags)
        elif geo.conv_kind == "2plus1d":
            self.middle = ConvBN(geo.mid, geo.mid, k=3, stride=geo.stride, dtype=dtype, rng=rng)
            self.middle_temporal = ConvBN(geo.mid, geo.mid, k=1, kt=3, stride=1, dtype=dtype, rng=rng)
        else:  # 3d
            self.middle = ConvBN(geo.mid, geo.mid, k=3, kt=3, stride=geo.stride, dtype=dtype, rng=rng)
        self.expand = ConvBN(geo.mid, geo.cout, k=1, stride=1, dtype=dtype, rng=rng)
        self.project = (
            ConvBN(geo.cin, geo.cout, k=1, stride=geo.stride, dtype=dtype, rng=rng)
            if geo.has_projection
            else None
        )

    def forward(self, x, training=True):
        h = relu(self.reduce.forward(x, training))
        if self.kind == "tada":
            h = self.middle.forward(h, training)  # aggregation supplies the relu
        else:
            h = relu(self.middle.forward(h, training))
            if self.kind == "2plus1d":
                h = relu(self.middle_temporal.forward(h, training))
        h = self.expand.forward(h, training)
        shortcut = self.project.forward(x, training) if self.project is not None else x
        return relu(h + shortcut)

    def named_parameters(self, prefix=""):
        yield from self.reduce.named_parameters(prefix + "reduce.")
        yield from self.middle.named_parameters(prefix + "middle.")
        if self.kind == "2plus1d":
            yield from self.middle_temporal.named_parameters(prefix + "middle_t.")
        yield from self.expand.named_parameters(prefix + "expand.")
        if self.project is not None:
            yield from self.project.named_parameters(prefix + "project.")


class Network:
    """Stem, bottleneck stages, spatio-temporal average pool, linear head."""

    def __init__(self, spec: NetSpec, cfg: TAdaConvConfig | None = None, dtype="f64",
                 seed: int = 0, agg_flags=None):
        cfg = cfg if cfg is not None else TAdaConvConfig()
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.cfg = cfg
        self.dtype = dtype
        self.np_dtype = resolve_dtype(dtype)
        self.stem = ConvBN(
            spec.in_channels, spec.stem_width, k=spec.stem_kernel, kt=spec.stem_temporal_kernel,
            stride=spec.stem_stride, dtype=dtype, rng=rng,
        )
        self.blocks = [
            Bottleneck(geo, cfg, spec.frames, dtype=dtype, rng=rng, agg_flags=agg_flags)
            for geo in walk_blocks(spec)
        ]
        head_in = spec.stages[-1].out
        self.head = LinearParams(
            weight=Tensor(kaiming_uniform((spec.num_classes, head_in), head_in, rng, dtype),
                          requires_grad=True),
            bias=Tensor(np.zeros(spec.num_classes, self.np_dtype), requires_grad=True),
        )

    def forward(self, x, training=True):
        x = as_tensor(x)
        if x.ndim != 5 or x.shape[1] != self.spec.in_channels:
            raise DimensionError(
                f"expected [N,{self.spec.in_channels},T,H,W] input, got shape {x.shape}"
            )
        h = relu(self.stem.forward(x, training))
        for block in self.blocks:
            h = block.forward(h, training)
        pooled = gap_spatiotemporal(h)
        return linear(pooled, self.head)

    def named_parameters(self):
        yield from self.stem.named_parameters("stem.")
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters(f"block{i}.")
        yield "head.w", self.head.weight
        yield "head.b", self.head.bias

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


def build_network(spec: NetSpec, cfg: TAdaConvConfig | None = None, dtype="f64",
                  seed: int = 0, agg_flags=None) -> Network:
    list(walk_blocks(spec))  # validates geometry before any allocation
    return Network(spec, cfg=cfg, dtype=dtype, seed=seed, agg_flags=agg_flags)


def copy_matching_params(dst: Network, src: Network) -> int:
    """Copy every parameter whose hierarchical name exists in both networks.

    Lets a calibrated network inherit the base weights of its shared-kernel
    twin; generator and pooled-branch parameters keep their own init.
    """
    src_params = dict(src.named_parameters())
    copied = 0
    for name, p in dst.named_parameters():
        q = src_params.get(name)
        if q is None:
            continue
        if q.shape != p.shape:
            raise DimensionError(f"parameter {name} has shape {p.shape} here, {q.shape} in source")
        p.data[...] = q.data.astype(p.data.dtype)
        copied += 1
    return copied


def save_params_flat(net: Network, path):
    """Dump all parameters as one flat binary array in walk order."""
    flat = np.concatenate([p.data.ravel() for p in net.parameters()]).astype(net.np_dtype)
    flat.tofile(path)


def load_params_flat(net: Network, path):
    flat = np.fromfile(path, dtype=net.np_dtype)
    if flat.size != net.param_count():
        raise ParameterError(f"dump holds {flat.size} values, model needs {net.param_count()}")
    offset = 0
    for p in net.parameters():
        p.data[...] = flat[offset : offset + p.size].reshape(p.shape)
        offset += p.size
