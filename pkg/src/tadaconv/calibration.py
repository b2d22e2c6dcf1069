"""Per-frame kernel calibration: config, weight generator, calibrated conv.

A calibrated convolution keeps one base kernel shared by all frames and
multiplies it, per frame, by calibration weights generated from temporal
context: per-frame channel descriptors run through one or two 1-D
convolutions along time, optionally mixed with a clip-level descriptor
through a channel-to-channel linear map. With the generator's last layer
zeroed and a constant one added, the operator starts out exactly equal to
the plain shared-kernel convolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .ops import (
    LinearParams,
    batchnorm,
    conv1d_temporal,
    conv2d_framewise,
    conv2d_per_frame,
    gap_spatial,
    gap_spatiotemporal,
    kaiming_uniform,
    linear,
    make_batchnorm,
)
from .tensor import Tensor, as_tensor, mul, relu, reshape, transpose

GENERATORS = ("linear", "nonlinear")
CALIBRATION_DIMS = ("cin", "cout", "cin_x_cout", "kspatial")
CALIBRATION_MODES = ("dynamic", "learnable", "none")


@dataclass
class TAdaConvConfig:
    """Every knob of the calibration scheme.

    generator: single 1-D conv ("linear") or conv-BN-ReLU-conv ("nonlinear").
    k1, k2: temporal kernel sizes of the generator convs (k2 unused if linear).
    reduction: channel reduction ratio of the nonlinear generator's bottleneck.
    use_global: add a linearly mapped clip descriptor to the frame descriptors.
    calibration_dim: which base-kernel axis the weights multiply.
    calibration_mode: input-dependent ("dynamic"), free parameter ("learnable"),
        or disabled ("none").
    temporally_varying: distinct weights per frame vs. one set for the clip.
    calibrated_fraction: leading fraction of the calibrated axis that is
        actually calibrated; the rest keeps the base kernel untouched.
    identity_init: zero the generator output so calibration starts at one.
    """

    generator: str = "nonlinear"
    k1: int = 3
    k2: int = 3
    reduction: int = 4
    use_global: bool = True
    calibration_dim: str = "cin"
    calibration_mode: str = "dynamic"
    temporally_varying: bool = True
    calibrated_fraction: float = 1.0
    identity_init: bool = True

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ConfigError(f"generator must be one of {GENERATORS}, got {self.generator!r}")
        if self.calibration_dim not in CALIBRATION_DIMS:
            raise ConfigError(f"calibration_dim must be one of {CALIBRATION_DIMS}, got {self.calibration_dim!r}")
        if self.calibration_mode not in CALIBRATION_MODES:
            raise ConfigError(f"calibration_mode must be one of {CALIBRATION_MODES}, got {self.calibration_mode!r}")
        for name, k in (("k1", self.k1), ("k2", self.k2)):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be odd and positive, got {k}")
        if self.reduction < 1:
            raise ConfigError(f"reduction must be >= 1, got {self.reduction}")
        if not 0.0 < self.calibrated_fraction <= 1.0:
            raise ConfigError(f"calibrated_fraction must lie in (0, 1], got {self.calibrated_fraction}")


def _head_widths(cfg: TAdaConvConfig, cin: int, cout: int, k_spatial: int) -> dict[str, int]:
    if cfg.calibration_dim == "cin":
        return {"cin": cin}
    if cfg.calibration_dim == "cout":
        return {"cout": cout}
    if cfg.calibration_dim == "cin_x_cout":
        return {"cin": cin, "cout": cout}
    return {"kspatial": k_spatial * k_spatial}


class CalibrationGenerator:
    """Parameters of the calibration-weight generator for one conv layer."""

    def __init__(self, cin: int, cout: int, k_spatial: int, cfg: TAdaConvConfig,
                 frames: int | None = None, dtype="f64", rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.cin = cin
        self.cout = cout
        self.k_spatial = k_spatial
        self.heads = _head_widths(cfg, cin, cout, k_spatial)
        self.dtype = dtype

        self.trunk_weight = None
        self.trunk_bn = None
        self.head_weights: dict[str, Tensor] = {}
        self.global_fc: LinearParams | None = None
        self.learned: dict[str, Tensor] = {}

        if cfg.calibration_mode == "dynamic":
            if cfg.generator == "nonlinear":
                reduced = cin // cfg.reduction
                if reduced < 1:
                    raise ConfigError(f"reduction {cfg.reduction} leaves no channels for {cin} inputs")
                self.reduced = reduced
                self.trunk_weight = Tensor(
                    kaiming_uniform((reduced, cin, cfg.k1), cin * cfg.k1, rng, dtype), requires_grad=True
                )
                self.trunk_bn = make_batchnorm(reduced, dtype=dtype)
                for name, width in self.heads.items():
                    self.head_weights[name] = Tensor(
                        kaiming_uniform((width, reduced, cfg.k2), reduced * cfg.k2, rng, dtype),
                        requires_grad=True,
                    )
            else:
                self.reduced = cin
                for name, width in self.heads.items():
                    self.head_weights[name] = Tensor(
                        kaiming_uniform((width, cin, cfg.k1), cin * cfg.k1, rng, dtype), requires_grad=True
                    )
            if cfg.use_global:
                self.global_fc = LinearParams(
                    weight=Tensor(kaiming_uniform((cin, cin), cin, rng, dtype), requires_grad=True)
                )
        elif cfg.calibration_mode == "learnable":
            if cfg.temporally_varying:
                if frames is None:
                    raise ConfigError("learnable temporally-varying calibration needs the frame count up front")
                steps = frames
            else:
                steps = 1
            for name, width in self.heads.items():
                self.learned[name] = Tensor(
                    kaiming_uniform((width, steps), max(width, 1), rng, dtype), requires_grad=True
                )

        if cfg.identity_init:
            init_identity(self)

    def named_parameters(self, prefix: str = ""):
        if self.trunk_weight is not None:
            yield prefix + "trunk.w", self.trunk_weight
        if self.trunk_bn is not None:
            yield prefix + "trunk.bn.gamma", self.trunk_bn.gamma
            yield prefix + "trunk.bn.beta", self.trunk_bn.beta
        for name, w in self.head_weights.items():
            yield prefix + f"head.{name}.w", w
        if self.global_fc is not None:
            yield prefix + "global_fc.w", self.global_fc.weight
        for name, w in self.learned.items():
            yield prefix + f"learned.{name}", w

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def init_identity(gen: CalibrationGenerator, rng: np.random.Generator | None = None) -> CalibrationGenerator:
    """Zero the generator output so every calibration weight is exactly one.

    The head convolutions (and the free parameters in learnable mode) are
    zero-filled; with the constant one added downstream the calibrated kernel
    equals the base kernel bit for bit. When an rng is supplied the trunk
    conv is re-drawn from the fan-in-scaled uniform.
    """
    if rng is not None and gen.trunk_weight is not None:
        gen.trunk_weight.data[...] = kaiming_uniform(
            gen.trunk_weight.shape, gen.cin * gen.cfg.k1, rng, gen.dtype
        )
    for w in gen.head_weights.values():
        w.data[...] = 0.0
    for w in gen.learned.values():
        w.data[...] = 0.0
    return gen


@dataclass
class CalibrationWeights:
    """Broadcast-ready calibration factors keyed by head name.

    Shapes are [N, T', ...] aligned with kernels [N, T, Co, Ci, k, k]:
    cin -> [N,T',1,Ci,1,1], cout -> [N,T',Co,1,1,1], kspatial -> [N,T',1,1,k,k];
    T' is 1 when the weights are shared across frames.
    """

    factors: dict[str, Tensor] = field(default_factory=dict)

    def max_dev_from_one(self) -> float:
        return max(float(np.max(np.abs(f.data - 1.0))) for f in self.factors.values())


def _fraction_mask(width: int, fraction: float, dtype) -> np.ndarray | None:
    if fraction >= 1.0:
        return None
    m = int(np.ceil(fraction * width))
    mask = np.zeros((1, width, 1), dtype)
    mask[:, :m] = 1.0
    return mask


def _to_broadcast_shape(core: Tensor, name: str, gen: CalibrationGenerator) -> Tensor:
    n, width, steps = core.shape
    stacked = transpose(core, (0, 2, 1))  # [N, T', width]
    if name == "cin":
        return reshape(stacked, (n, steps, 1, width, 1, 1))
    if name == "cout":
        return reshape(stacked, (n, steps, width, 1, 1, 1))
    k = gen.k_spatial
    return reshape(stacked, (n, steps, 1, 1, k, k))


def generate_calibration(x, gen: CalibrationGenerator, training: bool = True) -> CalibrationWeights:
    """Produce the per-frame calibration weights for input x[N,C,T,H,W]."""
    x = as_tensor(x)
    cfg = gen.cfg
    if x.ndim != 5:
        raise DimensionError(f"expected [N,C,T,H,W], got shape {x.shape}")
    if x.shape[1] != gen.cin:
        raise DimensionError(f"generator built for {gen.cin} channels, input has {x.shape[1]}")
    n = x.shape[0]
    dtype = x.dtype

    if cfg.calibration_mode == "none":
        ones = Tensor(np.ones((1, 1, 1, 1, 1, 1), dtype))
        return CalibrationWeights({"none": ones})

    if cfg.calibration_mode == "learnable":
        factors = {}
        for name, theta in gen.learned.items():
            core = reshape(theta, (1,) + theta.shape)  # [1, width, T']
            mask = _fraction_mask(gen.heads[name], cfg.calibrated_fraction, dtype)
            calibrated = core if mask is None else mul(core, mask)
            factors[name] = _to_broadcast_shape(1.0 + calibrated, name, gen)
        return CalibrationWeights(factors)

    # dynamic: descriptors -> generator -> 1 + output
    if cfg.temporally_varying:
        desc = gap_spatial(x)  # [N, C, T]
    else:
        desc = reshape(gap_spatiotemporal(x), (n, gen.cin, 1))
    if cfg.use_global:
        clip_desc = gap_spatiotemporal(x)  # [N, C]
        desc = desc + reshape(linear(clip_desc, gen.global_fc), (n, gen.cin, 1))

    if cfg.generator == "nonlinear":
        hidden = conv1d_temporal(desc, gen.trunk_weight, stride=1, pad=(cfg.k1 - 1) // 2)
        hidden = relu(batchnorm(hidden, gen.trunk_bn, training=training))
        head_pad = (cfg.k2 - 1) // 2
    else:
        hidden = desc
        head_pad = (cfg.k1 - 1) // 2

    factors = {}
    for name, w in gen.head_weights.items():
        core = conv1d_temporal(hidden, w, stride=1, pad=head_pad)  # [N, width, T']
        mask = _fraction_mask(gen.heads[name], cfg.calibrated_fraction, dtype)
        calibrated = core if mask is None else mul(core, mask)
        factors[name] = _to_broadcast_shape(1.0 + calibrated, name, gen)
    return CalibrationWeights(factors)


def tadaconv_forward(x, base_weight, gen: CalibrationGenerator, stride: int = 1, pad: int = 0,
                     training: bool = True) -> Tensor:
    """Per-frame convolution with the calibrated kernel, differentiable end to end."""
    x = as_tensor(x)
    base_weight = as_tensor(base_weight)
    if base_weight.ndim != 4 or base_weight.shape[2] != base_weight.shape[3]:
        raise DimensionError(f"expected base kernel [Co,Ci,k,k], got shape {base_weight.shape}")
    co, ci, k, _ = base_weight.shape
    if (ci, co, k) != (gen.cin, gen.cout, gen.k_spatial):
        raise DimensionError(
            f"generator built for Ci={gen.cin}, Co={gen.cout}, k={gen.k_spatial}; "
            f"base kernel is {base_weight.shape}"
        )
    if gen.cfg.calibration_mode == "none":
        return conv2d_per_frame(x, base_weight, stride=stride, pad=pad)

    calib = generate_calibration(x, gen, training=training)
    kernels = reshape(base_weight, (1, 1, co, ci, k, k))
    for factor in calib.factors.values():
        kernels = kernels * factor
    n, t = x.shape[0], x.shape[2]
    if kernels.shape[0] != n or kernels.shape[1] != t:
        kernels = kernels * Tensor(np.ones((n, t, 1, 1, 1, 1), x.dtype))
    return conv2d_framewise(x, kernels, stride=stride, pad=pad)
