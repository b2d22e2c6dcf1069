"""Closed-form FLOPs/parameter counting for the operator zoo and whole networks.

Counting convention: one multiply-accumulate is one FLOP. That is the only
convention under which a 3x3, 64-channel conv over 8x56x56 comes out at
0.9248 GFLOPs, matching the printed comparison tables.

Two surfaces:

* `op_cost` evaluates the published per-operator formulas verbatim. For the
  calibrated conv the FLOPs formula already folds in spatial pooling, the
  generator and the kernel multiply; `convention="table1"` keeps the params
  formula without the global-descriptor linear map, `"appendixB"` adds its
  Ci*Ci/r accounting.

* `net_cost` walks a NetSpec layer by layer the way a profiler counts a real
  model: only convolutions and linear maps carry FLOPs (batchnorm, ReLU,
  pooling and elementwise work are zero-FLOP), while params cover every
  learnable including batchnorm affine pairs, so the static count matches the
  built model's parameter enumeration exactly. Under `"table1"` the
  calibration generator's global linear map is counted as built (C->C);
  `"appendixB"` counts it at the appendix's C->C/r width instead.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

from .blocks import NetSpec, walk_blocks
from .calibration import TAdaConvConfig, _head_widths
from .errors import QueryError

OP_KINDS = ("spatial", "temporal", "shift", "2plus1d", "3d", "correlation", "tadaconv")
CONVENTIONS = ("table1", "appendixB")


@dataclass
class OpCostQuery:
    """One operator-cost lookup; fields irrelevant to op_kind may stay None."""

    op_kind: str
    ci: int | None = None
    co: int | None = None
    k: int | None = None
    kt: int | None = None
    t: int | None = None
    h: int | None = None
    w: int | None = None
    r: int | None = None
    convention: str = "table1"


_REQUIRED = {
    "spatial": ("ci", "co", "k", "t", "h", "w"),
    "temporal": ("ci", "co", "k", "t", "h", "w"),
    "shift": ("ci", "co", "k", "t", "h", "w"),
    "2plus1d": ("ci", "co", "k", "t", "h", "w"),
    "3d": ("ci", "co", "k", "t", "h", "w"),
    "correlation": ("ci", "k", "t", "h", "w"),
    "tadaconv": ("ci", "co", "k", "t", "h", "w", "r"),
}


def op_cost(q: OpCostQuery) -> dict:
    """FLOPs and parameter count of one operator, exact integers."""
    if q.op_kind not in OP_KINDS:
        raise QueryError(f"unknown op kind {q.op_kind!r}; known: {', '.join(OP_KINDS)}")
    if q.convention not in CONVENTIONS:
        raise QueryError(f"unknown convention {q.convention!r}; known: {', '.join(CONVENTIONS)}")
    missing = [f for f in _REQUIRED[q.op_kind] if getattr(q, f) is None]
    if missing:
        raise QueryError(f"op kind {q.op_kind!r} needs fields: {', '.join(missing)}")
    for f in _REQUIRED[q.op_kind]:
        if getattr(q, f) < 1:
            raise QueryError(f"field {f} must be >= 1, got {getattr(q, f)}")

    ci, co, k = q.ci, q.co, q.k
    thw = (q.t or 1) * (q.h or 1) * (q.w or 1)

    if q.op_kind == "spatial":
        return {"flops": co * ci * k * k * thw, "params": co * ci * k * k}
    if q.op_kind == "temporal":
        return {"flops": co * ci * k * thw, "params": co * ci * k}
    if q.op_kind == "shift":
        return {"flops": co * ci * k * k * thw, "params": co * ci * k * k}
    if q.op_kind == "2plus1d":
        kk = k * k + k
        return {"flops": co * ci * kk * thw, "params": co * ci * kk}
    if q.op_kind == "3d":
        kt = q.kt if q.kt is not None else k
        return {"flops": co * ci * kt * k * k * thw, "params": co * ci * kt * k * k}
    if q.op_kind == "correlation":
        return {"flops": ci * k * k * thw, "params": ci * q.t * k * k}

    # tadaconv
    if q.r > ci:
        raise QueryError(f"reduction {q.r} leaves no channels for ci={ci}")
    cr = ci // q.r
    flops = (
        co * ci * k * k * thw          # shared spatial conv
        + ci * (thw + q.t)             # spatial + temporal pooling
        + ci * cr * (2 * k * q.t + 1)  # generator convs + global map
        + co * ci * k * k * q.t        # kernel calibration multiply
    )
    params = co * ci * k * k + 2 * ci * cr * k
    if q.convention == "appendixB":
        params += ci * cr
    return {"flops": flops, "params": params}


# ---------------------------------------------------------------------------
# network walking
# ---------------------------------------------------------------------------

@dataclass
class LayerCost:
    name: str
    kind: str
    ci: int | None
    co: int | None
    t: int
    h: int
    w: int
    flops: int
    params: int


@dataclass
class CostReport:
    title: str
    rows: list[LayerCost] = field(default_factory=list)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("layer,kind,Ci,Co,T,H,W,flops,params\n")
        for r in self.rows:
            ci = "" if r.ci is None else r.ci
            co = "" if r.co is None else r.co
            buf.write(f"{r.name},{r.kind},{ci},{co},{r.t},{r.h},{r.w},{r.flops},{r.params}\n")
        buf.write(f"total,,,,,,,{self.total_flops},{self.total_params}\n")
        return buf.getvalue()

    def to_text(self) -> str:
        head = ("layer", "kind", "Ci", "Co", "T", "H", "W", "flops", "params")
        body = [
            (
                r.name, r.kind,
                "" if r.ci is None else str(r.ci),
                "" if r.co is None else str(r.co),
                str(r.t), str(r.h), str(r.w), f"{r.flops:,}", f"{r.params:,}",
            )
            for r in self.rows
        ]
        body.append(("total", "", "", "", "", "", "", f"{self.total_flops:,}", f"{self.total_params:,}"))
        widths = [max(len(head[i]), *(len(row[i]) for row in body)) for i in range(len(head))]
        lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(head))]
        lines += ["  ".join(c.ljust(widths[i]) for i, c in enumerate(row)) for row in body]
        lines.append(
            f"{self.title}: {self.total_flops / 1e9:.4f} GFLOPs (MACs), "
            f"{self.total_params / 1e6:.3f} M params"
        )
        return "\n".join(lines)

    def compare(self, baseline: "CostReport") -> "CostDelta":
        base_rows = {r.name: r for r in baseline.rows}
        per_layer = []
        for r in self.rows:
            b = base_rows.get(r.name)
            if b is not None:
                per_layer.append((r.name, r.flops - b.flops, r.params - b.params))
        df = self.total_flops - baseline.total_flops
        dp = self.total_params - baseline.total_params
        return CostDelta(
            title=f"{self.title} vs {baseline.title}",
            flops_delta=df,
            params_delta=dp,
            flops_pct=100.0 * df / baseline.total_flops,
            params_pct=100.0 * dp / baseline.total_params,
            per_layer=per_layer,
        )


@dataclass
class CostDelta:
    title: str
    flops_delta: int
    params_delta: int
    flops_pct: float
    params_pct: float
    per_layer: list[tuple[str, int, int]] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"{self.title}:",
            f"  flops  {self.flops_delta:+,} ({self.flops_pct:+.2f}%)",
            f"  params {self.params_delta:+,} ({self.params_pct:+.2f}%)",
        ]
        changed = [(n, f, p) for n, f, p in self.per_layer if f or p]
        if changed:
            lines.append("  changed layers:")
            lines += [f"    {n}: flops {f:+,}, params {p:+,}" for n, f, p in changed]
        return "\n".join(lines)


def generator_cost(ci: int, co: int, k_spatial: int, cfg: TAdaConvConfig, frames: int,
                   convention: str = "table1") -> dict:
    """MACs and params of one calibration generator as the builder creates it."""
    if convention not in CONVENTIONS:
        raise QueryError(f"unknown convention {convention!r}")
    heads = _head_widths(cfg, ci, co, k_spatial)
    steps = frames if cfg.temporally_varying else 1
    flops = 0
    params = 0
    if cfg.calibration_mode == "dynamic":
        if cfg.generator == "nonlinear":
            cr = ci // cfg.reduction
            flops += cfg.k1 * ci * cr * steps
            params += ci * cr * cfg.k1 + 2 * cr  # trunk conv + its batchnorm
            for width in heads.values():
                flops += cfg.k2 * cr * width * steps
                params += cr * width * cfg.k2
        else:
            for width in heads.values():
                flops += cfg.k1 * ci * width * steps
                params += ci * width * cfg.k1
        if cfg.use_global:
            if convention == "table1":
                flops += ci * ci  # C->C linear map, once per clip
                params += ci * ci
            else:
                cr = max(ci // cfg.reduction, 1)
                flops += ci * cr
                params += ci * cr
    elif cfg.calibration_mode == "learnable":
        params += sum(width * steps for width in heads.values())
    return {"flops": flops, "params": params}


def _conv_layer(name, kind, ci, co, t, h, w, kernel_macs) -> LayerCost:
    # params: conv weight + the batchnorm affine pair that follows it
    return LayerCost(name, kind, ci, co, t, h, w, flops=co * ci * kernel_macs * t * h * w,
                     params=co * ci * kernel_macs + 2 * co)


def net_cost(spec: NetSpec, cfg: TAdaConvConfig | None = None,
             convention: str = "table1") -> CostReport:
    """Layer-by-layer cost of a NetSpec under the profiler convention.

    Batchnorm/ReLU/pooling and the elementwise kernel multiply are zero-FLOP;
    parameter counts include batchnorm affine pairs and equal the built
    model's enumeration exactly (under the default convention).
    """
    if convention not in CONVENTIONS:
        raise QueryError(f"unknown convention {convention!r}")
    cfg = cfg if cfg is not None else TAdaConvConfig()
    report = CostReport(title=f"{spec.name} @ {spec.frames}x{spec.height}x{spec.width}")
    t = spec.frames

    sk, skt = spec.stem_kernel, spec.stem_temporal_kernel
    h1 = (spec.height + 2 * ((sk - 1) // 2) - sk) // spec.stem_stride + 1
    w1 = (spec.width + 2 * ((sk - 1) // 2) - sk) // spec.stem_stride + 1
    report.rows.append(
        _conv_layer("stem", "3d" if skt > 1 else "spatial", spec.in_channels, spec.stem_width,
                    t, h1, w1, sk * sk * skt)
    )

    for g in walk_blocks(spec):
        tag = f"res{g.stage + 2}.b{g.block}"
        report.rows.append(_conv_layer(f"{tag}.reduce", "spatial", g.cin, g.mid, t, g.h_in, g.w_in, 1))
        if g.conv_kind == "spatial":
            report.rows.append(
                _conv_layer(f"{tag}.middle", "spatial", g.mid, g.mid, t, g.h_out, g.w_out, 9)
            )
        elif g.conv_kind == "tada":
            row = _conv_layer(f"{tag}.middle", "tadaconv", g.mid, g.mid, t, g.h_out, g.w_out, 9)
            gen = generator_cost(g.mid, g.mid, 3, cfg, t, convention)
            row.flops += gen["flops"]
            row.params += gen["params"] + 2 * g.mid  # pooled-branch batchnorm
            report.rows.append(row)
        elif g.conv_kind == "2plus1d":
            report.rows.append(
                _conv_layer(f"{tag}.middle", "spatial", g.mid, g.mid, t, g.h_out, g.w_out, 9)
            )
            report.rows.append(
                _conv_layer(f"{tag}.middle_t", "temporal", g.mid, g.mid, t, g.h_out, g.w_out, 3)
            )
        else:  # 3d
            report.rows.append(
                _conv_layer(f"{tag}.middle", "3d", g.mid, g.mid, t, g.h_out, g.w_out, 27)
            )
        report.rows.append(_conv_layer(f"{tag}.expand", "spatial", g.mid, g.cout, t, g.h_out, g.w_out, 1))
        if g.has_projection:
            report.rows.append(
                _conv_layer(f"{tag}.project", "spatial", g.cin, g.cout, t, g.h_out, g.w_out, 1)
            )

    head_in = spec.stages[-1].out
    report.rows.append(
        LayerCost("head", "linear", head_in, spec.num_classes, 1, 1, 1,
                  flops=head_in * spec.num_classes,
                  params=head_in * spec.num_classes + spec.num_classes)
    )
    return report


def op_report(q: OpCostQuery) -> CostReport:
    """Single-row report so operator queries share the table/CSV emitters."""
    c = op_cost(q)
    report = CostReport(title=f"op {q.op_kind} ({q.convention})")
    report.rows.append(
        LayerCost(q.op_kind, q.op_kind, q.ci, q.co, q.t or 1, q.h or 1, q.w or 1,
                  flops=c["flops"], params=c["params"])
    )
    return report
