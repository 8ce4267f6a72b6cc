"""Backbone assembly: stacking rules, the variant registry, closed-form
parameter counting, deterministic construction, and the full forward pass.

A variant is fixed by four numbers (C1, C', L1, L3): stage channels double
each stage from C1, group counts are channels divided by the group
dimension C', and depths follow the AABA pattern (stages 1, 2 and 4 share
L1, stage 3 uses L3 >= L1).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Iterator, Optional

import numpy as np

from .blocks import (
    BlockParams,
    DownsampleParams,
    FfnParams,
    HeadParams,
    LayerNormParams,
    PredictorParams,
    StageParams,
    StemParams,
    basic_block_vjp,
    downsample_vjp,
    head_vjp,
    stem_vjp,
)
from .dcn import DcnConfig, DcnWeights
from .errors import ConfigError, ShapeError
from .tensor import Conv2dWeights, LinearWeights, Tensor4, as_tensor4

NUM_STAGES = 4
STEM_REDUCTION = 4
TOTAL_REDUCTION = 32
LAYER_SCALE_INIT = 1e-5


@dataclass(frozen=True)
class StackConfig:
    """The four stacking hyperparameters plus derived per-stage values."""

    c1: int
    cprime: int
    l1: int
    l3: int

    @property
    def channels(self) -> tuple[int, int, int, int]:
        return tuple(self.c1 * (1 << i) for i in range(NUM_STAGES))

    @property
    def groups(self) -> tuple[int, int, int, int]:
        return tuple(c // self.cprime for c in self.channels)

    @property
    def depths(self) -> tuple[int, int, int, int]:
        return (self.l1, self.l1, self.l3, self.l1)

    @property
    def depth(self) -> int:
        """Composite depth 3*L1 + L3 used by the scaling rules."""
        return 3 * self.l1 + self.l3


def validate_stack(cfg: StackConfig) -> list[str]:
    """Return every violated stacking rule by name; empty means valid."""
    violations = []
    if cfg.c1 < 1 or cfg.cprime < 1 or cfg.l1 < 1 or cfg.l3 < 1:
        violations.append(f"positive: all of (C1={cfg.c1}, C'={cfg.cprime}, L1={cfg.l1}, L3={cfg.l3}) must be >= 1")
        return violations
    if cfg.l1 > cfg.l3:
        violations.append(f"L1 <= L3 violated: L1={cfg.l1} > L3={cfg.l3}")
    for i, c in enumerate(cfg.channels, start=1):
        if c % cfg.cprime != 0:
            violations.append(
                f"C{i} divisible by C' violated: C{i}={c}, C'={cfg.cprime} "
                f"(G{i}={c / cfg.cprime:g})"
            )
    return violations


@dataclass(frozen=True)
class VariantSpec:
    name: str
    stack: StackConfig
    expected_params_m: float  # published target, in millions
    layer_scale: bool


_REGISTRY = (
    VariantSpec("T", StackConfig(64, 16, 4, 18), 30.0, False),
    VariantSpec("S", StackConfig(80, 16, 4, 21), 50.0, True),
    VariantSpec("B", StackConfig(112, 16, 4, 21), 97.0, True),
    VariantSpec("L", StackConfig(160, 16, 5, 22), 223.0, True),
    VariantSpec("XL", StackConfig(192, 16, 5, 24), 335.0, True),
    VariantSpec("H", StackConfig(320, 32, 6, 32), 1080.0, True),
)


def variant_registry() -> dict[str, VariantSpec]:
    """The six published scale variants, smallest to largest."""
    return {v.name: v for v in _REGISTRY}


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------

@dataclass
class ParamReport:
    stem: int
    stage_blocks: tuple[int, int, int, int]
    downsamplers: tuple[int, int, int]
    head: int
    closed_form_total: int
    enumerated_total: Optional[int] = None

    def lines(self) -> list[str]:
        out = [f"stem            {self.stem:>14,}"]
        for i, p in enumerate(self.stage_blocks, start=1):
            out.append(f"stage {i} blocks  {p:>14,}")
        for i, p in enumerate(self.downsamplers, start=1):
            out.append(f"downsample {i}->{i + 1} {p:>13,}")
        out.append(f"head            {self.head:>14,}")
        out.append(f"closed-form     {self.closed_form_total:>14,}")
        if self.enumerated_total is not None:
            match = "exact match" if self.enumerated_total == self.closed_form_total else "MISMATCH"
            out.append(f"enumerated      {self.enumerated_total:>14,}  ({match})")
        return out


def _block_param_count(c: int, g: int, kernel: int, ffn_ratio: int, layer_scale: bool) -> int:
    k = kernel * kernel
    proj = c * c + c
    predictor = (kernel * kernel * c + c) + (c * 3 * k * g + 3 * k * g)
    norms = 4 * c
    hidden = ffn_ratio * c
    ffn = c * hidden + hidden + hidden * c + c
    scales = 2 * c if layer_scale else 0
    return proj + predictor + norms + ffn + scales


def count_params(
    stack: StackConfig,
    ffn_ratio: int = 4,
    num_classes: int = 1000,
    layer_scale: bool = False,
    kernel: int = 3,
) -> ParamReport:
    """Closed-form parameter count with a per-component breakdown.

    Matches exactly what ``build_model`` materializes; the test suite
    cross-checks against enumeration of assembled weights.
    """
    violations = validate_stack(stack)
    if violations:
        raise ConfigError("invalid stack: " + "; ".join(violations))
    if stack.c1 % 2 != 0:
        raise ConfigError(f"C1 must be even for the stem split, got {stack.c1}")
    chans = stack.channels
    grps = stack.groups
    depths = stack.depths
    half = stack.c1 // 2
    stem_n = (3 * half * 9 + half) + 2 * half + (half * stack.c1 * 9 + stack.c1) + 2 * stack.c1
    stage_totals = tuple(
        depths[i] * _block_param_count(chans[i], grps[i], kernel, ffn_ratio, layer_scale)
        for i in range(NUM_STAGES)
    )
    downs = tuple(
        9 * chans[i] * chans[i + 1] + chans[i + 1] + 2 * chans[i + 1]
        for i in range(NUM_STAGES - 1)
    )
    head_n = chans[-1] * num_classes + num_classes
    total = stem_n + sum(stage_totals) + sum(downs) + head_n
    return ParamReport(
        stem=stem_n,
        stage_blocks=stage_totals,
        downsamplers=downs,
        head=head_n,
        closed_form_total=total,
    )


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------

@dataclass
class ModelConfig:
    name: str
    stack: StackConfig
    ffn_ratio: int = 4
    layer_scale: bool = False
    num_classes: int = 1000
    seed: int = 0


@dataclass
class Model:
    config: ModelConfig
    stem: StemParams
    stages: list
    head: HeadParams

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, arr in self.stem.named_params():
            yield f"stem.{name}", arr
        for si, stage in enumerate(self.stages):
            for name, arr in stage.named_params():
                yield f"stages.{si}.{name}", arr
        for name, arr in self.head.named_params():
            yield f"head.{name}", arr

    def param_count(self) -> int:
        return sum(arr.size for _, arr in self.named_params())


def _uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def _init_linear(rng: np.random.Generator, out_dim: int, in_dim: int) -> LinearWeights:
    return LinearWeights(_uniform_fan_in(rng, (out_dim, in_dim), in_dim), np.zeros(out_dim))


def _init_conv(
    rng: np.random.Generator, out_c: int, in_c: int, kernel: int, stride: int, padding: int,
    groups: int = 1,
) -> Conv2dWeights:
    cpg = in_c // groups
    fan_in = cpg * kernel * kernel
    return Conv2dWeights(
        _uniform_fan_in(rng, (out_c, cpg, kernel, kernel), fan_in),
        np.zeros(out_c),
        stride=stride,
        padding=padding,
        groups=groups,
    )


def _init_ln(c: int) -> LayerNormParams:
    return LayerNormParams(np.ones(c), np.zeros(c))


def _init_block(
    rng: np.random.Generator,
    c: int,
    g: int,
    kernel: int,
    ffn_ratio: int,
    layer_scale: bool,
    shared_weights: bool,
    multi_group: bool,
    normalization: str,
) -> BlockParams:
    cfg = DcnConfig(
        channels=c,
        groups=g if multi_group else 1,
        kernel=kernel,
        stride=1,
        pad=(kernel - 1) // 2,
        shared_weights=shared_weights,
        multi_group=multi_group,
        normalization=normalization,
    )
    k = cfg.num_points
    if shared_weights:
        dcn_w = DcnWeights(proj=_init_linear(rng, c, c))
    else:
        dcn_w = DcnWeights(per_point=_uniform_fan_in(rng, (k, c, c), c))
    # zero-initialized predictor: first forward uses zero offsets / uniform masks
    predictor = PredictorParams(
        dw=Conv2dWeights(
            np.zeros((c, 1, kernel, kernel)), np.zeros(c),
            stride=1, padding=(kernel - 1) // 2, groups=c,
        ),
        lin=LinearWeights(np.zeros((3 * k * cfg.groups, c)), np.zeros(3 * k * cfg.groups)),
    )
    hidden = ffn_ratio * c
    ffn = FfnParams(_init_linear(rng, hidden, c), _init_linear(rng, c, hidden))
    scale1 = np.full(c, LAYER_SCALE_INIT) if layer_scale else None
    scale2 = np.full(c, LAYER_SCALE_INIT) if layer_scale else None
    return BlockParams(
        cfg=cfg, dcn=dcn_w, predictor=predictor,
        ln1=_init_ln(c), ln2=_init_ln(c), ffn=ffn, scale1=scale1, scale2=scale2,
    )


def build_model(
    config: ModelConfig,
    in_channels: int = 3,
    kernel: int = 3,
    shared_weights: bool = True,
    multi_group: bool = True,
    normalization: str = "softmax",
) -> Model:
    """Assemble a model deterministically from its config seed.

    Projections and convolutions draw scaled-uniform fan-in weights from
    one PCG64 stream in construction order; predictors start at zero, so
    the first forward pass of every block is the degenerate grid case.
    """
    stack = config.stack
    violations = validate_stack(stack)
    if violations:
        raise ConfigError("invalid stack: " + "; ".join(violations))
    if stack.c1 % 2 != 0:
        raise ConfigError(f"C1 must be even for the stem split, got {stack.c1}")
    rng = np.random.default_rng(config.seed)
    chans = stack.channels
    grps = stack.groups
    depths = stack.depths
    half = stack.c1 // 2
    stem_p = StemParams(
        conv1=_init_conv(rng, half, in_channels, 3, stride=2, padding=1),
        ln1=_init_ln(half),
        conv2=_init_conv(rng, stack.c1, half, 3, stride=2, padding=1),
        ln2=_init_ln(stack.c1),
    )
    stages = []
    for i in range(NUM_STAGES):
        blocks = [
            _init_block(
                rng, chans[i], grps[i], kernel, config.ffn_ratio, config.layer_scale,
                shared_weights, multi_group, normalization,
            )
            for _ in range(depths[i])
        ]
        down = None
        if i + 1 < NUM_STAGES:
            down = DownsampleParams(
                conv=_init_conv(rng, chans[i + 1], chans[i], 3, stride=2, padding=1),
                ln=_init_ln(chans[i + 1]),
            )
        stages.append(StageParams(blocks=blocks, down=down))
    head_p = HeadParams(fc=_init_linear(rng, config.num_classes, chans[-1]))
    return Model(config=config, stem=stem_p, stages=stages, head=head_p)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _check_input(model: Model, x: Tensor4) -> Tensor4:
    x = as_tensor4(x, "model input")
    n, c, h, w = x.shape
    expect_c = model.stem.conv1.in_channels
    if c != expect_c:
        raise ShapeError(f"model input has {c} channels, stem expects {expect_c}")
    if h < TOTAL_REDUCTION or w < TOTAL_REDUCTION or h % TOTAL_REDUCTION or w % TOTAL_REDUCTION:
        raise ShapeError(
            f"input spatial dims must be >= {TOTAL_REDUCTION} and divisible by "
            f"{TOTAL_REDUCTION}, got {h}x{w}"
        )
    return x


def model_forward(model: Model, x: Tensor4, want_features: bool = False):
    """Full forward pass; optionally also return the four stage outputs."""
    x = _check_input(model, x)
    h = stem_vjp(x, model.stem)[0]
    features = []
    for stage in model.stages:
        for blk in stage.blocks:
            h = basic_block_vjp(h, blk)[0]
        features.append(h)
        if stage.down is not None:
            h = downsample_vjp(h, stage.down)[0]
    logits = head_vjp(h, model.head)[0]
    if want_features:
        return logits, features
    return logits


def model_forward_vjp(model: Model, x: Tensor4):
    """Forward returning ``(logits, features, pullback)``.

    ``pullback(grad_logits)`` yields ``(grad_x, grads)`` with grads keyed
    by the ``named_params`` paths.
    """
    x = _check_input(model, x)
    pulls = []
    h, pull = stem_vjp(x, model.stem)
    pulls.append(("stem", pull))
    features = []
    for si, stage in enumerate(model.stages):
        for bi, blk in enumerate(stage.blocks):
            h, pull = basic_block_vjp(h, blk)
            pulls.append((f"stages.{si}.blocks.{bi}", pull))
        features.append(h)
        if stage.down is not None:
            h, pull = downsample_vjp(h, stage.down)
            pulls.append((f"stages.{si}.down", pull))
    logits, pull_head = head_vjp(h, model.head)

    def pullback(g_logits: np.ndarray):
        grads: dict[str, np.ndarray] = {}
        g, head_grads = pull_head(g_logits)
        grads.update({f"head.{k}": v for k, v in head_grads.items()})
        for prefix, pull in reversed(pulls):
            g, local = pull(g)
            grads.update({f"{prefix}.{k}": v for k, v in local.items()})
        return g, grads

    return logits, features, pullback


def forward_to_stage(model: Model, x: Tensor4, stage: int):
    """Forward truncated after the stem (stage 0) or after stage ``stage``'s
    blocks; returns ``(feature, pullback_to_input)``.
    """
    if stage < 0 or stage > NUM_STAGES:
        raise ConfigError(f"stage must be in [0, {NUM_STAGES}], got {stage}")
    x = _check_input(model, x)
    pulls = []
    h, pull = stem_vjp(x, model.stem)
    pulls.append(pull)
    for si in range(stage):
        st = model.stages[si]
        for blk in st.blocks:
            h, pull = basic_block_vjp(h, blk)
            pulls.append(pull)
        if si + 1 < stage:
            if st.down is None:
                raise ConfigError(f"stage {si + 1} has no downsample layer")
            h, pull = downsample_vjp(h, st.down)
            pulls.append(pull)

    def pullback_to_input(g: Tensor4) -> Tensor4:
        for pull in reversed(pulls):
            out = pull(g)
            g = out[0] if isinstance(out, tuple) else out
        return g

    return h, pullback_to_input


def apply_gradients(model: Model, grads: dict[str, np.ndarray], lr: float) -> None:
    """Plain SGD step, in place; single-threaded between forward passes."""
    for name, arr in model.named_params():
        g = grads.get(name)
        if g is not None:
            arr -= lr * g
