"""Numeric verification utilities: finite differences, ulp distance, and
the naive-vs-vectorized kernel comparison.

These back both the test suite and the CLI check commands, so a failing
check fails the same code paths a user would run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from . import dcn
from .blocks import (
    BlockParams,
    FfnParams,
    LayerNormParams,
    PredictorParams,
    basic_block_vjp,
)
from .model import Model, ModelConfig, StackConfig, build_model, model_forward_vjp
from .tensor import Conv2dWeights, LinearWeights

DEFAULT_FD_STEP = 1e-6

# The four operator ablation rows: (shared_weights, multi_group, normalization).
TOGGLE_ROWS = (
    ("unshared", dict(shared_weights=False, multi_group=True, normalization="softmax")),
    ("single-group", dict(shared_weights=True, multi_group=False, normalization="softmax")),
    ("sigmoid", dict(shared_weights=True, multi_group=True, normalization="sigmoid")),
    ("default", dict(shared_weights=True, multi_group=True, normalization="softmax")),
)


# ---------------------------------------------------------------------------
# ulp distance
# ---------------------------------------------------------------------------

def _lexicographic_bits(x: np.ndarray) -> np.ndarray:
    # IEEE-754 bit patterns of negative doubles descend as the value grows;
    # fold them so the int64 image is monotone in the float ordering.
    bits = x.view(np.int64)
    return np.where(bits < 0, np.int64(-(2**62)) * 2 - bits, bits)


def ulp_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Number of representable-double steps between paired finite elements."""
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    b = np.ascontiguousarray(np.asarray(b, dtype=np.float64))
    ia = _lexicographic_bits(a)
    ib = _lexicographic_bits(b)
    return np.abs(ia - ib).astype(np.uint64)


# ---------------------------------------------------------------------------
# finite-difference gradient checks
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    coords_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def central_difference(
    f: Callable[[], float], array: np.ndarray, coords: Sequence[tuple], step: float
) -> np.ndarray:
    """Central finite differences of ``f`` w.r.t. selected entries of ``array``.

    ``f`` must read the array by reference; entries are perturbed in place
    and restored.
    """
    grads = np.empty(len(coords))
    for idx, coord in enumerate(coords):
        orig = array[coord]
        array[coord] = orig + step
        fp = f()
        array[coord] = orig - step
        fm = f()
        array[coord] = orig
        grads[idx] = (fp - fm) / (2.0 * step)
    return grads


def sample_coords(rng: np.random.Generator, shape: tuple, limit: int) -> list[tuple]:
    total = int(np.prod(shape))
    take = min(limit, total)
    flat = rng.choice(total, size=take, replace=False)
    return [tuple(int(q) for q in np.unravel_index(ix, shape)) for ix in sorted(flat)]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst absolute deviation scaled by the gradient magnitude.

    The scale floor keeps the metric meaningful when a class's gradients
    are all small without letting finite-difference noise dominate.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-3)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_dcn_gradients(
    seed: int = 0,
    cfg: dcn.DcnConfig | None = None,
    shape: tuple = (2, 8, 7, 7),
    step: float = DEFAULT_FD_STEP,
    tolerance: float = 1e-5,
    coords_per_tensor: int = 120,
) -> list[GradCheckResult]:
    """Compare the operator's analytic gradients with central differences.

    Offsets are drawn from U(0.1, 0.4) so every sampling position sits
    strictly between lattice points, away from the bilinear kinks.
    """
    rng = np.random.default_rng(seed)
    if cfg is None:
        cfg = dcn.DcnConfig(channels=shape[1], groups=2)
    n, c, h, w_ = shape
    ho, wo = dcn.dcn_output_hw(h, w_, cfg)
    k, g = cfg.num_points, cfg.groups
    x = rng.standard_normal((n, c, h, w_))
    offsets = rng.uniform(0.1, 0.4, (n, 2 * k * g, ho, wo))
    logits = rng.standard_normal((n, k * g, ho, wo))
    if cfg.shared_weights:
        weights = dcn.DcnWeights(
            proj=LinearWeights(rng.standard_normal((c, c)), rng.standard_normal(c))
        )
        proj_arrays = {"proj": weights.proj.matrix, "proj_bias": weights.proj.bias}
    else:
        weights = dcn.DcnWeights(per_point=rng.standard_normal((k, c, c)))
        proj_arrays = {"proj": weights.per_point}
    upstream = rng.standard_normal((n, c, ho, wo))

    def run() -> float:
        field = dcn.SamplingField(offsets, logits)
        y = dcn.dcnv3_forward(x, field, weights, cfg)
        return float(np.sum(upstream * y))

    grads = dcn.dcnv3_backward(upstream, x, dcn.SamplingField(offsets, logits), weights, cfg)
    analytic = {
        "x": grads.x,
        "offsets": grads.offsets,
        "mask_logits": grads.mask_logits,
        "proj": grads.proj,
    }
    arrays = {"x": x, "offsets": offsets, "mask_logits": logits, "proj": proj_arrays["proj"]}
    if grads.proj_bias is not None:
        analytic["proj_bias"] = grads.proj_bias
        arrays["proj_bias"] = proj_arrays["proj_bias"]

    results = []
    for name, arr in arrays.items():
        coords = sample_coords(rng, arr.shape, coords_per_tensor)
        numeric = central_difference(run, arr, coords, step)
        got = np.array([analytic[name][cd] for cd in coords])
        results.append(
            GradCheckResult(
                name=f"dcn.{name}",
                max_rel_error=relative_error(got, numeric),
                tolerance=tolerance,
                coords_checked=len(coords),
            )
        )
    return results


def make_random_block(
    rng: np.random.Generator,
    channels: int = 16,
    groups: int = 4,
    shared_weights: bool = True,
    multi_group: bool = True,
    normalization: str = "softmax",
    ffn_ratio: int = 2,
    layer_scale: bool = True,
) -> BlockParams:
    """A fully randomized block for gradient checking.

    Unlike the zero predictor used at init time, the predictor here is
    random with offset biases in U(0.1, 0.4): sampling positions land off
    the integer lattice, where bilinear interpolation is differentiable.
    """
    cfg = dcn.DcnConfig(
        channels=channels,
        groups=groups if multi_group else 1,
        shared_weights=shared_weights,
        multi_group=multi_group,
        normalization=normalization,
    )
    c = channels
    k = cfg.num_points
    kg = k * cfg.groups
    if shared_weights:
        weights = dcn.DcnWeights(
            proj=LinearWeights(rng.standard_normal((c, c)) / np.sqrt(c), rng.standard_normal(c) * 0.1)
        )
    else:
        weights = dcn.DcnWeights(per_point=rng.standard_normal((k, c, c)) / np.sqrt(c * k))
    lin_bias = np.concatenate([rng.uniform(0.1, 0.4, 2 * kg), rng.uniform(-0.5, 0.5, kg)])
    predictor = PredictorParams(
        dw=Conv2dWeights(
            rng.uniform(-0.3, 0.3, (c, 1, 3, 3)), rng.uniform(-0.1, 0.1, c),
            stride=1, padding=1, groups=c,
        ),
        lin=LinearWeights(rng.uniform(-0.1, 0.1, (3 * kg, c)), lin_bias),
    )
    hidden = ffn_ratio * c
    ffn = FfnParams(
        LinearWeights(rng.standard_normal((hidden, c)) / np.sqrt(c), rng.standard_normal(hidden) * 0.1),
        LinearWeights(rng.standard_normal((c, hidden)) / np.sqrt(hidden), rng.standard_normal(c) * 0.1),
    )
    return BlockParams(
        cfg=cfg,
        dcn=weights,
        predictor=predictor,
        ln1=LayerNormParams(rng.uniform(0.8, 1.2, c), rng.uniform(-0.2, 0.2, c)),
        ln2=LayerNormParams(rng.uniform(0.8, 1.2, c), rng.uniform(-0.2, 0.2, c)),
        ffn=ffn,
        scale1=rng.uniform(0.5, 1.5, c) if layer_scale else None,
        scale2=rng.uniform(0.5, 1.5, c) if layer_scale else None,
    )


def check_block_gradients(
    seed: int = 0,
    shared_weights: bool = True,
    multi_group: bool = True,
    normalization: str = "softmax",
    shape: tuple = (1, 16, 7, 7),
    step: float = DEFAULT_FD_STEP,
    tolerance: float = 1e-5,
    coords_per_tensor: int = 25,
) -> list[GradCheckResult]:
    """Finite-difference check of the full block pullback, per tensor."""
    rng = np.random.default_rng(seed)
    n, c, h, w_ = shape
    blk = make_random_block(
        rng, channels=c, groups=max(1, c // 4),
        shared_weights=shared_weights, multi_group=multi_group, normalization=normalization,
    )
    x = rng.standard_normal(shape)
    upstream = rng.standard_normal(shape)

    def run() -> float:
        return float(np.sum(upstream * basic_block_vjp(x, blk)[0]))

    _, pull = basic_block_vjp(x, blk)
    gx, grads = pull(upstream)
    targets = [("x", x, gx)] + [(name, arr, grads[name]) for name, arr in blk.named_params()]
    results = []
    for name, arr, analytic in targets:
        coords = sample_coords(rng, arr.shape, coords_per_tensor)
        numeric = central_difference(run, arr, coords, step)
        got = np.array([analytic[cd] for cd in coords])
        results.append(
            GradCheckResult(
                name=f"block.{name}",
                max_rel_error=relative_error(got, numeric),
                tolerance=tolerance,
                coords_checked=len(coords),
            )
        )
    return results


def randomize_predictors(model: Model, rng: np.random.Generator) -> None:
    """Move every predictor off its zero init so offsets avoid the lattice."""
    for stage in model.stages:
        for blk in stage.blocks:
            p = blk.predictor
            kg = blk.cfg.num_points * blk.cfg.groups
            p.dw.kernel[...] = rng.uniform(-0.2, 0.2, p.dw.kernel.shape)
            p.dw.bias[...] = rng.uniform(-0.05, 0.05, p.dw.bias.shape)
            p.lin.matrix[...] = rng.uniform(-0.1, 0.1, p.lin.matrix.shape) / np.sqrt(
                blk.cfg.channels
            )
            p.lin.bias[: 2 * kg] = rng.uniform(0.1, 0.4, 2 * kg)
            p.lin.bias[2 * kg :] = rng.uniform(-0.5, 0.5, kg)


def check_model_gradients(
    seed: int = 0,
    shared_weights: bool = True,
    multi_group: bool = True,
    normalization: str = "softmax",
    step: float = DEFAULT_FD_STEP,
    tolerance: float = 1e-4,
    n_params: int = 20,
) -> GradCheckResult:
    """Finite-difference check of a tiny end-to-end model on sampled weights."""
    rng = np.random.default_rng(seed)
    config = ModelConfig("gradcheck", StackConfig(16, 16, 1, 1), num_classes=10, seed=seed)
    model = build_model(
        config,
        shared_weights=shared_weights,
        multi_group=multi_group,
        normalization=normalization,
    )
    randomize_predictors(model, rng)
    x = rng.standard_normal((1, 3, 32, 32))
    params = list(model.named_params())
    sizes = np.array([arr.size for _, arr in params])
    projection = rng.standard_normal((1, config.num_classes))

    def run() -> float:
        logits, _, _ = model_forward_vjp(model, x)
        return float(np.sum(projection * logits))

    logits, _, pull = model_forward_vjp(model, x)
    _, grads = pull(projection)

    picks = rng.choice(int(sizes.sum()), size=n_params, replace=False)
    analytic = np.empty(n_params)
    numeric = np.empty(n_params)
    bounds = np.cumsum(sizes)
    for i, flat in enumerate(sorted(int(p) for p in picks)):
        t = int(np.searchsorted(bounds, flat, side="right"))
        name, arr = params[t]
        local = flat - (bounds[t - 1] if t else 0)
        coord = tuple(int(q) for q in np.unravel_index(local, arr.shape))
        analytic[i] = grads[name][coord]
        numeric[i] = central_difference(run, arr, [coord], step)[0]
    return GradCheckResult(
        name="model.params",
        max_rel_error=relative_error(analytic, numeric),
        tolerance=tolerance,
        coords_checked=n_params,
    )


# ---------------------------------------------------------------------------
# naive-vs-vectorized oracle trials
# ---------------------------------------------------------------------------

@dataclass
class OracleReport:
    trials: int
    max_ulp: int
    max_abs: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_ulp <= 4


def run_oracle_trials(seed: int = 0, trials: int = 100, mode: str = "dcnv3") -> OracleReport:
    """Run random small instances through both kernels and compare per element.

    ``mode`` selects the v3 operator (random toggles per trial) or the v2
    reference (per-point weights, sigmoid, single group).
    """
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst_ulp = 0
    worst_abs = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 3))
        h = int(rng.integers(5, 8))
        w_ = int(rng.integers(5, 8))
        if mode == "dcnv2":
            cp = int(rng.choice([2, 4, 8]))
            cfg = dcn.dcnv2_config(channels=cp)
            c = cp
        else:
            g = int(rng.choice([1, 2]))
            cp = int(rng.choice([2, 4]))
            c = g * cp
            cfg = dcn.DcnConfig(
                channels=c,
                groups=g,
                shared_weights=bool(rng.integers(0, 2)),
                normalization=str(rng.choice(["softmax", "sigmoid"])),
            )
        ho, wo = dcn.dcn_output_hw(h, w_, cfg)
        k, g = cfg.num_points, cfg.groups
        x = rng.standard_normal((n, c, h, w_))
        field = dcn.SamplingField(
            rng.uniform(-2.0, 2.0, (n, 2 * k * g, ho, wo)),
            rng.standard_normal((n, k * g, ho, wo)),
        )
        if cfg.shared_weights:
            bias = rng.standard_normal(c) if rng.integers(0, 2) else None
            weights = dcn.DcnWeights(proj=LinearWeights(rng.standard_normal((c, c)), bias))
        else:
            weights = dcn.DcnWeights(per_point=rng.standard_normal((k, c, c)))
        if mode == "dcnv2":
            fast = dcn.dcnv2_forward(x, field, weights, cfg)
        else:
            fast = dcn.dcnv3_forward(x, field, weights, cfg)
        slow = dcn.dcnv3_naive_forward(x, field, weights, cfg)
        worst_ulp = max(worst_ulp, int(ulp_distance(fast, slow).max()))
        worst_abs = max(worst_abs, float(np.abs(fast - slow).max()))
    return OracleReport(
        trials=trials,
        max_ulp=worst_ulp,
        max_abs=worst_abs,
        seconds=time.perf_counter() - t0,
    )
