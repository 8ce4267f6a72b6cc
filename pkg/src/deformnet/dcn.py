"""Deformable-convolution kernels (v3 and the v2 reference) on the CPU.

The operator samples each input group at ``K = kernel**2`` fractional
locations per output site (a fixed grid plus learned per-group offsets),
weights the samples with normalized modulation scalars, and applies one
shared channel projection (or, in the unshared variant, one projection
per sampling point).

Channel layouts are fixed and group-major:

* offsets: ``(n, 2*K*G, h, w)``, channel ``g*2K + k*2 + {0: dy, 1: dx}``,
  in pixels of the input map;
* mask logits: ``(n, K*G, h, w)``, channel ``g*K + k``;
* the grid enumerates kernel points row-major, ``(-r,-r) .. (+r,+r)``.

Two forwards are provided.  ``dcnv3_forward`` is vectorized;
``dcnv3_naive_forward`` is a literal per-site transcription with explicit
loops over groups, points and sites.  Both accumulate every output element
in exactly the same IEEE operation order, so the pair doubles as a
bit-level correctness oracle (see ``verify.run_oracle_trials``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from .tensor import LinearWeights, Tensor4, as_tensor4, softmax_axis_vjp

NORMALIZATIONS = ("softmax", "sigmoid")


@dataclass
class DcnConfig:
    """Per-layer operator hyperparameters.

    ``shared_weights``, ``multi_group`` and ``normalization`` are the three
    ablation toggles; the default triple (True, True, "softmax") is the v3
    operator.  ``multi_group=False`` forces single-group behavior with the
    group dimension equal to the full channel count.
    """

    channels: int
    groups: int = 1
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    dilation: int = 1
    shared_weights: bool = True
    multi_group: bool = True
    normalization: str = "softmax"

    def __post_init__(self) -> None:
        if not self.multi_group:
            self.groups = 1
        if self.channels < 1 or self.groups < 1:
            raise ConfigError(f"channels/groups must be positive, got {self.channels}/{self.groups}")
        if self.channels % self.groups != 0:
            raise ConfigError(f"channels {self.channels} not divisible by groups {self.groups}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel side must be odd, got {self.kernel}")
        if self.stride < 1 or self.pad < 0 or self.dilation < 1:
            raise ConfigError(
                f"stride/pad/dilation out of range: {self.stride}/{self.pad}/{self.dilation}"
            )
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {NORMALIZATIONS}")

    @property
    def group_dim(self) -> int:
        return self.channels // self.groups

    @property
    def num_points(self) -> int:
        return self.kernel * self.kernel


@dataclass
class DcnWeights:
    """Projection weights; exactly one of ``proj``/``per_point`` is active.

    ``proj`` is the shared (channels x channels) map, the per-group blocks
    laid side by side.  ``per_point`` is a (K, channels, channels) stack for
    the unshared ablation.
    """

    proj: Optional[LinearWeights] = None
    per_point: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.per_point is not None:
            self.per_point = np.ascontiguousarray(np.asarray(self.per_point, dtype=np.float64))
            if self.per_point.ndim != 3 or self.per_point.shape[1] != self.per_point.shape[2]:
                raise ShapeError(
                    f"per_point weights must be (K, C, C), got {self.per_point.shape}"
                )
        if (self.proj is None) == (self.per_point is None):
            raise ConfigError("exactly one of proj/per_point must be set")

    def param_count(self) -> int:
        if self.proj is not None:
            return self.proj.param_count()
        return self.per_point.size


@dataclass
class SamplingField:
    """Learned offsets and pre-normalization modulation logits."""

    offsets: Tensor4  # (n, 2*K*G, h, w)
    mask_logits: Tensor4  # (n, K*G, h, w)

    def __post_init__(self) -> None:
        self.offsets = as_tensor4(self.offsets, "offsets")
        self.mask_logits = as_tensor4(self.mask_logits, "mask_logits")


@dataclass
class DcnGrads:
    x: Tensor4
    offsets: Tensor4
    mask_logits: Tensor4
    proj: np.ndarray  # (C, C) shared or (K, C, C) per-point
    proj_bias: Optional[np.ndarray] = None


def grid_points(kernel: int) -> list[tuple[int, int]]:
    """Row-major kernel grid as (u, v) window coordinates in [0, kernel)."""
    return [(u, v) for u in range(kernel) for v in range(kernel)]


def dcn_output_hw(h: int, w: int, cfg: DcnConfig) -> tuple[int, int]:
    span = cfg.dilation * (cfg.kernel - 1) + 1
    ho = (h + 2 * cfg.pad - span) // cfg.stride + 1
    wo = (w + 2 * cfg.pad - span) // cfg.stride + 1
    return ho, wo


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------

def bilinear_sample(map2d: np.ndarray, y: float, x: float) -> float:
    """Interpolate a 2-D map at fractional (y, x); outside cells read as 0."""
    map2d = np.asarray(map2d, dtype=np.float64)
    h, w = map2d.shape
    y0 = math.floor(y)
    x0 = math.floor(x)
    fy = y - y0
    fx = x - x0
    wy0 = 1.0 - fy
    wx0 = 1.0 - fx
    w00 = wy0 * wx0
    w01 = wy0 * fx
    w10 = fy * wx0
    w11 = fy * fx

    def at(yi: int, xi: int) -> float:
        if 0 <= yi < h and 0 <= xi < w:
            return float(map2d[yi, xi])
        return 0.0

    v00 = at(y0, x0)
    v01 = at(y0, x0 + 1)
    v10 = at(y0 + 1, x0)
    v11 = at(y0 + 1, x0 + 1)
    return w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11


def bilinear_sample_grads(map2d: np.ndarray, y: float, x: float):
    """Sample plus partials d/dy, d/dx and the four scatter weights.

    At exactly-integer coordinates the partials use the interior piecewise
    formula (the kink's right-sided branch); finite-difference checks must
    stay off the integer lattice.
    Returns ``(value, d_dy, d_dx, [(yi, xi, weight)] * 4)``.
    """
    map2d = np.asarray(map2d, dtype=np.float64)
    h, w = map2d.shape
    y0 = math.floor(y)
    x0 = math.floor(x)
    fy = y - y0
    fx = x - x0
    wy0 = 1.0 - fy
    wx0 = 1.0 - fx

    def at(yi: int, xi: int) -> float:
        if 0 <= yi < h and 0 <= xi < w:
            return float(map2d[yi, xi])
        return 0.0

    v00 = at(y0, x0)
    v01 = at(y0, x0 + 1)
    v10 = at(y0 + 1, x0)
    v11 = at(y0 + 1, x0 + 1)
    value = (wy0 * wx0) * v00 + (wy0 * fx) * v01 + (fy * wx0) * v10 + (fy * fx) * v11
    d_dy = wx0 * (v10 - v00) + fx * (v11 - v01)
    d_dx = wy0 * (v01 - v00) + fy * (v11 - v10)
    scatter = [
        (y0, x0, wy0 * wx0),
        (y0, x0 + 1, wy0 * fx),
        (y0 + 1, x0, fy * wx0),
        (y0 + 1, x0 + 1, fy * fx),
    ]
    return value, d_dy, d_dx, scatter


def _sample_channel_stack(maps: np.ndarray, y: float, x: float) -> np.ndarray:
    # maps: (c, h, w) -> (c,); same expression as bilinear_sample, vectorized
    # over the channel axis only so the naive kernel stays bit-identical.
    h, w = maps.shape[1:]
    y0 = math.floor(y)
    x0 = math.floor(x)
    fy = y - y0
    fx = x - x0
    wy0 = 1.0 - fy
    wx0 = 1.0 - fx
    w00 = wy0 * wx0
    w01 = wy0 * fx
    w10 = fy * wx0
    w11 = fy * fx

    zeros = np.zeros(maps.shape[0])

    def at(yi: int, xi: int) -> np.ndarray:
        if 0 <= yi < h and 0 <= xi < w:
            return maps[:, yi, xi]
        return zeros

    v00 = at(y0, x0)
    v01 = at(y0, x0 + 1)
    v10 = at(y0 + 1, x0)
    v11 = at(y0 + 1, x0 + 1)
    return w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11


# ---------------------------------------------------------------------------
# shared validation
# ---------------------------------------------------------------------------

def _check_instance(x: Tensor4, field: SamplingField, w: DcnWeights, cfg: DcnConfig):
    x = as_tensor4(x, "dcn input")
    n, c, h, wd = x.shape
    if c != cfg.channels:
        raise ConfigError(f"input has {c} channels, config expects {cfg.channels}")
    ho, wo = dcn_output_hw(h, wd, cfg)
    if ho < 1 or wo < 1:
        raise ShapeError(f"dcn output would be empty for input {x.shape}")
    k = cfg.num_points
    g = cfg.groups
    if field.offsets.shape != (n, 2 * k * g, ho, wo):
        raise ConfigError(
            f"offsets shape {field.offsets.shape} != expected {(n, 2 * k * g, ho, wo)}"
        )
    if field.mask_logits.shape != (n, k * g, ho, wo):
        raise ConfigError(
            f"mask_logits shape {field.mask_logits.shape} != expected {(n, k * g, ho, wo)}"
        )
    if not np.all(np.isfinite(field.offsets)):
        raise InputError("offsets contain non-finite entries")
    if not np.all(np.isfinite(field.mask_logits)):
        raise InputError("mask_logits contain non-finite entries")
    if cfg.shared_weights:
        if w.proj is None:
            raise ConfigError("shared_weights=True requires DcnWeights.proj")
        if w.proj.matrix.shape != (c, c):
            raise ConfigError(
                f"shared projection must be {(c, c)}, got {w.proj.matrix.shape}"
            )
    else:
        if w.per_point is None:
            raise ConfigError("shared_weights=False requires DcnWeights.per_point")
        if w.per_point.shape != (k, c, c):
            raise ConfigError(
                f"per-point weights must be {(k, c, c)}, got {w.per_point.shape}"
            )
    return x, ho, wo


def normalize_masks(logits: np.ndarray, cfg: DcnConfig) -> np.ndarray:
    """Normalize (n, G, K, h, w) logits along K per the configured mode."""
    if cfg.normalization == "softmax":
        return softmax_axis_vjp(logits, axis=2)[0]
    return 1.0 / (1.0 + np.exp(-logits))


# ---------------------------------------------------------------------------
# optimized forward / backward
# ---------------------------------------------------------------------------

def _gather_corners(xgm: np.ndarray, py: np.ndarray, px: np.ndarray):
    """Bilinear pieces for one kernel point over all (n, g, site).

    ``xgm`` is (n, G, H, W, C'); ``py``/``px`` are (n, G, ho, wo).  Returns a
    dict with interpolation weights, pre-zeroed corner values, clipped
    indices and validity flags (everything the backward pass reuses).
    """
    n, g, h, w, _ = xgm.shape
    y0 = np.floor(py)
    x0 = np.floor(px)
    fy = py - y0
    fx = px - x0
    y0i = y0.astype(np.int64)
    x0i = x0.astype(np.int64)
    y1i = y0i + 1
    x1i = x0i + 1
    wy0 = 1.0 - fy
    wx0 = 1.0 - fx
    nn = np.arange(n)[:, None, None, None]
    gg = np.arange(g)[None, :, None, None]

    def corner(yi, xi):
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        v = xgm[nn, gg, yc, xc]
        v = np.where(ok[..., None], v, 0.0)
        return ok, yc, xc, v

    ok00, yc00, xc00, v00 = corner(y0i, x0i)
    ok01, yc01, xc01, v01 = corner(y0i, x1i)
    ok10, yc10, xc10, v10 = corner(y1i, x0i)
    ok11, yc11, xc11, v11 = corner(y1i, x1i)
    w00 = wy0 * wx0
    w01 = wy0 * fx
    w10 = fy * wx0
    w11 = fy * fx
    value = (
        w00[..., None] * v00
        + w01[..., None] * v01
        + w10[..., None] * v10
        + w11[..., None] * v11
    )
    return {
        "value": value,
        "fy": fy, "fx": fx, "wy0": wy0, "wx0": wx0,
        "w": (w00, w01, w10, w11),
        "ok": (ok00, ok01, ok10, ok11),
        "yc": (yc00, yc01, yc10, yc11),
        "xc": (xc00, xc01, xc10, xc11),
        "v": (v00, v01, v10, v11),
    }


def _forward_pieces(x: Tensor4, field: SamplingField, w: DcnWeights, cfg: DcnConfig):
    x, ho, wo = _check_instance(x, field, w, cfg)
    n, c, h, wd = x.shape
    g, cp, k, ks = cfg.groups, cfg.group_dim, cfg.num_points, cfg.kernel
    xgm = np.ascontiguousarray(
        x.reshape(n, g, cp, h, wd).transpose(0, 1, 3, 4, 2)
    )  # (n, G, H, W, C')
    offs = field.offsets.reshape(n, g, k, 2, ho, wo)
    logits = field.mask_logits.reshape(n, g, k, ho, wo)
    m = normalize_masks(logits, cfg)

    samples = []
    for kk, (u, v) in enumerate(grid_points(ks)):
        by = (np.arange(ho) * cfg.stride - cfg.pad + u * cfg.dilation).astype(np.float64)
        bx = (np.arange(wo) * cfg.stride - cfg.pad + v * cfg.dilation).astype(np.float64)
        py = offs[:, :, kk, 0] + by[None, None, :, None]
        px = offs[:, :, kk, 1] + bx[None, None, None, :]
        samples.append(_gather_corners(xgm, py, px))

    if cfg.shared_weights:
        agg = np.zeros((n, g, ho, wo, cp))
        for kk in range(k):
            # in-place add per element, ascending k: the exact order the
            # naive kernel uses, so the oracle comparison is bitwise
            agg += m[:, :, kk][..., None] * samples[kk]["value"]
        aggc = np.ascontiguousarray(
            agg.transpose(0, 1, 4, 2, 3).reshape(n, c, ho, wo)
        )
        out = np.zeros((n, c, ho, wo))
        mat = w.proj.matrix
        for cc in range(c):
            out += mat[:, cc][None, :, None, None] * aggc[:, cc][:, None, :, :]
        if w.proj.bias is not None:
            out += w.proj.bias[None, :, None, None]
        vks = None
    else:
        agg = None
        aggc = None
        out = np.zeros((n, c, ho, wo))
        vks = []
        for kk in range(k):
            vk = m[:, :, kk][..., None] * samples[kk]["value"]
            vkc = np.ascontiguousarray(
                vk.transpose(0, 1, 4, 2, 3).reshape(n, c, ho, wo)
            )
            vks.append(vkc)
            mat = w.per_point[kk]
            for cc in range(c):
                out += mat[:, cc][None, :, None, None] * vkc[:, cc][:, None, :, :]
    state = {
        "x_shape": x.shape, "ho": ho, "wo": wo, "m": m, "logits": logits,
        "samples": samples, "agg": agg, "aggc": aggc, "vks": vks, "xgm_shape": xgm.shape,
    }
    return out, state


def dcnv3_forward(x: Tensor4, field: SamplingField, w: DcnWeights, cfg: DcnConfig) -> Tensor4:
    """Deformable aggregation, vectorized over sites and groups."""
    return _forward_pieces(x, field, w, cfg)[0]


def dcnv3_vjp(
    x: Tensor4, field: SamplingField, w: DcnWeights, cfg: DcnConfig
) -> tuple[Tensor4, Callable[[Tensor4], DcnGrads]]:
    """Forward plus a pullback producing exact analytic gradients."""
    out, st = _forward_pieces(x, field, w, cfg)
    n, c, h, wd = st["x_shape"]
    ho, wo = st["ho"], st["wo"]
    g, cp, k = cfg.groups, cfg.group_dim, cfg.num_points
    m = st["m"]
    samples = st["samples"]
    nn = np.arange(n)[:, None, None, None]
    gg = np.arange(g)[None, :, None, None]

    def pullback(gout: Tensor4) -> DcnGrads:
        gout = np.asarray(gout, dtype=np.float64)
        if gout.shape != out.shape:
            raise ShapeError(f"upstream gradient shape {gout.shape} != output {out.shape}")
        gxgm = np.zeros(st["xgm_shape"])  # (n, G, H, W, C')
        gm = np.empty((n, g, k, ho, wo))
        goff = np.empty((n, g, k, 2, ho, wo))

        def sample_chains(kk: int, g_s_pre: np.ndarray):
            """Route d(loss)/d(sample) into offsets and the input scatter."""
            sp = samples[kk]
            gm[:, :, kk] = np.sum(g_s_pre * sp["value"], axis=-1)
            g_s = m[:, :, kk][..., None] * g_s_pre
            v00, v01, v10, v11 = sp["v"]
            ddy = sp["wx0"][..., None] * (v10 - v00) + sp["fx"][..., None] * (v11 - v01)
            ddx = sp["wy0"][..., None] * (v01 - v00) + sp["fy"][..., None] * (v11 - v10)
            goff[:, :, kk, 0] = np.sum(g_s * ddy, axis=-1)
            goff[:, :, kk, 1] = np.sum(g_s * ddx, axis=-1)
            for wgt, ok, yc, xc in zip(sp["w"], sp["ok"], sp["yc"], sp["xc"]):
                contrib = np.where(ok[..., None], wgt[..., None] * g_s, 0.0)
                np.add.at(gxgm, (nn, gg, yc, xc), contrib)

        if cfg.shared_weights:
            mat = w.proj.matrix
            gmat = np.einsum("noij,ncij->oc", gout, st["aggc"], optimize=True)
            gbias = gout.sum(axis=(0, 2, 3)) if w.proj.bias is not None else None
            gaggc = np.einsum("oc,noij->ncij", mat, gout, optimize=True)
            g_agg = gaggc.reshape(n, g, cp, ho, wo).transpose(0, 1, 3, 4, 2)
            for kk in range(k):
                sample_chains(kk, g_agg)
            gproj = gmat
        else:
            gproj = np.empty_like(w.per_point)
            gbias = None
            for kk in range(k):
                mat = w.per_point[kk]
                gproj[kk] = np.einsum("noij,ncij->oc", gout, st["vks"][kk], optimize=True)
                gvkc = np.einsum("oc,noij->ncij", mat, gout, optimize=True)
                g_vk = gvkc.reshape(n, g, cp, ho, wo).transpose(0, 1, 3, 4, 2)
                sample_chains(kk, g_vk)

        if cfg.normalization == "softmax":
            glog = m * (gm - np.sum(gm * m, axis=2, keepdims=True))
        else:
            glog = gm * m * (1.0 - m)
        gx = np.ascontiguousarray(
            gxgm.transpose(0, 1, 4, 2, 3).reshape(n, c, h, wd)
        )
        return DcnGrads(
            x=gx,
            offsets=np.ascontiguousarray(goff.reshape(n, 2 * k * g, ho, wo)),
            mask_logits=np.ascontiguousarray(glog.reshape(n, k * g, ho, wo)),
            proj=gproj,
            proj_bias=gbias,
        )

    return out, pullback


def dcnv3_backward(
    upstream: Tensor4, x: Tensor4, field: SamplingField, w: DcnWeights, cfg: DcnConfig
) -> DcnGrads:
    """Recompute the forward state and apply the pullback to ``upstream``."""
    return dcnv3_vjp(x, field, w, cfg)[1](upstream)


# ---------------------------------------------------------------------------
# naive oracle forward
# ---------------------------------------------------------------------------

def dcnv3_naive_forward(
    x: Tensor4, field: SamplingField, w: DcnWeights, cfg: DcnConfig
) -> Tensor4:
    """Literal per-site transcription: explicit loops over groups, points
    and output sites, with scalar coordinate arithmetic.

    Summation order per output element is identical to ``dcnv3_forward``:
    sampling points accumulate in ascending k, the channel contraction of
    the projection in ascending column index.
    """
    x, ho, wo = _check_instance(x, field, w, cfg)
    n, c, h, wd = x.shape
    g, cp, k, ks = cfg.groups, cfg.group_dim, cfg.num_points, cfg.kernel
    xg = x.reshape(n, g, cp, h, wd)
    offs = field.offsets.reshape(n, g, k, 2, ho, wo)
    logits = field.mask_logits.reshape(n, g, k, ho, wo)
    grid = grid_points(ks)
    out = np.zeros((n, c, ho, wo))

    if cfg.shared_weights:
        cols = [np.ascontiguousarray(w.proj.matrix[:, cc]) for cc in range(c)]
    else:
        cols_k = [
            [np.ascontiguousarray(w.per_point[kk][:, cc]) for cc in range(c)]
            for kk in range(k)
        ]

    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                masks = np.empty((g, k))
                for gi in range(g):
                    vec = logits[b, gi, :, i, j]
                    if cfg.normalization == "softmax":
                        e = np.exp(vec - vec.max())
                        denom = float(e[0])
                        for t in range(1, k):
                            denom += float(e[t])
                        masks[gi] = e / denom
                    else:
                        masks[gi] = 1.0 / (1.0 + np.exp(-vec))
                if cfg.shared_weights:
                    agg = np.zeros(c)
                    for gi in range(g):
                        maps = xg[b, gi]
                        for kk, (u, v) in enumerate(grid):
                            py = i * cfg.stride - cfg.pad + u * cfg.dilation + float(
                                offs[b, gi, kk, 0, i, j]
                            )
                            px = j * cfg.stride - cfg.pad + v * cfg.dilation + float(
                                offs[b, gi, kk, 1, i, j]
                            )
                            s = _sample_channel_stack(maps, py, px)
                            agg[gi * cp : (gi + 1) * cp] += masks[gi, kk] * s
                    acc = np.zeros(c)
                    for cc in range(c):
                        acc += cols[cc] * agg[cc]
                    if w.proj.bias is not None:
                        acc += w.proj.bias
                    out[b, :, i, j] = acc
                else:
                    acc = np.zeros(c)
                    for kk, (u, v) in enumerate(grid):
                        vk = np.empty(c)
                        for gi in range(g):
                            maps = xg[b, gi]
                            py = i * cfg.stride - cfg.pad + u * cfg.dilation + float(
                                offs[b, gi, kk, 0, i, j]
                            )
                            px = j * cfg.stride - cfg.pad + v * cfg.dilation + float(
                                offs[b, gi, kk, 1, i, j]
                            )
                            s = _sample_channel_stack(maps, py, px)
                            vk[gi * cp : (gi + 1) * cp] = masks[gi, kk] * s
                        cols = cols_k[kk]
                        for cc in range(c):
                            acc += cols[cc] * vk[cc]
                    out[b, :, i, j] = acc
    return out


# ---------------------------------------------------------------------------
# v2 reference (per-point weights, sigmoid masks, single group)
# ---------------------------------------------------------------------------

def dcnv2_config(channels: int, **kwargs) -> DcnConfig:
    """Config preset for the v2 reference operator."""
    kwargs.setdefault("kernel", 3)
    kwargs.setdefault("stride", 1)
    kwargs.setdefault("pad", 1)
    return DcnConfig(
        channels=channels,
        groups=1,
        shared_weights=False,
        multi_group=False,
        normalization="sigmoid",
        **kwargs,
    )


def dcnv2_forward(x: Tensor4, field: SamplingField, w: DcnWeights, cfg: DcnConfig) -> Tensor4:
    """v2 aggregation: per-point projections, element-wise sigmoid masks."""
    if cfg.shared_weights or cfg.normalization != "sigmoid" or cfg.groups != 1:
        raise ConfigError(
            "dcnv2_forward requires shared_weights=False, normalization='sigmoid', groups=1"
        )
    return dcnv3_forward(x, field, w, cfg)
