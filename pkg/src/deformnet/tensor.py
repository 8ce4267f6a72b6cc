"""Dense rank-4 tensor kernels with explicit vector-Jacobian products.

Arrays follow one fixed layout: C-contiguous float64 in
(batch, channel, row, col) order.  Single-precision input is accepted as
a storage format and upcast on entry; every kernel computes in double.

Each forward operation ``f`` has a twin ``f_vjp`` returning
``(output, pullback)``.  The pullback maps an upstream gradient (same
shape as the output) to gradients for each differentiable input, in the
order the inputs appear in the signature.  There is no autodiff tape:
callers compose pullbacks by hand, which keeps the numerics auditable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ShapeError

Tensor4 = np.ndarray  # (n, c, h, w) float64

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def as_tensor4(x: np.ndarray, name: str = "tensor") -> Tensor4:
    """Validate rank/finiteness and return a C-contiguous float64 view or copy."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 (n, c, h, w), got shape {x.shape}")
    if x.dtype != np.float64:
        x = x.astype(np.float64)
    return np.ascontiguousarray(x)


def check_finite(x: np.ndarray, name: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")


@dataclass
class LinearWeights:
    """A per-location channel map: out = matrix @ in (+ bias)."""

    matrix: np.ndarray  # (out_dim, in_dim)
    bias: Optional[np.ndarray] = None  # (out_dim,)

    def __post_init__(self) -> None:
        self.matrix = np.ascontiguousarray(np.asarray(self.matrix, dtype=np.float64))
        if self.matrix.ndim != 2:
            raise ShapeError(f"linear matrix must be 2-D, got shape {self.matrix.shape}")
        if self.bias is not None:
            self.bias = np.ascontiguousarray(np.asarray(self.bias, dtype=np.float64))
            if self.bias.shape != (self.matrix.shape[0],):
                raise ShapeError(
                    f"bias shape {self.bias.shape} does not match out_dim "
                    f"{self.matrix.shape[0]}"
                )

    @property
    def out_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def in_dim(self) -> int:
        return self.matrix.shape[1]

    def param_count(self) -> int:
        n = self.matrix.size
        if self.bias is not None:
            n += self.bias.size
        return n


@dataclass
class Conv2dWeights:
    """Weights for a zero-padded cross-correlation (odd square kernels)."""

    kernel: np.ndarray  # (out_c, in_c_per_group, kh, kw)
    bias: Optional[np.ndarray] = None  # (out_c,)
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self) -> None:
        self.kernel = np.ascontiguousarray(np.asarray(self.kernel, dtype=np.float64))
        if self.kernel.ndim != 4:
            raise ShapeError(f"conv kernel must be rank-4, got shape {self.kernel.shape}")
        out_c, _, kh, kw = self.kernel.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"kernel sides must be odd, got {kh}x{kw}")
        if self.groups < 1 or out_c % self.groups != 0:
            raise ConfigError(f"out_c {out_c} not divisible by groups {self.groups}")
        if self.stride < 1 or self.padding < 0:
            raise ConfigError(
                f"stride must be >= 1 and padding >= 0, got {self.stride}, {self.padding}"
            )
        if self.bias is not None:
            self.bias = np.ascontiguousarray(np.asarray(self.bias, dtype=np.float64))
            if self.bias.shape != (out_c,):
                raise ShapeError(f"bias shape {self.bias.shape} does not match out_c {out_c}")

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1] * self.groups

    def param_count(self) -> int:
        n = self.kernel.size
        if self.bias is not None:
            n += self.bias.size
        return n


# ---------------------------------------------------------------------------
# linear projection
# ---------------------------------------------------------------------------

def linear_project_vjp(
    x: Tensor4, w: LinearWeights
) -> tuple[Tensor4, Callable[[Tensor4], tuple]]:
    """Apply ``w`` independently at every spatial location.

    Returns the (n, out_dim, h, w) output and a pullback producing
    ``(grad_x, grad_matrix, grad_bias)`` (``grad_bias`` is None when the
    layer has no bias).
    """
    x = as_tensor4(x, "linear input")
    n, c, h, w_ = x.shape
    if c != w.in_dim:
        raise ShapeError(
            f"linear input has {c} channels (shape {x.shape}) but matrix expects "
            f"{w.in_dim} (shape {w.matrix.shape})"
        )
    xm = x.reshape(n, c, h * w_)
    ym = np.matmul(w.matrix[None, :, :], xm)  # (n, out, h*w)
    if w.bias is not None:
        ym = ym + w.bias[None, :, None]
    y = ym.reshape(n, w.out_dim, h, w_)

    def pullback(g: Tensor4):
        gm = np.asarray(g, dtype=np.float64).reshape(n, w.out_dim, h * w_)
        gx = np.matmul(w.matrix.T[None, :, :], gm).reshape(n, c, h, w_)
        g2 = np.ascontiguousarray(gm.transpose(1, 0, 2)).reshape(w.out_dim, n * h * w_)
        x2 = np.ascontiguousarray(xm.transpose(1, 0, 2)).reshape(c, n * h * w_)
        gmat = np.matmul(g2, x2.T)
        gb = gm.sum(axis=(0, 2)) if w.bias is not None else None
        return gx, gmat, gb

    return y, pullback


def linear_project(x: Tensor4, w: LinearWeights) -> Tensor4:
    return linear_project_vjp(x, w)[0]


# ---------------------------------------------------------------------------
# convolution (cross-correlation, zero padding)
# ---------------------------------------------------------------------------

def conv2d_output_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def conv2d_vjp(
    x: Tensor4, w: Conv2dWeights
) -> tuple[Tensor4, Callable[[Tensor4], tuple]]:
    """Grouped 2-D cross-correlation with zero padding.

    Output spatial dims are floor((h + 2*pad - kh)/stride) + 1.  Pullback
    returns ``(grad_x, grad_kernel, grad_bias)``.

    Implemented as a loop over the kh*kw kernel taps with one matmul per
    tap (or a broadcast multiply in the depthwise case), which stays on
    BLAS for every shape this package builds.
    """
    x = as_tensor4(x, "conv input")
    n, c, h, w_ = x.shape
    out_c, cpg, kh, kw = w.kernel.shape
    if c != cpg * w.groups:
        raise ConfigError(
            f"conv input has {c} channels but kernel expects {cpg}x{w.groups} "
            f"(per-group x groups)"
        )
    g = w.groups
    opg = out_c // g
    ho, wo = conv2d_output_hw(h, w_, kh, kw, w.stride, w.padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv output would be empty for input {x.shape}")
    p, s = w.padding, w.stride
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    depthwise = g == c and cpg == 1 and opg == 1

    taps = [(u, v) for u in range(kh) for v in range(kw)]
    if depthwise:
        shifts = None
        y = np.zeros((n, out_c, ho, wo))
        for u, v in taps:
            xs = xp[:, :, u : u + ho * s : s, v : v + wo * s : s]
            y += w.kernel[:, 0, u, v][None, :, None, None] * xs
    else:
        # per-tap contiguous copies of the shifted input, reused in the pullback
        shifts = [
            np.ascontiguousarray(
                xp[:, :, u : u + ho * s : s, v : v + wo * s : s]
            ).reshape(n, g, cpg, ho * wo)
            for u, v in taps
        ]
        ym = np.zeros((n, g, opg, ho * wo))
        for t, (u, v) in enumerate(taps):
            kt = np.ascontiguousarray(w.kernel.reshape(g, opg, cpg, kh, kw)[:, :, :, u, v])
            ym += np.matmul(kt[None], shifts[t])
        y = ym.reshape(n, out_c, ho, wo)
    if w.bias is not None:
        y = y + w.bias[None, :, None, None]
    y = np.ascontiguousarray(y)

    def pullback(g_out: Tensor4):
        g_out = np.asarray(g_out, dtype=np.float64)
        gk = np.empty_like(w.kernel)
        gxp = np.zeros((n, c, h + 2 * p, w_ + 2 * p))
        if depthwise:
            for u, v in taps:
                xs = xp[:, :, u : u + ho * s : s, v : v + wo * s : s]
                gk[:, 0, u, v] = (g_out * xs).sum(axis=(0, 2, 3))
                gxp[:, :, u : u + ho * s : s, v : v + wo * s : s] += (
                    w.kernel[:, 0, u, v][None, :, None, None] * g_out
                )
        else:
            gm = g_out.reshape(n, g, opg, ho * wo)
            gflat = np.ascontiguousarray(gm.transpose(1, 2, 0, 3)).reshape(
                g, opg, n * ho * wo
            )
            for t, (u, v) in enumerate(taps):
                kt = w.kernel.reshape(g, opg, cpg, kh, kw)[:, :, :, u, v]
                xflat = np.ascontiguousarray(shifts[t].transpose(1, 0, 3, 2)).reshape(
                    g, n * ho * wo, cpg
                )
                gk.reshape(g, opg, cpg, kh, kw)[:, :, :, u, v] = np.matmul(gflat, xflat)
                gxs = np.matmul(kt.transpose(0, 2, 1)[None], gm)
                gxp[:, :, u : u + ho * s : s, v : v + wo * s : s] += gxs.reshape(
                    n, c, ho, wo
                )
        gx = gxp[:, :, p : p + h, p : p + w_] if p else gxp
        gb = g_out.sum(axis=(0, 2, 3)) if w.bias is not None else None
        return np.ascontiguousarray(gx), gk, gb

    return y, pullback


def conv2d(x: Tensor4, w: Conv2dWeights) -> Tensor4:
    return conv2d_vjp(x, w)[0]


# ---------------------------------------------------------------------------
# layer normalization over the channel axis
# ---------------------------------------------------------------------------

def layer_norm_vjp(
    x: Tensor4,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float = 1e-6,
) -> tuple[Tensor4, Callable[[Tensor4], tuple]]:
    """Normalize each spatial site over channels, then apply the affine.

    Pullback returns ``(grad_x, grad_gamma, grad_beta)``.
    """
    x = as_tensor4(x, "layer_norm input")
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels"
        )
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]

    def pullback(g: Tensor4):
        g = np.asarray(g, dtype=np.float64)
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gh = g * gamma[None, :, None, None]
        m1 = gh.mean(axis=1, keepdims=True)
        m2 = (gh * xhat).mean(axis=1, keepdims=True)
        gx = inv * (gh - m1 - xhat * m2)
        return gx, ggamma, gbeta

    return y, pullback


def layer_norm(x: Tensor4, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6) -> Tensor4:
    return layer_norm_vjp(x, gamma, beta, eps)[0]


# ---------------------------------------------------------------------------
# GELU (exact erf form; the tanh approximation differs at the 1e-3 level)
# ---------------------------------------------------------------------------

def gelu_vjp(x: Tensor4) -> tuple[Tensor4, Callable[[Tensor4], np.ndarray]]:
    x = np.asarray(x, dtype=np.float64)
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    y = x * phi

    def pullback(g: np.ndarray) -> np.ndarray:
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return np.asarray(g, dtype=np.float64) * (phi + x * pdf)

    return y, pullback


def gelu(x: Tensor4) -> Tensor4:
    return gelu_vjp(x)[0]


# ---------------------------------------------------------------------------
# softmax along one axis
# ---------------------------------------------------------------------------

def softmax_axis_vjp(
    x: np.ndarray, axis: int
) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """Max-subtracted softmax along ``axis``.

    The denominator accumulates in index order along the axis so results
    are reproducible and independent of numpy's reduction blocking; the
    deformable-convolution oracle comparison relies on this.
    """
    x = np.asarray(x, dtype=np.float64)
    k = x.shape[axis]
    if k < 1:
        raise ShapeError(f"softmax axis {axis} of shape {x.shape} is empty")
    xmax = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - xmax)
    denom = np.take(e, 0, axis=axis).copy()
    for i in range(1, k):
        denom += np.take(e, i, axis=axis)
    y = e / np.expand_dims(denom, axis)

    def pullback(g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return y * (g - dot)

    return y, pullback


def softmax_axis(x: np.ndarray, axis: int) -> np.ndarray:
    return softmax_axis_vjp(x, axis)[0]


# ---------------------------------------------------------------------------
# global average pooling
# ---------------------------------------------------------------------------

def global_avg_pool_vjp(
    x: Tensor4,
) -> tuple[Tensor4, Callable[[Tensor4], Tensor4]]:
    x = as_tensor4(x, "pool input")
    n, c, h, w = x.shape
    y = x.mean(axis=(2, 3), keepdims=True)

    def pullback(g: Tensor4) -> Tensor4:
        g = np.asarray(g, dtype=np.float64).reshape(n, c, 1, 1)
        return np.broadcast_to(g / (h * w), x.shape).copy()

    return y, pullback


def global_avg_pool(x: Tensor4) -> Tensor4:
    return global_avg_pool_vjp(x)[0]
