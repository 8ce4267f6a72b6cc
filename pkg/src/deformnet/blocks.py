"""Backbone building blocks around the deformable operator.

The basic block is post-norm residual: deformable aggregation with a
predicted sampling field, then a feed-forward expansion, each branch
followed by residual-add and channel LayerNorm.  Stem and downsampling
are plain strided convolutions with LayerNorm.

Every forward has a ``*_vjp`` twin whose pullback returns
``(grad_x, grads)`` where ``grads`` maps parameter names (dotted paths,
e.g. ``"ffn.fc1.matrix"``) to gradient arrays.  Name paths match
``named_params`` walks so optimizer updates and serialization agree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from .dcn import DcnConfig, DcnWeights, SamplingField, dcnv3_vjp
from .errors import ConfigError, ShapeError
from .tensor import (
    Conv2dWeights,
    LinearWeights,
    Tensor4,
    as_tensor4,
    conv2d_vjp,
    gelu_vjp,
    global_avg_pool_vjp,
    layer_norm_vjp,
    linear_project_vjp,
)

GradDict = dict[str, np.ndarray]


def _prefix(grads: GradDict, prefix: str) -> GradDict:
    return {f"{prefix}.{k}": v for k, v in grads.items()}


def _linear_params(name: str, w: LinearWeights) -> Iterator[tuple[str, np.ndarray]]:
    yield f"{name}.matrix", w.matrix
    if w.bias is not None:
        yield f"{name}.bias", w.bias


def _conv_params(name: str, w: Conv2dWeights) -> Iterator[tuple[str, np.ndarray]]:
    yield f"{name}.kernel", w.kernel
    if w.bias is not None:
        yield f"{name}.bias", w.bias


def _linear_grads(gmat, gbias) -> GradDict:
    out = {"matrix": gmat}
    if gbias is not None:
        out["bias"] = gbias
    return out


@dataclass
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-6

    def __post_init__(self) -> None:
        self.gamma = np.ascontiguousarray(np.asarray(self.gamma, dtype=np.float64))
        self.beta = np.ascontiguousarray(np.asarray(self.beta, dtype=np.float64))

    def param_count(self) -> int:
        return self.gamma.size + self.beta.size


@dataclass
class PredictorParams:
    """Separable field predictor: depthwise 3x3 then a 1x1 channel map."""

    dw: Conv2dWeights  # depthwise, groups == channels
    lin: LinearWeights  # channels -> 3*K*G

    def param_count(self) -> int:
        return self.dw.param_count() + self.lin.param_count()


@dataclass
class FfnParams:
    fc1: LinearWeights
    fc2: LinearWeights

    def param_count(self) -> int:
        return self.fc1.param_count() + self.fc2.param_count()


@dataclass
class BlockParams:
    cfg: DcnConfig
    dcn: DcnWeights
    predictor: PredictorParams
    ln1: LayerNormParams
    ln2: LayerNormParams
    ffn: FfnParams
    scale1: Optional[np.ndarray] = None  # per-channel residual scaling
    scale2: Optional[np.ndarray] = None

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        if self.dcn.proj is not None:
            yield from _linear_params("dcn.proj", self.dcn.proj)
        else:
            yield "dcn.per_point", self.dcn.per_point
        yield from _conv_params("predictor.dw", self.predictor.dw)
        yield from _linear_params("predictor.lin", self.predictor.lin)
        yield "ln1.gamma", self.ln1.gamma
        yield "ln1.beta", self.ln1.beta
        yield from _linear_params("ffn.fc1", self.ffn.fc1)
        yield from _linear_params("ffn.fc2", self.ffn.fc2)
        yield "ln2.gamma", self.ln2.gamma
        yield "ln2.beta", self.ln2.beta
        if self.scale1 is not None:
            yield "scale1", self.scale1
        if self.scale2 is not None:
            yield "scale2", self.scale2


@dataclass
class StemParams:
    conv1: Conv2dWeights
    ln1: LayerNormParams
    conv2: Conv2dWeights
    ln2: LayerNormParams

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from _conv_params("conv1", self.conv1)
        yield "ln1.gamma", self.ln1.gamma
        yield "ln1.beta", self.ln1.beta
        yield from _conv_params("conv2", self.conv2)
        yield "ln2.gamma", self.ln2.gamma
        yield "ln2.beta", self.ln2.beta


@dataclass
class DownsampleParams:
    conv: Conv2dWeights
    ln: LayerNormParams

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from _conv_params("conv", self.conv)
        yield "ln.gamma", self.ln.gamma
        yield "ln.beta", self.ln.beta


@dataclass
class HeadParams:
    fc: LinearWeights

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from _linear_params("fc", self.fc)


@dataclass
class StageParams:
    blocks: list
    down: Optional[DownsampleParams] = None  # absent after the last stage

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        for bi, blk in enumerate(self.blocks):
            for name, arr in blk.named_params():
                yield f"blocks.{bi}.{name}", arr
        if self.down is not None:
            for name, arr in self.down.named_params():
                yield f"down.{name}", arr


# ---------------------------------------------------------------------------
# field predictor
# ---------------------------------------------------------------------------

def predict_field_vjp(
    x: Tensor4, p: PredictorParams, cfg: DcnConfig
) -> tuple[SamplingField, Callable]:
    """Predict per-site offsets and mask logits from the block input.

    Output channels are 3*K*G: offsets (2*K*G) first, then mask logits.
    The pullback maps (grad_offsets, grad_logits) to (grad_x, grads).
    """
    x = as_tensor4(x, "predictor input")
    c = x.shape[1]
    if c != cfg.channels:
        raise ShapeError(f"predictor input has {c} channels, config expects {cfg.channels}")
    kg = cfg.num_points * cfg.groups
    if p.lin.out_dim != 3 * kg:
        raise ConfigError(
            f"predictor linear emits {p.lin.out_dim} channels, need {3 * kg} (=3*K*G)"
        )
    hidden, pull_dw = conv2d_vjp(x, p.dw)
    raw, pull_lin = linear_project_vjp(hidden, p.lin)
    field = SamplingField(offsets=raw[:, : 2 * kg], mask_logits=raw[:, 2 * kg :])

    def pullback(g_offsets: Tensor4, g_logits: Tensor4):
        graw = np.concatenate([g_offsets, g_logits], axis=1)
        ghidden, gmat, gbias = pull_lin(graw)
        gx, gkernel, gkbias = pull_dw(ghidden)
        grads: GradDict = _prefix(_linear_grads(gmat, gbias), "lin")
        grads["dw.kernel"] = gkernel
        if gkbias is not None:
            grads["dw.bias"] = gkbias
        return gx, grads

    return field, pullback


def predict_field(x: Tensor4, p: PredictorParams, cfg: DcnConfig) -> SamplingField:
    return predict_field_vjp(x, p, cfg)[0]


# ---------------------------------------------------------------------------
# basic block
# ---------------------------------------------------------------------------

def basic_block_vjp(x: Tensor4, p: BlockParams) -> tuple[Tensor4, Callable]:
    """Post-norm block: LN(x + s1*DCN(x, field(x))) then LN(y + s2*FFN(y))."""
    x = as_tensor4(x, "block input")
    field, pull_field = predict_field_vjp(x, p.predictor, p.cfg)
    branch, pull_dcn = dcnv3_vjp(x, field, p.dcn, p.cfg)
    if branch.shape != x.shape:
        raise ConfigError(
            f"dcn branch shape {branch.shape} != input {x.shape}; blocks need "
            f"stride 1 and pad (kernel-1)/2"
        )
    scaled1 = branch if p.scale1 is None else p.scale1[None, :, None, None] * branch
    y, pull_ln1 = layer_norm_vjp(x + scaled1, p.ln1.gamma, p.ln1.beta, p.ln1.eps)

    h1, pull_fc1 = linear_project_vjp(y, p.ffn.fc1)
    h2, pull_gelu = gelu_vjp(h1)
    f, pull_fc2 = linear_project_vjp(h2, p.ffn.fc2)
    scaled2 = f if p.scale2 is None else p.scale2[None, :, None, None] * f
    z, pull_ln2 = layer_norm_vjp(y + scaled2, p.ln2.gamma, p.ln2.beta, p.ln2.eps)

    def pullback(g: Tensor4):
        grads: GradDict = {}
        gr2, g_gamma2, g_beta2 = pull_ln2(g)
        grads["ln2.gamma"] = g_gamma2
        grads["ln2.beta"] = g_beta2
        gy = gr2.copy()
        gf = gr2 if p.scale2 is None else p.scale2[None, :, None, None] * gr2
        if p.scale2 is not None:
            grads["scale2"] = (gr2 * f).sum(axis=(0, 2, 3))
        gh2, gmat2, gbias2 = pull_fc2(gf)
        grads.update(_prefix(_linear_grads(gmat2, gbias2), "ffn.fc2"))
        gh1 = pull_gelu(gh2)
        gy_ffn, gmat1, gbias1 = pull_fc1(gh1)
        grads.update(_prefix(_linear_grads(gmat1, gbias1), "ffn.fc1"))
        gy += gy_ffn

        gr1, g_gamma1, g_beta1 = pull_ln1(gy)
        grads["ln1.gamma"] = g_gamma1
        grads["ln1.beta"] = g_beta1
        gx = gr1.copy()
        gb = gr1 if p.scale1 is None else p.scale1[None, :, None, None] * gr1
        if p.scale1 is not None:
            grads["scale1"] = (gr1 * branch).sum(axis=(0, 2, 3))
        dg = pull_dcn(gb)
        gx += dg.x
        if p.dcn.proj is not None:
            grads["dcn.proj.matrix"] = dg.proj
            if dg.proj_bias is not None:
                grads["dcn.proj.bias"] = dg.proj_bias
        else:
            grads["dcn.per_point"] = dg.proj
        gx_field, field_grads = pull_field(dg.offsets, dg.mask_logits)
        gx += gx_field
        grads.update(_prefix(field_grads, "predictor"))
        return gx, grads

    return z, pullback


def basic_block(x: Tensor4, p: BlockParams) -> Tensor4:
    return basic_block_vjp(x, p)[0]


# ---------------------------------------------------------------------------
# stem / downsample / head
# ---------------------------------------------------------------------------

def stem_vjp(x: Tensor4, p: StemParams) -> tuple[Tensor4, Callable]:
    """Two stride-2 convolutions with LayerNorms and a GELU in between.

    Reduces spatial resolution 4x; the first conv emits half the channels
    of the second.
    """
    if p.conv2.kernel.shape[0] % 2 != 0:
        raise ConfigError(f"stem output channels must be even, got {p.conv2.kernel.shape[0]}")
    if p.conv1.kernel.shape[0] * 2 != p.conv2.kernel.shape[0]:
        raise ConfigError(
            f"first stem conv must emit half of {p.conv2.kernel.shape[0]} channels, "
            f"got {p.conv1.kernel.shape[0]}"
        )
    h1, pull_c1 = conv2d_vjp(x, p.conv1)
    h2, pull_ln1 = layer_norm_vjp(h1, p.ln1.gamma, p.ln1.beta, p.ln1.eps)
    h3, pull_gelu = gelu_vjp(h2)
    h4, pull_c2 = conv2d_vjp(h3, p.conv2)
    y, pull_ln2 = layer_norm_vjp(h4, p.ln2.gamma, p.ln2.beta, p.ln2.eps)

    def pullback(g: Tensor4):
        grads: GradDict = {}
        g4, g_gamma2, g_beta2 = pull_ln2(g)
        grads["ln2.gamma"] = g_gamma2
        grads["ln2.beta"] = g_beta2
        g3, gk2, gb2 = pull_c2(g4)
        grads["conv2.kernel"] = gk2
        if gb2 is not None:
            grads["conv2.bias"] = gb2
        g2 = pull_gelu(g3)
        g1, g_gamma1, g_beta1 = pull_ln1(g2)
        grads["ln1.gamma"] = g_gamma1
        grads["ln1.beta"] = g_beta1
        gx, gk1, gb1 = pull_c1(g1)
        grads["conv1.kernel"] = gk1
        if gb1 is not None:
            grads["conv1.bias"] = gb1
        return gx, grads

    return y, pullback


def stem(x: Tensor4, p: StemParams) -> Tensor4:
    return stem_vjp(x, p)[0]


def downsample_vjp(x: Tensor4, p: DownsampleParams) -> tuple[Tensor4, Callable]:
    """Stride-2 3x3 convolution followed by LayerNorm; halves each spatial dim."""
    h, pull_c = conv2d_vjp(x, p.conv)
    y, pull_ln = layer_norm_vjp(h, p.ln.gamma, p.ln.beta, p.ln.eps)

    def pullback(g: Tensor4):
        grads: GradDict = {}
        gh, g_gamma, g_beta = pull_ln(g)
        grads["ln.gamma"] = g_gamma
        grads["ln.beta"] = g_beta
        gx, gk, gb = pull_c(gh)
        grads["conv.kernel"] = gk
        if gb is not None:
            grads["conv.bias"] = gb
        return gx, grads

    return y, pullback


def downsample(x: Tensor4, p: DownsampleParams) -> Tensor4:
    return downsample_vjp(x, p)[0]


def head_vjp(x: Tensor4, p: HeadParams) -> tuple[np.ndarray, Callable]:
    """Global average pool then a linear map to class logits (n, classes)."""
    pooled, pull_pool = global_avg_pool_vjp(x)
    logits4, pull_fc = linear_project_vjp(pooled, p.fc)
    n, k = logits4.shape[:2]
    logits = logits4.reshape(n, k)

    def pullback(g: np.ndarray):
        grads: GradDict = {}
        g4 = np.asarray(g, dtype=np.float64).reshape(n, k, 1, 1)
        gp, gmat, gbias = pull_fc(g4)
        grads.update(_prefix(_linear_grads(gmat, gbias), "fc"))
        gx = pull_pool(gp)
        return gx, grads

    return logits, pullback


def head(x: Tensor4, p: HeadParams) -> np.ndarray:
    return head_vjp(x, p)[0]
