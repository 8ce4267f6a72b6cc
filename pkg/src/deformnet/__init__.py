"""Deformable-convolution backbone toolkit.

Exact CPU kernels for the v3 deformable operator (and the v2 reference)
with hand-written vector-Jacobian products, the surrounding block and
backbone assembly, stacking/scaling config generation, closed-form
parameter counting, and desk-scale verification tools.
"""

from .dcn import (
    DcnConfig,
    DcnGrads,
    DcnWeights,
    SamplingField,
    bilinear_sample,
    dcnv2_config,
    dcnv2_forward,
    dcnv3_backward,
    dcnv3_forward,
    dcnv3_naive_forward,
    dcnv3_vjp,
)
from .errors import ConfigError, InputError, ShapeError
from .model import (
    Model,
    ModelConfig,
    ParamReport,
    StackConfig,
    VariantSpec,
    build_model,
    count_params,
    model_forward,
    model_forward_vjp,
    validate_stack,
    variant_registry,
)
from .scaling import (
    ScaledConfig,
    ScaleFactors,
    check_constraint,
    enumerate_search_space,
    scale_config,
)
from .tensor import (
    Conv2dWeights,
    LinearWeights,
    Tensor4,
    conv2d,
    gelu,
    global_avg_pool,
    layer_norm,
    linear_project,
    softmax_axis,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "InputError", "ShapeError",
    "Tensor4", "LinearWeights", "Conv2dWeights",
    "linear_project", "conv2d", "layer_norm", "gelu", "softmax_axis", "global_avg_pool",
    "DcnConfig", "DcnWeights", "DcnGrads", "SamplingField",
    "bilinear_sample", "dcnv3_forward", "dcnv3_naive_forward", "dcnv3_vjp",
    "dcnv3_backward", "dcnv2_forward", "dcnv2_config",
    "StackConfig", "VariantSpec", "ParamReport", "ModelConfig", "Model",
    "validate_stack", "variant_registry", "count_params", "build_model",
    "model_forward", "model_forward_vjp",
    "ScaleFactors", "ScaledConfig", "check_constraint", "scale_config",
    "enumerate_search_space",
    "__version__",
]
