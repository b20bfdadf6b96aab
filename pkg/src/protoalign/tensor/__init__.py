from protoalign.tensor import nn, ntsr, ops
from protoalign.tensor.core import Tensor, as_tensor, is_grad_enabled, no_grad
from protoalign.tensor.gradcheck import GradCheckResult, grad_check, numeric_grad
from protoalign.tensor.optim import AdamState, ParameterStore, adam_step

__all__ = [
    "AdamState", "GradCheckResult", "ParameterStore", "Tensor", "adam_step", "as_tensor",
    "grad_check", "is_grad_enabled", "nn", "no_grad", "ntsr", "numeric_grad", "ops",
]
