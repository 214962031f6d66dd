from .core import (
    FLOAT_DTYPES,
    Rng,
    bmm,
    gaussian,
    gelu,
    gelu_grad,
    layer_norm,
    linear,
    matmul,
    rms_norm,
    row_mean,
    row_sum,
    singular_values,
    softmax_rows,
)
from .._backend import BACKEND

__all__ = [
    "BACKEND",
    "FLOAT_DTYPES",
    "Rng",
    "bmm",
    "gaussian",
    "gelu",
    "gelu_grad",
    "layer_norm",
    "linear",
    "matmul",
    "rms_norm",
    "row_mean",
    "row_sum",
    "singular_values",
    "softmax_rows",
]
