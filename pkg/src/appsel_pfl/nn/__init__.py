from appsel_pfl.nn.optim import AdamWState, SgdState, adamw_step, sgd_step
from appsel_pfl.nn.params import ModelParams
from appsel_pfl.nn.tape import (
    ContractError,
    DimensionError,
    Tape,
    Tensor,
    add,
    add_bias,
    backward,
    concat,
    elementwise,
    matmul,
    mse_loss,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_cols,
    softmax_rows,
    transpose,
)

__all__ = [
    "AdamWState", "ContractError", "DimensionError", "ModelParams", "SgdState", "Tape",
    "Tensor", "add", "add_bias", "adamw_step", "backward", "concat", "elementwise",
    "matmul", "mse_loss", "mul", "relu", "reshape", "scale", "sgd_step", "sigmoid",
    "slice_cols", "softmax_rows", "transpose",
]
