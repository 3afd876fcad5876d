from . import engine, nn
from .checkpoint import load as load_checkpoint, save as save_checkpoint
from .engine import (
    ShapeError,
    TapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    bce_with_logits,
    concat,
    conv,
    conv_transpose,
    gather_rows,
    get_default_dtype,
    getitem,
    layer_norm,
    matmul,
    max_,
    maxpool,
    mean,
    mul,
    no_grad,
    precision,
    relu,
    reshape,
    scatter_add_rows,
    set_default_dtype,
    sigmoid,
    softmax,
    sub,
    sum_,
    transpose,
)
from .nn import Conv, ConvTranspose, LayerNorm, Linear, MLP, Module, Parameter, make_rng
from .optim import MissingGradientError, adam_step, clip_grad_norm, grad_norm
