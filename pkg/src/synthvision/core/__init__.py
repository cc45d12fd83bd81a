from .optim import AdamState, adam_step
from .rng import Rng, truncated_normal
from .tensor import (
    Tensor,
    add,
    as_tensor,
    avg_pool2,
    concat,
    conv2d,
    div,
    dropout,
    exp,
    gelu,
    getitem,
    layer_norm,
    log,
    log_softmax,
    make_node,
    matmul,
    mean,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    silu,
    softmax,
    sqrt,
    sub,
    take_rows,
    tanh,
    transpose,
    tsum,
    upsample2,
)
