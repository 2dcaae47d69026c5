from .tensor import (
    Tape,
    Tensor,
    abs_,
    add,
    backward,
    broadcast_to,
    clamp,
    concat,
    div,
    exp,
    forward_op,
    gather_rows,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    normalize,
    record,
    relu,
    reshape,
    sigmoid,
    slice_,
    sqrt,
    square,
    sub,
    sum_,
    tanh,
    transpose,
)
from .nn import (
    avg_pool,
    bilinear_resize,
    bilinear_sample,
    conv2d,
    gaussian_filter_same,
    reflect_pad2d,
    sepconv_valid,
)
from .optim import Adam, sgd_adam_step
