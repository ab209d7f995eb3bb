from .autodiff import (
    COSINE_EPS,
    Function,
    Tensor,
    add,
    as_tensor,
    bce_with_logits,
    check_finite,
    concat,
    cosine_sim,
    cross_entropy,
    exp,
    gather_rows,
    index,
    l2_norm_sq,
    leaky_relu,
    log,
    log_softmax,
    matmul,
    matvec,
    mean,
    mul,
    neg,
    relu,
    reshape,
    scale,
    segment_softmax,
    segment_sum,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    softplus,
    spmm,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
    where,
)
from .gradcheck import check_function, check_gradients, numeric_grad, relative_error
from .optim import (
    CHECKPOINT_MAGIC,
    Optimizer,
    ParamStore,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
    seeded_init,
    xavier_bound,
)
