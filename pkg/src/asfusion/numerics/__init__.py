from .autodiff import (
    ContractError,
    NonFiniteError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    get_dtype,
    precision,
    record,
    set_precision,
)
from .ops import (
    ATTN_KEYS,
    ConfigurationError,
    DimensionError,
    EmptyKeyError,
    OpCounter,
    add,
    concat,
    counting,
    focal_loss,
    gelu,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    multi_head_cross_attention,
    neighborhood,
    reshape,
    scale,
    sigmoid,
    smooth_l1,
    softmax,
    stack,
    sub,
    sum,
    swapaxes,
    take,
    transpose,
)
from .params import (
    ParamStore,
    adamw_step,
    decode_records,
    encode_records,
    load_checkpoint,
    save_checkpoint,
)
