from . import ops
from .gradcheck import gradient_check, numeric_gradient, relative_error
from .layers import Conv2d, Flatten, Layer, Linear, ReLU, Reshape, Sequential
from .params import (
    CosineSchedule,
    ParamStore,
    adam_step,
    load_checkpoint,
    save_checkpoint,
)
