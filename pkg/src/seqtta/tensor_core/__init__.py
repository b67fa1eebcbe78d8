from .checkpoint import dump_params, load_checkpoint, load_params, save_checkpoint
from .gradcheck import GradCheckReport, finite_difference_check, relative_error
from .kernels import set_debug, softmax, softmax_cross_entropy
from .optim import Parameter, adam_step

__all__ = [
    "GradCheckReport",
    "Parameter",
    "adam_step",
    "dump_params",
    "finite_difference_check",
    "load_checkpoint",
    "load_params",
    "relative_error",
    "save_checkpoint",
    "set_debug",
    "softmax",
    "softmax_cross_entropy",
]
