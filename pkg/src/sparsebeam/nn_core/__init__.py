from .checkpoint import read_checkpoint, write_checkpoint
from .gradcheck import finite_difference_check, numerical_gradient
from .ops import (
    convolution,
    grid_sample,
    group_normalize,
    linear_map,
    max_reduce_over_set,
    relu,
)
from .store import ParameterStore, adamw_step

__all__ = [
    "ParameterStore", "adamw_step", "convolution", "finite_difference_check",
    "grid_sample", "group_normalize", "linear_map", "max_reduce_over_set",
    "numerical_gradient", "read_checkpoint", "relu", "write_checkpoint",
]
