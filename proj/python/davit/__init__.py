"""DA-VIT coal maceral segmentation: model, analytics and metrics."""

from ._core import (
    IGNORE_LABEL,
    NUM_CLASSES,
    Model,
    ModelConfig,
    build_model,
    count_params,
    equivalent_kernel_size,
    five_fold_split,
    flops,
    load_model,
    metrics,
    param_reduction_rho,
    receptive_field,
    synth_generate,
    train,
)

__all__ = [
    "IGNORE_LABEL",
    "NUM_CLASSES",
    "Model",
    "ModelConfig",
    "build_model",
    "count_params",
    "equivalent_kernel_size",
    "five_fold_split",
    "flops",
    "load_model",
    "metrics",
    "param_reduction_rho",
    "receptive_field",
    "synth_generate",
    "train",
]
