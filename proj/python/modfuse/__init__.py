"""Multi-encoder 3-D segmentation toolkit (numpy front end to the C++ library)."""

from ._modfuse import (  # noqa: F401
    Model,
    ModfuseError,
    binary_metrics,
    ce_loss,
    combined_loss,
    config_keys,
    confusion,
    default_config,
    dice_loss,
    evaluate,
    evaluate_regions,
    generate_case,
    generate_data,
    load_config,
    num_threads,
    poly_lr,
    predict,
    pretrain,
    read_nifti,
    set_num_threads,
    soft_dice_loss,
    softmax,
    train,
    write_nifti,
)

__version__ = "0.1.0"
