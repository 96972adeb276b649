"""Unrolled phase retrieval from coded diffraction patterns.

Magnitude-only measurements y = |Wx| + noise are inverted by a K-stage
unrolled network alternating a data-fidelity descent step with a learned
residual proximal projection.  The measurement operator itself (and an
independent adjoint) is trainable; gradients, the optimizer and all file
formats are implemented directly on numpy arrays.
"""

from .cdp import (
    MaskSet,
    MeasurementVector,
    OperatorParams,
    make_cdp_masks,
    masks_from_seed,
    measure,
    operator_adjoint,
    operator_apply,
)
from .field import SeededRng, fft2_unitary, ifft2_unitary
from .metrics import psnr, ssim
from .network import (
    NetParams,
    StageParams,
    init_net,
    net_forward,
    ppm_forward,
    sgd_step,
    soft_threshold,
    transform_forward,
    transform_inverse,
)
from .training import (
    AdamState,
    TrainConfig,
    adam_update,
    backward,
    checkpoint_load,
    checkpoint_save,
    loss_mse,
    lr_schedule,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "MaskSet", "MeasurementVector", "NetParams", "OperatorParams",
    "SeededRng", "StageParams", "TrainConfig", "adam_update", "backward",
    "checkpoint_load", "checkpoint_save", "fft2_unitary", "ifft2_unitary",
    "init_net", "loss_mse", "lr_schedule", "make_cdp_masks", "masks_from_seed",
    "measure", "net_forward", "operator_adjoint", "operator_apply",
    "ppm_forward", "psnr", "sgd_step", "soft_threshold", "ssim", "train",
    "transform_forward", "transform_inverse",
]
