"""Atlas-based registration and segmentation with a self-supervised 3-D U-Net."""

from .volcore import (
    DataError,
    DimensionError,
    DisplacementField,
    Mask3D,
    SurfaceMesh,
    Volume3D,
    FormatError,
    dilate_sphere,
    read_field,
    read_mask,
    read_mesh,
    read_volume,
    write_field,
    write_mask,
    write_mesh,
    write_volume,
)
from .xform import pullback, pullback_grad, splat_mask, warp_mesh
from .loss import LossWeights, grad_smoothness, levelset_loss, ncc, total_loss

__version__ = "0.1.0"
