from .layers import (
    batchnorm3d_backward,
    batchnorm3d_forward,
    concat_backward,
    concat_forward,
    conv3d_backward,
    conv3d_forward,
    leaky_relu_backward,
    leaky_relu_forward,
    maxpool3d_backward,
    maxpool3d_forward,
    upsample_trilinear_backward,
    upsample_trilinear_forward,
)
from .model import (
    Adam,
    CheckpointError,
    NetConfig,
    PaddingPlan,
    StateError,
    UNet3D,
    adam_step,
    load_checkpoint,
    net_backward,
    net_forward,
    save_checkpoint,
)
