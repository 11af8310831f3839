"""Residual convolutional networks that refine filtered-backprojection CT
volumes toward reference quality, with a synthetic data source, a
from-scratch training engine, sliding-window volumetric inference, and
HU-masked PSNR evaluation."""

from .tensor_ops import (
    ConvKernel,
    BatchNormState,
    ShapeError,
    conv_forward,
    conv_backward,
    relu_forward,
    relu_backward,
    batchnorm_forward,
    batchnorm_backward,
    finite_diff_gradient,
    default_dtype,
    set_default_dtype,
    precision,
)
from .storage import (
    VolumeHU,
    save_volume,
    load_volume,
    ContainerError,
    FormatError,
    TruncatedBlobError,
    ShapeMismatchError,
)
from .network import (
    NetworkVariant,
    NetworkParams,
    build_network,
    forward,
    reconstruct,
    save_checkpoint,
    load_checkpoint,
)
from .simulate import (
    Ellipse,
    Phantom,
    Sinogram,
    PatchSet,
    generate_phantom_volume,
    rasterize_phantom,
    radon,
    fbp,
    make_pair,
    hu_normalize,
    hu_denormalize,
    extract_patches,
    save_patchset,
    load_patchset,
)
from .training import (
    TrainingConfig,
    AdamState,
    LossRecord,
    loss,
    adam_step,
    shard_gradients,
    train,
)
from .inference import infer_volume, time_inference, TimingStats
from .metrics import (
    EmptyMaskError,
    MetricsReport,
    masked_mse,
    psnr,
    per_slice_report,
    emit_report,
)
from .gradcheck import run_gradcheck

__version__ = "0.1.0"
