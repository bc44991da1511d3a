"""Reconstruction of isotropic MRI volumes from anisotropic thick-slice
stacks, using an explicit field of scalar-intensity Gaussian primitives, a
block-partitioned volumetric renderer with analytic gradients, and a small
Fourier-encoded residual network for high-frequency detail."""

from .core import (
    Covariance,
    GaussianField,
    RigidTransform,
    TransformSet,
    Volume,
    apply_rigid,
    assemble_precision,
    quat_to_rotation,
    uniform_lattice_field,
)
from .nrf import ResidualField, fourier_encode, nrf_backward, nrf_forward
from .render import (
    RenderBatch,
    RenderGradients,
    render_backward,
    render_points,
    render_points_dense,
    sample_volume,
)
from .simdata import (
    PointCloud,
    SamplePoint,
    SliceStack,
    acquire_stack,
    devoxelize,
    fuse_trilinear,
    make_phantom,
)
from .spatial import PartitionGrid, build, cell_index, query_local
from .train import (
    AdamState,
    TrainConfig,
    Trainer,
    aniso_loss,
    init_field,
    progressive_upsample,
    smooth_l1,
)

__version__ = "0.1.0"
