"""Focus-aware Gaussian splatting for slice-stacked volumes.

Fits a set of anisotropic 3D Gaussians to a stack of 2D slices with a
rasterizer that models finite slice thickness, voxelizes the fitted set
back into a dense volume and compresses it into a compact container.
"""

import os

# The default TBB layer is frequently unavailable; workqueue always is.
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from .core import (  # noqa: E402
    GaussianPrimitive,
    GaussianSet,
    PsfSpec,
    SlicePose,
    VolumeGrid,
    read_checkpoint,
    write_checkpoint,
)
from .errors import (  # noqa: E402
    CorruptContainerError,
    DegenerateCovarianceError,
    InvalidArgumentError,
    NumericFailureError,
    SliceSplatError,
    VolumeLoadError,
)
from .render import SliceImage, rasterize_slice  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "CorruptContainerError",
    "DegenerateCovarianceError",
    "GaussianPrimitive",
    "GaussianSet",
    "InvalidArgumentError",
    "NumericFailureError",
    "PsfSpec",
    "SliceImage",
    "SlicePose",
    "SliceSplatError",
    "VolumeGrid",
    "VolumeLoadError",
    "rasterize_slice",
    "read_checkpoint",
    "write_checkpoint",
]
