"""3D membrane-based cell segmentation: watershed plus dense-CRF refinement."""

from .volume import (DataError, LabelVolume, ScalarVolume, VolumeFormatError,
                     VoxelCoord, import_raw, read_volume, write_volume)

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "LabelVolume",
    "ScalarVolume",
    "VolumeFormatError",
    "VoxelCoord",
    "import_raw",
    "read_volume",
    "write_volume",
]
