from .manifest import DatasetManifest, split_dataset
from .phantom import PhantomSpec, VolumeSet, generate_phantom
from .volume_io import (
    BadDimensionError,
    BadMagicError,
    ExtentOverflowError,
    TruncatedPayloadError,
    UnsupportedDatatypeError,
    VolumeFormatError,
    load_nifti,
    load_raw,
    save_raw,
    write_nifti,
)

__all__ = [
    "BadDimensionError",
    "BadMagicError",
    "DatasetManifest",
    "ExtentOverflowError",
    "PhantomSpec",
    "TruncatedPayloadError",
    "UnsupportedDatatypeError",
    "VolumeFormatError",
    "VolumeSet",
    "generate_phantom",
    "load_nifti",
    "load_raw",
    "save_raw",
    "split_dataset",
    "write_nifti",
]
