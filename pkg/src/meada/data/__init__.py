from .idx import IDXError, ImageDataset, load_idx, quantize, save_idx
from .mnist import mnist_sample
from .transforms import (CORRUPTION_KINDS, SHIFT_KINDS, ShiftSpec, apply_corruption, apply_shift,
                         severity_tables, split, to_rgb32)

__all__ = [
    "IDXError", "ImageDataset", "load_idx", "save_idx", "quantize", "mnist_sample",
    "ShiftSpec", "apply_shift", "apply_corruption", "split", "to_rgb32", "severity_tables",
    "SHIFT_KINDS", "CORRUPTION_KINDS",
]
