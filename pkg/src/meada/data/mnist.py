"""Offline access to real MNIST digits.

The full MNIST IDX files are read with :func:`meada.data.load_idx` when they
are available. For machines without them, ``mlxtend`` ships a balanced
5000-image sample of the MNIST training set (500 per digit) as a CSV, which
is loaded here and can be exported to IDX with :func:`meada.data.save_idx`.
"""
from __future__ import annotations

import gzip
from importlib import resources

import numpy as np

from .idx import ImageDataset


def mnist_sample() -> ImageDataset:
    """The 5000-digit MNIST sample bundled with mlxtend, as (5000, 28, 28, 1) in [0, 1]."""
    try:
        path = resources.files("mlxtend.data").joinpath("data", "mnist_5k.csv.gz")
    except ModuleNotFoundError:
        raise ImportError("the MNIST sample needs mlxtend: pip install 'artifact[mnist]'") from None
    with path.open("rb") as raw, gzip.open(raw) as fh:
        table = np.loadtxt(fh, delimiter=",")
    pixels = table[:, :-1].reshape(-1, 28, 28, 1)
    labels = table[:, -1].astype(np.int64)
    return ImageDataset(pixels / 255.0, labels, "mnist-5k", {"source": "mlxtend mnist_5k.csv.gz"})
