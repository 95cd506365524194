"""Seeded domain-shift and corruption generators, resizing and splitting.

Severity ladders are read from ``severity_tables.json`` next to this module.
Every generator is a pure function of (dataset, kind, severity, seed) and keeps
N, H, W, C, the labels and the [0, 1] range.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np
from scipy import ndimage

from .idx import ImageDataset

SHIFT_KINDS = ("tint", "invert", "noise-background", "texture-background")
CORRUPTION_KINDS = ("gaussian_noise", "shot_noise", "impulse_noise", "gaussian_blur", "contrast", "brightness")


@lru_cache(maxsize=None)
def _tables_text() -> str:
    return resources.files(__package__).joinpath("severity_tables.json").read_text()


def severity_tables() -> dict:
    return json.loads(_tables_text())


def _level(group: str, kind: str, severity: int, table=None) -> float:
    if not 1 <= severity <= 5:
        raise ValueError(f"severity must be in 1..5, got {severity}")
    ladder = table if table is not None else severity_tables()[group][kind]
    return float(ladder[severity - 1])


def _kind_code(kind: str) -> int:
    return sum(ord(c) * (i + 1) for i, c in enumerate(kind))


# ------------------------------------------------------------------ resize

def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic 1-D bilinear interpolation matrix (half-pixel centers)."""
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def to_rgb32(ds: ImageDataset, mode: str = "bilinear", size: int = 32) -> ImageDataset:
    """Resize (or zero-pad) to size x size and replicate a single channel to RGB."""
    x = ds.images
    n, h, w, c = x.shape
    if mode == "bilinear":
        rh, rw = bilinear_matrix(h, size), bilinear_matrix(w, size)
        out = np.einsum("ih,nhwc,jw->nijc", rh, x, rw)
    elif mode == "pad":
        ph, pw = size - h, size - w
        if ph < 0 or pw < 0:
            raise ValueError("pad mode needs images no larger than the target size")
        out = np.pad(x, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)))
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    out = np.clip(out, 0.0, 1.0)
    if c == 1:
        out = np.repeat(out, 3, axis=3)
    return ds.with_images(out, resized=f"{mode}{size}")


# ------------------------------------------------------------------ shifts

@dataclass(frozen=True)
class ShiftSpec:
    kind: str
    severity: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ValueError(f"unknown shift kind {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ValueError("severity must be in 1..5")


def foreground_mask(x: np.ndarray, threshold: float | None = None) -> np.ndarray:
    t = severity_tables()["foreground_threshold"] if threshold is None else threshold
    return (x.max(axis=3, keepdims=True) > t)


def apply_shift(ds: ImageDataset, spec: ShiftSpec, strength: float | None = None) -> ImageDataset:
    """Deterministic shifted copy; ``strength`` overrides the severity ladder."""
    s = _level("shifts", spec.kind, spec.severity) if strength is None else float(strength)
    x = ds.images
    n = len(x)
    rng = np.random.default_rng([spec.seed, _kind_code(spec.kind)])
    if spec.kind == "tint":
        c = x.shape[3]
        bg = rng.uniform(0, 1, (n, 1, 1, c))
        fg = (bg + rng.uniform(0.3, 0.7, (n, 1, 1, c))) % 1.0
        target = bg + (fg - bg) * x
        out = (1 - s) * x + s * target
    elif spec.kind == "invert":
        out = x + s * (1.0 - 2.0 * x)
    elif spec.kind == "noise-background":
        bgmask = ~foreground_mask(x)
        noise = rng.uniform(0, 1, x.shape)
        out = x + s * noise * bgmask
    else:
        bgmask = ~foreground_mask(x)
        h, w = x.shape[1:3]
        period = rng.integers(2, 7, size=(n, 1, 1, 1))
        phase = rng.integers(0, 6, size=(n, 2, 1, 1))
        ii = np.arange(h)[None, :, None, None]
        jj = np.arange(w)[None, None, :, None]
        checker = (((ii + phase[:, :1]) // period + (jj + phase[:, 1:]) // period) % 2).astype(np.float64)
        c0 = rng.uniform(0, 1, (n, 1, 1, x.shape[3]))
        c1 = rng.uniform(0, 1, (n, 1, 1, x.shape[3]))
        tex = c0 + (c1 - c0) * checker
        out = np.where(bgmask, (1 - s) * x + s * tex, x)
    out = np.clip(out, 0.0, 1.0)
    return ds.with_images(out, name=f"{ds.name}+{spec.kind}{spec.severity}",
                          shift={"kind": spec.kind, "severity": spec.severity, "seed": spec.seed})


# ------------------------------------------------------------- corruptions

def apply_corruption(ds: ImageDataset, kind: str, severity: int, seed: int = 0,
                     strength: float | None = None) -> ImageDataset:
    """Corrupted copy clipped to [0, 1]; ``strength`` overrides the severity ladder."""
    if kind not in CORRUPTION_KINDS:
        raise ValueError(f"unknown corruption kind {kind!r}")
    c = _level("corruptions", kind, severity) if strength is None else float(strength)
    x = ds.images
    rng = np.random.default_rng([seed, _kind_code(kind)])
    if kind == "gaussian_noise":
        out = x + rng.normal(0.0, 1.0, x.shape) * c
    elif kind == "shot_noise":
        out = x if not np.isfinite(c) else rng.poisson(x * c) / c
    elif kind == "impulse_noise":
        u = rng.uniform(0, 1, x.shape)
        out = np.where(u < c / 2, 0.0, np.where(u < c, 1.0, x))
    elif kind == "gaussian_blur":
        out = x if c == 0 else ndimage.gaussian_filter(x, sigma=(0, c, c, 0), mode="nearest")
    elif kind == "contrast":
        m = x.mean(axis=(1, 2, 3), keepdims=True)
        out = (x - m) * c + m
    else:
        out = x + c
    out = np.clip(out, 0.0, 1.0)
    return ds.with_images(out, name=f"{ds.name}+{kind}{severity}",
                          corruption={"kind": kind, "severity": severity, "seed": seed})


# ------------------------------------------------------------------- split

def split(ds: ImageDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Label-stratified, disjoint (train, val, test) split."""
    fr = np.asarray(fractions, dtype=np.float64)
    if len(fr) != 3 or (fr < 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    parts = [[], [], []]
    for cls in np.unique(ds.labels):
        idx = rng.permutation(np.flatnonzero(ds.labels == cls))
        target = fr * len(idx)
        counts = np.floor(target).astype(int)
        rest = len(idx) - counts.sum()
        # largest remainders get the leftover records
        for j in np.argsort(-(target - counts), kind="stable")[:rest]:
            counts[j] += 1
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for j in range(3):
            parts[j].append(idx[bounds[j]:bounds[j + 1]])
    names = ("train", "val", "test")
    return tuple(ds.subset(np.sort(np.concatenate(p)).astype(int), f"{ds.name}:{nm}") for p, nm in zip(parts, names))
