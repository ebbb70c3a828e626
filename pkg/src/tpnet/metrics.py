"""Evaluation statistics: rank/linear correlations and reference metrics.

PLCC/SRCC follow their textbook definitions with no nonlinear remapping
stage; SRCC uses average ranks for ties. PSNR of identical images
returns the typed :data:`PSNR_INFINITE` sentinel instead of a float, so
"perfect" results stay explicit. SSIM uses the standard 11x11 Gaussian
(sigma 1.5) window with k1=0.01, k2=0.03 on the ITU-R BT.601 luma
(0.299 R + 0.587 G + 0.114 B) of color inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DataError, NumericError, ShapeError

__all__ = [
    "PSNR_INFINITE",
    "ScoredPair",
    "MetricsReport",
    "plcc",
    "srcc",
    "average_ranks",
    "psnr",
    "ssim",
    "rgb_to_luma",
    "evaluate",
]

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class _InfinitePSNR:
    """Sentinel for the PSNR of identical images; greater than any float."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "inf"

    def __float__(self):
        return math.inf

    def __eq__(self, other):
        return isinstance(other, _InfinitePSNR)

    def __hash__(self):
        return hash("psnr-infinite")

    def __gt__(self, other):
        return not isinstance(other, _InfinitePSNR)

    def __ge__(self, other):
        return True

    def __lt__(self, other):
        return False

    def __le__(self, other):
        return isinstance(other, _InfinitePSNR)


PSNR_INFINITE = _InfinitePSNR()


@dataclass(frozen=True)
class ScoredPair:
    id: str
    predicted: float
    mos: float


@dataclass
class MetricsReport:
    plcc: float
    srcc: float
    n: int
    per_subset: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"plcc": self.plcc, "srcc": self.srcc, "n": self.n})


def _as_vectors(xs, ys):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.ndim != 1 or ys.ndim != 1:
        raise ShapeError("correlation inputs must be 1-D sequences")
    if xs.shape != ys.shape:
        raise ShapeError(f"length mismatch: {xs.shape[0]} vs {ys.shape[0]}")
    if xs.shape[0] < 2:
        raise DataError(f"need at least 2 points, got {xs.shape[0]}")
    if not (np.isfinite(xs).all() and np.isfinite(ys).all()):
        raise NumericError("correlation inputs contain non-finite values")
    return xs, ys


def plcc(xs, ys) -> float:
    """Pearson's linear correlation coefficient."""
    xs, ys = _as_vectors(xs, ys)
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    vx = float(dx @ dx)
    vy = float(dy @ dy)
    if vx == 0.0 or vy == 0.0:
        raise NumericError("correlation undefined for a constant input")
    r = float(dx @ dy) / math.sqrt(vx * vy)
    return max(-1.0, min(1.0, r))


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values receive the mean of their rank range."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.shape[0], dtype=np.float64)
    sv = v[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def srcc(xs, ys) -> float:
    """Spearman's rank correlation: Pearson correlation of average ranks."""
    xs, ys = _as_vectors(xs, ys)
    return plcc(average_ranks(xs), average_ranks(ys))


def psnr(ref, test, max_value: float = 255.0):
    """Peak signal-to-noise ratio in dB; identical inputs give PSNR_INFINITE."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ShapeError(f"image dimensions differ: {ref.shape} vs {test.shape}")
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        return PSNR_INFINITE
    return 10.0 * math.log10(max_value * max_value / mse)


def rgb_to_luma(image: np.ndarray) -> np.ndarray:
    """HxWx3 -> HxW using BT.601 weights."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected HxWx3 image, got shape {image.shape}")
    w = np.asarray(LUMA_WEIGHTS, dtype=np.float64)
    return image @ w


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = (len(g) - 1) // 2
    t = correlate1d(img, g, axis=0, mode="constant")
    t = correlate1d(t, g, axis=1, mode="constant")
    return t[r:-r, r:-r]


def ssim(
    ref,
    test,
    k1: float = 0.01,
    k2: float = 0.03,
    max_value: float = 255.0,
    window_size: int = 11,
    sigma: float = 1.5,
) -> float:
    """Mean structural similarity over the valid local-window region."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ShapeError(f"image dimensions differ: {ref.shape} vs {test.shape}")
    if ref.ndim == 3:
        ref = rgb_to_luma(ref)
        test = rgb_to_luma(test)
    if ref.ndim != 2:
        raise ShapeError(f"expected 2-D or HxWx3 images, got shape {ref.shape}")
    if min(ref.shape) < window_size:
        raise ShapeError(
            f"image sides must be at least the {window_size}-pixel window, got {ref.shape}"
        )
    g = _gaussian_window(window_size, sigma)
    c1 = (k1 * max_value) ** 2
    c2 = (k2 * max_value) ** 2
    mu1 = _filter_valid(ref, g)
    mu2 = _filter_valid(test, g)
    s11 = _filter_valid(ref * ref, g) - mu1 * mu1
    s22 = _filter_valid(test * test, g) - mu2 * mu2
    s12 = _filter_valid(ref * test, g) - mu1 * mu2
    num = (2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def evaluate(pairs) -> MetricsReport:
    """PLCC/SRCC report over scored pairs."""
    pairs = list(pairs)
    if len(pairs) < 2:
        raise DataError(f"need at least 2 scored pairs, got {len(pairs)}")
    preds = [p.predicted for p in pairs]
    moses = [p.mos for p in pairs]
    return MetricsReport(plcc=plcc(preds, moses), srcc=srcc(preds, moses), n=len(pairs))
