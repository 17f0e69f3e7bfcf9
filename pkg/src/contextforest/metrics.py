"""Box distances, Gaussian kernel density quantities and bandwidth estimation."""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from contextforest.dataset import ObjectBox

SIGMA_EPSILON = 1e-6
_SQRT_2PI = math.sqrt(2.0 * math.pi)


class PropertyKind(str, enum.Enum):
    APPEARANCE = "appearance"
    POSITION = "position"
    SCALE = "scale"


@dataclass(frozen=True)
class SigmaParams:
    """Kernel bandwidth for one property kind.

    ``center`` is the distance at which the kernel peaks. It is 0 unless set;
    ``estimate_sigma`` sets it to the self-distance of the kind, which is 1
    for the scale ratio.
    """

    sigma: float
    kind: PropertyKind
    k_nn: int = 10
    degenerate: bool = False
    center: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be finite and > 0, got {self.sigma}")
        if not math.isfinite(self.center):
            raise ValueError(f"kernel center must be finite, got {self.center}")
        if self.k_nn < 1:
            raise ValueError(f"k_nn must be >= 1, got {self.k_nn}")
        object.__setattr__(self, "kind", PropertyKind(self.kind))

    @property
    def norm(self) -> float:
        """Kernel normalisation 1 / (sigma^2 sqrt(2 pi))."""
        return 1.0 / (self.sigma**2 * _SQRT_2PI)


Boxes = Union[Sequence[ObjectBox], np.ndarray]


def property_array(boxes: Boxes, kind: PropertyKind) -> np.ndarray:
    """Stack the property of ``kind`` for every box into an (n, d) array.

    Appearance gives the descriptor, position the centre (cx, cy) and scale
    the size (w, h). Arrays are passed through unchanged.
    """
    if isinstance(boxes, np.ndarray):
        return boxes
    kind = PropertyKind(kind)
    if kind is PropertyKind.APPEARANCE:
        if not boxes:
            return np.zeros((0, 0))
        return np.stack([b.appearance for b in boxes])
    if kind is PropertyKind.POSITION:
        return np.array([(b.cx, b.cy) for b in boxes], dtype=np.float64).reshape(-1, 2)
    return np.array([(b.w, b.h) for b in boxes], dtype=np.float64).reshape(-1, 2)


def pairwise_distances(kind: PropertyKind, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(len(a), len(b)) matrix of distances between property arrays."""
    kind = PropertyKind(kind)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"property dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if kind is PropertyKind.SCALE:
        aw, bw = a[:, None, 0], b[None, :, 0]
        ah, bh = a[:, None, 1], b[None, :, 1]
        return np.maximum(ah / bh, bh / ah) * np.maximum(aw / bw, bw / aw)
    # explicit differences rather than the dot-product expansion: no cancellation
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def distance(kind: PropertyKind, a: ObjectBox, b: ObjectBox) -> float:
    kind = PropertyKind(kind)
    if kind is PropertyKind.APPEARANCE:
        if a.appearance.shape != b.appearance.shape:
            raise ValueError(
                f"appearance dimension mismatch: {a.appearance.shape[0]} vs {b.appearance.shape[0]}"
            )
        return float(np.linalg.norm(a.appearance - b.appearance))
    if kind is PropertyKind.POSITION:
        return math.hypot(a.cx - b.cx, a.cy - b.cy)
    return max(a.h / b.h, b.h / a.h) * max(a.w / b.w, b.w / a.w)


def kernel(d: np.ndarray, sigma: float) -> np.ndarray:
    """Unnormalised Gaussian kernel exp(-d^2 / (2 sigma^2))."""
    d = np.asarray(d, dtype=np.float64)
    return np.exp(-0.5 * (d / sigma) ** 2)


def kernel_offset(kind: PropertyKind) -> float:
    """Distance between a box and itself: 1 for the scale ratio, 0 otherwise."""
    return 1.0 if PropertyKind(kind) is PropertyKind.SCALE else 0.0


def pairwise_kernel(kind: PropertyKind, a: np.ndarray, b: np.ndarray, sigma: float,
                    center: float = 0.0) -> np.ndarray:
    """Kernel matrix exp(-(D - center)^2 / (2 sigma^2)) between property arrays."""
    d = pairwise_distances(kind, a, b)
    if center:
        d -= center
    return kernel(d, sigma)


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield start, min(start + size, n)


def _chunk_rows(dim: int, m: int) -> int:
    # keep the (rows, m, dim) difference tensor around 16 MB
    return max(1, 2_000_000 // max(1, m * max(dim, 1)))


def kernel_sum(kind: PropertyKind, a: np.ndarray, b: np.ndarray, sigma: float, center: float = 0.0) -> float:
    """Sum of kernel values over all pairs of rows of ``a`` and ``b``."""
    if len(a) == 0 or len(b) == 0:
        return 0.0
    step = _chunk_rows(a.shape[1], len(b))
    total = 0.0
    for s, e in _chunks(len(a), step):
        total += float(pairwise_kernel(kind, a[s:e], b, sigma, center).sum())
    return total


SPREADS = ("rms", "std")


def estimate_sigma(boxes: Boxes, kind: PropertyKind, k_nn: int = 10, spread: str = "rms",
                   center: float | None = None) -> SigmaParams:
    """Bandwidth from the training boxes.

    For each box find its ``k_nn`` nearest other boxes and measure how far
    they spread around it: with ``spread="rms"`` the root mean square of their
    deviations from the kernel center, with ``spread="std"`` the population
    standard deviation of the k distances. Sigma is the median over all boxes.
    A zero result is replaced by ``SIGMA_EPSILON`` and flagged as degenerate.

    ``center`` defaults to the self-distance of the kind (1 for scale, 0
    otherwise), so a box sits at the kernel peak of its own copy.
    """
    kind = PropertyKind(kind)
    if spread not in SPREADS:
        raise ValueError(f"spread must be one of {SPREADS}, got {spread!r}")
    props = property_array(boxes, kind)
    n = len(props)
    if k_nn < 1:
        raise ValueError(f"k_nn must be >= 1, got {k_nn}")
    if n < k_nn + 1:
        raise ValueError(f"need at least k_nn + 1 = {k_nn + 1} boxes to estimate sigma, got {n}")

    per_box = np.empty(n)
    off = kernel_offset(kind) if center is None else float(center)
    step = _chunk_rows(props.shape[1], n)
    for s, e in _chunks(n, step):
        d = pairwise_distances(kind, props[s:e], props)
        d[np.arange(e - s), np.arange(s, e)] = np.inf  # exclude self, keep duplicates
        nearest = np.partition(d, k_nn - 1, axis=1)[:, :k_nn]
        if spread == "rms":
            per_box[s:e] = np.sqrt(np.mean((nearest - off) ** 2, axis=1))
        else:
            per_box[s:e] = nearest.std(axis=1)
    sigma = float(np.median(per_box))
    if sigma <= 0.0:
        warnings.warn(
            f"{kind.value} sigma estimate is zero (duplicate boxes); using {SIGMA_EPSILON}",
            RuntimeWarning,
            stacklevel=2,
        )
        return SigmaParams(SIGMA_EPSILON, kind, k_nn, degenerate=True, center=off)
    return SigmaParams(sigma, kind, k_nn, center=off)


def compactness(boxes: Boxes, kind: PropertyKind, sigma: SigmaParams) -> float:
    """Kernel density compactness of a box set, excluding self pairs; 0 for N <= 1."""
    props = property_array(boxes, kind)
    n = len(props)
    if n <= 1:
        return 0.0
    s = sigma.sigma
    step = _chunk_rows(props.shape[1], n)
    total = 0.0
    for a, b in _chunks(n, step):
        k = pairwise_kernel(kind, props[a:b], props, s, sigma.center)
        k[np.arange(b - a), np.arange(a, b)] = 0.0
        total += float(k.sum())
    return sigma.norm * total / (n * n)


def kde_window_score(w: ObjectBox | np.ndarray, ref_boxes: Boxes, kind: PropertyKind, sigma: SigmaParams) -> float:
    """Gaussian KDE of the reference boxes evaluated at window ``w``."""
    ref = property_array(ref_boxes, kind)
    if len(ref) == 0:
        raise ValueError("kde_window_score needs at least one reference box")
    q = property_array([w], kind) if isinstance(w, ObjectBox) else np.atleast_2d(w)
    return sigma.norm * kernel_sum(kind, q, ref, sigma.sigma, sigma.center) / len(ref)


def kde_window_scores(windows: Boxes, ref_boxes: Boxes, kind: PropertyKind, sigma: SigmaParams) -> np.ndarray:
    """Vectorised ``kde_window_score`` for many windows."""
    q = property_array(windows, kind)
    ref = property_array(ref_boxes, kind)
    if len(ref) == 0:
        raise ValueError("kde_window_score needs at least one reference box")
    out = np.empty(len(q))
    step = _chunk_rows(ref.shape[1], len(ref))
    for s, e in _chunks(len(q), step):
        out[s:e] = pairwise_kernel(kind, q[s:e], ref, sigma.sigma, sigma.center).sum(axis=1)
    return sigma.norm * out / len(ref)


def retrieval_quality(test_boxes: Boxes, retrieved_boxes: Boxes, kind: PropertyKind, sigma: SigmaParams) -> float:
    """Mean kernel density between every test box and every retrieved box."""
    t = property_array(test_boxes, kind)
    r = property_array(retrieved_boxes, kind)
    if len(t) == 0 or len(r) == 0:
        raise ValueError("retrieval_quality needs non-empty test and retrieved box lists")
    return sigma.norm * kernel_sum(kind, t, r, sigma.sigma, sigma.center) / (len(t) * len(r))
