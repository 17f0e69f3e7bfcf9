"""Choosing detector components for a test image from its retrieval set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from contextforest.dataset import Dataset, ImageRecord
from contextforest.forest import RetrievalSet


@dataclass(frozen=True)
class ComponentDistribution:
    """Probabilities over component ids 0..C-1; ``empty`` for boxless images."""

    probs: np.ndarray
    empty: bool = False

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        if not self.empty:
            if np.any(p < 0):
                raise ValueError("negative component probability")
            if abs(p.sum() - 1.0) > 1e-9:
                raise ValueError(f"component probabilities sum to {p.sum()}, not 1")

    @property
    def num_components(self) -> int:
        return len(self.probs)

    def as_dict(self) -> dict[int, float]:
        return {int(c): float(p) for c, p in enumerate(self.probs) if p > 0}


@dataclass(frozen=True)
class SelectionResult:
    selected: tuple[int, ...]
    mass: float
    posterior: ComponentDistribution


def image_component_distribution(img: ImageRecord, num_components: int) -> ComponentDistribution:
    """Fraction of the image's boxes belonging to each component."""
    if not img.boxes:
        return ComponentDistribution(np.zeros(num_components), empty=True)
    comps = []
    for b in img.boxes:
        if b.component_id is None:
            raise ValueError(f"image {img.id} has a box without a component id")
        if not 0 <= b.component_id < num_components:
            raise ValueError(f"image {img.id}: component {b.component_id} outside [0, {num_components})")
        comps.append(b.component_id)
    counts = np.bincount(comps, minlength=num_components).astype(np.float64)
    return ComponentDistribution(counts / counts.sum())


def posterior(retr: RetrievalSet, train: Dataset, num_components: int) -> ComponentDistribution:
    """Unweighted mean of the retrieved images' component distributions.

    Boxless members carry no component evidence and are left out of the mean.
    """
    if len(retr) == 0:
        raise ValueError("empty retrieval set")
    dists = [image_component_distribution(train.image(i), num_components) for i in retr.image_ids]
    dists = [d.probs for d in dists if not d.empty]
    if not dists:
        raise ValueError("every image in the retrieval set is boxless; no component posterior")
    mean = np.mean(dists, axis=0)
    return ComponentDistribution(mean / mean.sum())


def select_components(post: ComponentDistribution, gamma: float) -> SelectionResult:
    """Greedily take the most probable components until their mass exceeds ``gamma``.

    Ties go to the lower component id. Zero-mass components are never taken,
    so gamma = 1 selects every component with positive mass, not all of them.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    p = post.probs
    order = np.lexsort((np.arange(len(p)), -p))
    selected = []
    mass = 0.0
    for c in order:
        if p[c] <= 0 or mass > gamma:
            break
        selected.append(int(c))
        mass += float(p[c])
    return SelectionResult(tuple(selected), mass, post)
