"""Comparison retrieval methods: brute-force kNN on global features and the all-training-set prior."""

from __future__ import annotations

import threading

import numpy as np

from contextforest.dataset import Dataset
from contextforest.forest import RetrievalSet


class KnnIndex:
    """Linear-scan L2 nearest neighbours over the training feature matrix.

    Every probe costs exactly one distance computation per training image;
    ``distance_computations`` accumulates that count across probes.
    """

    def __init__(self, train: Dataset):
        if len(train) == 0:
            raise ValueError("cannot index an empty training set")
        self.features = np.array(train.features, dtype=np.float64)
        self.features.setflags(write=False)
        self.ids = train.ids.copy()
        self._lock = threading.Lock()
        self.distance_computations = 0

    def __len__(self):
        return len(self.ids)

    @property
    def nbytes(self) -> int:
        """Size of the stored feature matrix."""
        return int(self.features.nbytes)

    def distances(self, phi: np.ndarray) -> np.ndarray:
        phi = np.asarray(phi, dtype=np.float64)
        if phi.shape != (self.features.shape[1],):
            raise ValueError(
                f"probe dimension {phi.shape[-1] if phi.ndim else 0} != index dimension {self.features.shape[1]}"
            )
        diff = self.features - phi
        d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        with self._lock:
            self.distance_computations += len(d)
        return d


def knn_retrieval(index: KnnIndex, phi: np.ndarray, k: int) -> RetrievalSet:
    """The ``k`` closest training images, ties broken by ascending id.

    The votes field carries rank order: the nearest image gets ``k``, the
    next ``k - 1`` and so on, so it sorts the same way as forest votes.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    d = index.distances(phi)
    order = np.lexsort((index.ids, d))[:k]
    return RetrievalSet(tuple((int(index.ids[i]), k - r) for r, i in enumerate(order)))


def all_train_retrieval(train: Dataset) -> RetrievalSet:
    """Every training image with one vote each: a prior independent of the probe."""
    if len(train) == 0:
        raise ValueError("training set is empty")
    return RetrievalSet(tuple((int(i), 1) for i in sorted(train.ids.tolist())))
