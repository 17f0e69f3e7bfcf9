"""A synthetic multi-component detector with an abstract runtime cost, and AP evaluation.

Each component has an appearance template. Running the detector on an image
scores every candidate window against the templates of the active
components only; the image's cost is proportional to how many components
ran. Candidate windows are the ground-truth boxes plus random distractors,
so recall depends only on which components were active and on score noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from contextforest.dataset import Dataset, ImageRecord
from contextforest.rescore import Detection, iou_matrix, geometry


@dataclass(frozen=True)
class MockDetector:
    templates: np.ndarray  # (C, d_app), row c is component c
    score_noise: float = 0.1
    cost_per_component: float = 1.0
    distractor_rate: int = 10
    distractor_size: tuple[float, float] = (0.03, 0.5)

    def __post_init__(self):
        t = np.asarray(self.templates, dtype=np.float64)
        if t.ndim != 2 or len(t) == 0:
            raise ValueError("templates must be a non-empty (C, d_app) array")
        object.__setattr__(self, "templates", t)
        if not self.score_noise >= 0:
            raise ValueError("score_noise must be >= 0")
        if not (math.isfinite(self.cost_per_component) and self.cost_per_component > 0):
            raise ValueError("cost_per_component must be finite and > 0")
        if self.distractor_rate < 0:
            raise ValueError("distractor_rate must be >= 0")
        lo, hi = self.distractor_size
        if not 0 < lo <= hi <= 1:
            raise ValueError("distractor_size must satisfy 0 < lo <= hi <= 1")

    @property
    def num_components(self) -> int:
        return len(self.templates)

    def image_cost(self, active: Iterable[int]) -> float:
        return len(set(active)) * self.cost_per_component


def _candidates(det: MockDetector, img: ImageRecord, rng: np.random.Generator):
    """Geometry (n, 4) and appearance (n, d_app) of every candidate window."""
    d_app = det.templates.shape[1]
    gt_geo = np.array([(b.cx, b.cy, b.w, b.h) for b in img.boxes], dtype=np.float64).reshape(-1, 4)
    gt_app = np.array([b.appearance for b in img.boxes], dtype=np.float64).reshape(-1, d_app)
    k = det.distractor_rate
    lo, hi = det.distractor_size
    centres = rng.random((k, 2))
    sizes = np.exp(rng.uniform(math.log(lo), math.log(hi), size=(k, 2)))
    app = rng.standard_normal((k, d_app))
    app /= np.maximum(np.linalg.norm(app, axis=1, keepdims=True), 1e-12)
    geo = np.vstack([gt_geo, np.hstack([centres, sizes])])
    return geo, np.vstack([gt_app, app])


def run_detector(det: MockDetector, img: ImageRecord, active: Iterable[int], seed: int) -> list[Detection]:
    """Detections of the active components on one image.

    Candidates and score noise depend only on ``seed`` and the image id, never
    on the active set, so a component scores a window identically whichever
    other components run alongside it.
    """
    active = sorted(set(int(c) for c in active))
    for c in active:
        if not 0 <= c < det.num_components:
            raise ValueError(f"unknown component id {c}; detector has {det.num_components}")
    if not active:
        return []
    rng = np.random.default_rng([seed, img.id])
    geo, app = _candidates(det, img, rng)
    noise = det.score_noise * rng.standard_normal((len(geo), det.num_components))
    dist = np.linalg.norm(app[:, None, :] - det.templates[None, active, :], axis=2)
    scores = -dist + noise[:, active]
    best = np.argmax(scores, axis=1)  # first maximum, i.e. the lowest component id
    return [
        Detection.at(img.id, *geo[i], float(scores[i, j]), active[j])
        for i, j in enumerate(best)
    ]


@dataclass(frozen=True)
class APResult:
    ap: float
    recall: np.ndarray = field(repr=False)
    precision: np.ndarray = field(repr=False)  # monotone envelope, same length as recall
    tp: int = 0
    fp: int = 0
    num_gt: int = 0

    def area(self) -> float:
        """Area under the stored step curve."""
        return float(np.sum(np.diff(np.concatenate([[0.0], self.recall])) * self.precision))


def evaluate_ap(dets: Sequence[Detection], gt: Dataset, iou_threshold: float = 0.5) -> APResult:
    """Continuous (area under the interpolated curve) average precision.

    Detections are visited best first, ties by ascending image id then box
    coordinates. Each one is matched to the unmatched ground-truth box of its
    image with the highest IoU, provided that IoU reaches the threshold;
    otherwise, including duplicates of already matched boxes, it is a false
    positive.
    """
    num_gt = sum(len(img.boxes) for img in gt.images)
    ordered = sorted(dets, key=lambda d: d.sort_key)
    gt_geo = {}
    for d in ordered:
        if d.image_id not in gt_geo:
            try:
                img = gt.image(d.image_id)
            except KeyError:
                raise ValueError(f"detection refers to image {d.image_id}, which is not in the ground truth") from None
            gt_geo[d.image_id] = (geometry(img.boxes), np.zeros(len(img.boxes), dtype=bool))
    hit = np.zeros(len(ordered), dtype=bool)
    for i, d in enumerate(ordered):
        boxes, matched = gt_geo[d.image_id]
        if len(boxes) == 0:
            continue
        ov = iou_matrix(geometry([d]), boxes)[0]
        ov[matched] = -1.0
        j = int(np.argmax(ov))
        if ov[j] >= iou_threshold:
            matched[j] = True
            hit[i] = True
    tp = np.cumsum(hit)
    fp = np.cumsum(~hit)
    if num_gt == 0 or len(ordered) == 0:
        return APResult(0.0, np.zeros(0), np.zeros(0), int(tp[-1]) if len(tp) else 0,
                        int(fp[-1]) if len(fp) else 0, num_gt)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = float(np.sum(np.diff(np.concatenate([[0.0], recall])) * envelope))
    return APResult(ap, recall, envelope, int(tp[-1]), int(fp[-1]), num_gt)


@dataclass(frozen=True)
class SweepRun:
    """Detector run over a test set at one operating point."""

    gamma: float
    active_sets: tuple[frozenset[int], ...]
    cost: float
    result: APResult


@dataclass(frozen=True)
class SpeedupRow:
    gamma: float
    mean_fraction: float
    total_cost: float
    ap: float
    ap_ratio: float


def speedup_report(runs: Sequence[SweepRun], num_components: int, full_ap: float | None = None) -> list[SpeedupRow]:
    """One row per run, ordered by gamma.

    ``ap_ratio`` is relative to ``full_ap``; when that is not given, the run
    that used every component on every image serves as the reference.
    """
    if full_ap is None:
        full = [r for r in runs if all(len(a) == num_components for a in r.active_sets)]
        full_ap = full[0].result.ap if full else float("nan")
    rows = []
    for r in sorted(runs, key=lambda r: r.gamma):
        frac = float(np.mean([len(a) for a in r.active_sets])) / num_components if r.active_sets else 0.0
        ratio = r.result.ap / full_ap if full_ap else float("nan")
        rows.append(SpeedupRow(r.gamma, frac, r.cost, r.result.ap, ratio))
    return rows
