"""Rescoring detections with location and scale likelihoods from retrieved boxes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from contextforest.dataset import Dataset, DatasetError, ObjectBox
from contextforest.metrics import PropertyKind, SigmaParams, kde_window_scores, property_array

DEFAULT_GRID_VALUES = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0)
_NO_APPEARANCE = np.zeros(0)


@dataclass(frozen=True)
class Detection:
    image_id: int
    box: ObjectBox
    detector_score: float
    component_id: int | None = None

    def __post_init__(self):
        if not math.isfinite(self.detector_score):
            raise ValueError(f"detection score must be finite, got {self.detector_score}")

    @classmethod
    def at(cls, image_id: int, cx: float, cy: float, w: float, h: float, score: float,
           component_id: int | None = None) -> "Detection":
        """Detection from bare geometry, without an appearance vector."""
        return cls(int(image_id), ObjectBox(cx, cy, w, h, _NO_APPEARANCE), float(score), component_id)

    def with_score(self, score: float) -> "Detection":
        return Detection(self.image_id, self.box, float(score), self.component_id)

    @property
    def sort_key(self) -> tuple:
        """Best first, ties by ascending image id then box coordinates."""
        b = self.box
        return (-self.detector_score, self.image_id, b.cx, b.cy, b.w, b.h)


@dataclass(frozen=True)
class CombineWeights:
    alpha_pos: float = 0.0
    alpha_scale: float = 0.0

    def __post_init__(self):
        for name in ("alpha_pos", "alpha_scale"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def default_grid() -> list[CombineWeights]:
    return [CombineWeights(a, b) for a in DEFAULT_GRID_VALUES for b in DEFAULT_GRID_VALUES]


def location_scores(dets: Sequence[Detection], retr_boxes: Sequence[ObjectBox], sigma_pos: SigmaParams,
                    sigma_scale: SigmaParams, scale_boxes: Sequence[ObjectBox] | None = None) -> np.ndarray:
    """(n, 2) array of position and scale densities of each detection.

    ``retr_boxes`` are the boxes of the retrieval set used for position; the
    scale density uses ``scale_boxes`` when given (the retrieval set of a
    separate scale forest) and ``retr_boxes`` otherwise.
    """
    scale_boxes = retr_boxes if scale_boxes is None else scale_boxes
    if len(retr_boxes) == 0 or len(scale_boxes) == 0:
        raise ValueError("location_scores needs a non-empty set of retrieved boxes")
    out = np.zeros((len(dets), 2))
    if not dets:
        return out
    windows = [d.box for d in dets]
    out[:, 0] = kde_window_scores(property_array(windows, PropertyKind.POSITION),
                                  property_array(retr_boxes, PropertyKind.POSITION), PropertyKind.POSITION, sigma_pos)
    out[:, 1] = kde_window_scores(property_array(windows, PropertyKind.SCALE),
                                  property_array(scale_boxes, PropertyKind.SCALE), PropertyKind.SCALE, sigma_scale)
    return out


def combine(det: Detection, pos_score: float, scale_score: float, wts: CombineWeights) -> float:
    return det.detector_score + wts.alpha_pos * pos_score + wts.alpha_scale * scale_score


def rescored(dets: Sequence[Detection], geo: np.ndarray, wts: CombineWeights) -> list[Detection]:
    """Detections with scores replaced by ``combine`` against rows of ``geo``."""
    geo = np.asarray(geo, dtype=np.float64).reshape(len(dets), 2)
    return [d.with_score(combine(d, p, s, wts)) for d, (p, s) in zip(dets, geo)]


def iou(a: ObjectBox, b: ObjectBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between rows of two (n, 4) arrays of (cx, cy, w, h)."""
    a0, a1 = a[:, None, :2] - a[:, None, 2:] / 2, a[:, None, :2] + a[:, None, 2:] / 2
    b0, b1 = b[None, :, :2] - b[None, :, 2:] / 2, b[None, :, :2] + b[None, :, 2:] / 2
    wh = np.clip(np.minimum(a1, b1) - np.maximum(a0, b0), 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def geometry(items: Sequence[Detection | ObjectBox]) -> np.ndarray:
    """(n, 4) array of (cx, cy, w, h) for detections or boxes."""
    boxes = [d.box if isinstance(d, Detection) else d for d in items]
    return np.array([(b.cx, b.cy, b.w, b.h) for b in boxes], dtype=np.float64).reshape(-1, 4)


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy non-maxima suppression within each image.

    Detections are visited best first; one is kept iff its IoU with every
    already kept detection of the same image is at most ``iou_threshold``.
    The result is sorted best first.
    """
    ordered = sorted(dets, key=lambda d: d.sort_key)
    by_image: dict[int, list[int]] = {}
    for i, d in enumerate(ordered):
        by_image.setdefault(d.image_id, []).append(i)
    keep = np.zeros(len(ordered), dtype=bool)
    for members in by_image.values():
        ov = iou_matrix(geometry([ordered[i] for i in members]), geometry([ordered[i] for i in members]))
        kept: list[int] = []
        for j in range(len(members)):
            if all(ov[j, k] <= iou_threshold for k in kept):
                kept.append(j)
        keep[[members[j] for j in kept]] = True
    return [d for d, k in zip(ordered, keep) if k]


def fit_weights(val: Dataset, dets: Sequence[Detection], geo: np.ndarray,
                grid: Iterable[CombineWeights] | None = None, iou_threshold: float = 0.5,
                nms_threshold: float = 0.5) -> tuple[CombineWeights, float]:
    """Grid point with the highest validation AP after rescoring and NMS.

    Ties go to the smaller weights (smaller sum, then smaller alpha_pos), so
    the result does not depend on the order of ``grid``. Returns the weights
    and their AP.
    """
    from contextforest.mockdet import evaluate_ap

    grid = list(default_grid() if grid is None else grid)
    if not grid:
        raise ValueError("weight grid is empty")
    best = None
    for wts in sorted(set(grid), key=lambda g: (g.alpha_pos + g.alpha_scale, g.alpha_pos, g.alpha_scale)):
        ap = evaluate_ap(nms(rescored(dets, geo, wts), nms_threshold), val, iou_threshold).ap
        if best is None or ap > best[1]:
            best = (wts, ap)
    return best


def detection_to_json(d: Detection) -> dict:
    b = d.box
    return {"image_id": d.image_id, "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h,
            "score": d.detector_score, "component": d.component_id}


def detection_from_json(obj: dict) -> Detection:
    missing = {"image_id", "cx", "cy", "w", "h", "score"} - set(obj)
    if missing:
        raise DatasetError(f"detection record missing fields {sorted(missing)}")
    comp = obj.get("component")
    return Detection.at(obj["image_id"], obj["cx"], obj["cy"], obj["w"], obj["h"], obj["score"],
                        None if comp is None else int(comp))


def save_detections(dets: Iterable[Detection], path: str | Path) -> None:
    with open(path, "w") as fh:
        for d in dets:
            fh.write(json.dumps(detection_to_json(d)) + "\n")


def load_detections(path: str | Path) -> list[Detection]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(detection_from_json(json.loads(line)))
            except (json.JSONDecodeError, DatasetError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{n}: {exc}") from exc
    return out
