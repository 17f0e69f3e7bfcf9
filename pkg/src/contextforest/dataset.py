"""Annotated image records, JSON-lines I/O, splitting and the synthetic scene generator.

Box geometry is kept in normalized image coordinates: ``cx``/``cy`` are the
box centre as a fraction of image width/height and ``w``/``h`` the box size
as a fraction of the image size.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DatasetError(ValueError):
    """Raised for malformed dataset files or records violating invariants."""


@dataclass(frozen=True, eq=False)
class ObjectBox:
    cx: float
    cy: float
    w: float
    h: float
    appearance: np.ndarray
    component_id: int | None = None

    def __post_init__(self):
        app = np.asarray(self.appearance, dtype=np.float64)
        if app.ndim != 1:
            raise DatasetError("appearance must be a 1-d vector")
        object.__setattr__(self, "appearance", app)
        for name in ("cx", "cy"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise DatasetError(f"{name}={v} outside [0, 1]")
        for name in ("w", "h"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise DatasetError(f"{name}={v} outside (0, 1]")
        if not np.all(np.isfinite(app)):
            raise DatasetError("appearance has non-finite entries")
        if self.component_id is not None and self.component_id < 0:
            raise DatasetError(f"component_id={self.component_id} is negative")

    def __eq__(self, other):
        if not isinstance(other, ObjectBox):
            return NotImplemented
        return (
            (self.cx, self.cy, self.w, self.h, self.component_id)
            == (other.cx, other.cy, other.w, other.h, other.component_id)
            and np.array_equal(self.appearance, other.appearance)
        )

    __hash__ = None

    @property
    def corners(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) in normalized coordinates."""
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )


@dataclass(frozen=True, eq=False)
class ImageRecord:
    id: int
    global_features: np.ndarray
    boxes: tuple[ObjectBox, ...] = ()

    def __post_init__(self):
        phi = np.asarray(self.global_features, dtype=np.float64)
        if phi.ndim != 1:
            raise DatasetError("global_features must be a 1-d vector")
        if not np.all(np.isfinite(phi)):
            raise DatasetError(f"image {self.id}: global_features has non-finite entries")
        object.__setattr__(self, "global_features", phi)
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def __eq__(self, other):
        if not isinstance(other, ImageRecord):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.global_features, other.global_features)
            and self.boxes == other.boxes
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable collection of images with fixed feature dimensions."""

    images: tuple[ImageRecord, ...]
    d_glob: int
    d_app: int

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        if self.d_glob <= 0 or self.d_app <= 0:
            raise DatasetError(f"dimensions must be positive, got d_glob={self.d_glob}, d_app={self.d_app}")
        seen = set()
        for img in self.images:
            if img.id in seen:
                raise DatasetError(f"duplicate image id {img.id}")
            seen.add(img.id)
            if img.global_features.shape[0] != self.d_glob:
                raise DatasetError(
                    f"image {img.id}: global feature dimension {img.global_features.shape[0]} != d_glob {self.d_glob}"
                )
            for b in img.boxes:
                if b.appearance.shape[0] != self.d_app:
                    raise DatasetError(
                        f"image {img.id}: appearance dimension {b.appearance.shape[0]} != d_app {self.d_app}"
                    )

    def __len__(self):
        return len(self.images)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.d_glob, self.d_app) == (other.d_glob, other.d_app) and self.images == other.images

    __hash__ = None

    @cached_property
    def ids(self) -> np.ndarray:
        return np.array([img.id for img in self.images], dtype=np.int64)

    @cached_property
    def features(self) -> np.ndarray:
        """(n_images, d_glob) matrix of global features, read-only."""
        if not self.images:
            return np.zeros((0, self.d_glob))
        m = np.stack([img.global_features for img in self.images])
        m.setflags(write=False)
        return m

    @cached_property
    def index_of(self) -> dict[int, int]:
        return {img.id: i for i, img in enumerate(self.images)}

    @cached_property
    def num_components(self) -> int:
        comps = [b.component_id for img in self.images for b in img.boxes if b.component_id is not None]
        return max(comps) + 1 if comps else 0

    def image(self, image_id: int) -> ImageRecord:
        return self.images[self.index_of[image_id]]

    def all_boxes(self) -> list[ObjectBox]:
        return [b for img in self.images for b in img.boxes]

    def subset(self, image_ids: Iterable[int]) -> "Dataset":
        keep = set(image_ids)
        return Dataset(tuple(img for img in self.images if img.id in keep), self.d_glob, self.d_app)


# --------------------------------------------------------------------------
# JSON-lines I/O


def _box_to_json(b: ObjectBox) -> dict:
    return {
        "cx": b.cx,
        "cy": b.cy,
        "w": b.w,
        "h": b.h,
        "app": b.appearance.tolist(),
        "component": b.component_id,
    }


def dumps_dataset(ds: Dataset) -> str:
    lines = [json.dumps({"d_glob": ds.d_glob, "d_app": ds.d_app})]
    for img in ds.images:
        rec = {
            "id": img.id,
            "phi": img.global_features.tolist(),
            "boxes": [_box_to_json(b) for b in img.boxes],
        }
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text(dumps_dataset(ds))


def _require(rec: dict, key: str, lineno: int):
    if key not in rec:
        raise DatasetError(f"line {lineno}: missing field '{key}'")
    return rec[key]


def _parse_vector(value, name: str, lineno: int) -> np.ndarray:
    if not isinstance(value, list) or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in value
    ):
        raise DatasetError(f"line {lineno}: field '{name}' must be a list of numbers")
    return np.asarray(value, dtype=np.float64)


def _parse_box(raw, lineno: int, d_app: int) -> ObjectBox:
    if not isinstance(raw, dict):
        raise DatasetError(f"line {lineno}: field 'boxes' entries must be objects")
    geom = {}
    for key in ("cx", "cy", "w", "h"):
        v = _require(raw, key, lineno)
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise DatasetError(f"line {lineno}: field '{key}' must be a number")
        geom[key] = float(v)
    app = _parse_vector(_require(raw, "app", lineno), "app", lineno)
    if app.shape[0] != d_app:
        raise DatasetError(f"line {lineno}: appearance dimension {app.shape[0]} != header d_app {d_app}")
    comp = raw.get("component")
    if comp is not None and (not isinstance(comp, int) or isinstance(comp, bool)):
        raise DatasetError(f"line {lineno}: field 'component' must be an integer or null")
    try:
        return ObjectBox(appearance=app, component_id=comp, **geom)
    except DatasetError as e:
        raise DatasetError(f"line {lineno}: {e}") from None


def load_dataset(path: str | Path) -> Dataset:
    """Read a JSON-lines dataset file: a header line followed by one image per line."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise DatasetError("line 1: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetError(f"line 1: invalid JSON ({e.msg})") from None
    if not isinstance(header, dict):
        raise DatasetError("line 1: header must be an object")
    d_glob = _require(header, "d_glob", 1)
    d_app = _require(header, "d_app", 1)
    for name, v in (("d_glob", d_glob), ("d_app", d_app)):
        if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
            raise DatasetError(f"line 1: field '{name}' must be a positive integer")

    images = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetError(f"line {lineno}: invalid JSON ({e.msg})") from None
        if not isinstance(rec, dict):
            raise DatasetError(f"line {lineno}: record must be an object")
        image_id = _require(rec, "id", lineno)
        if not isinstance(image_id, int) or isinstance(image_id, bool):
            raise DatasetError(f"line {lineno}: field 'id' must be an integer")
        if image_id in seen:
            raise DatasetError(f"line {lineno}: field 'id' duplicates image {image_id}")
        seen.add(image_id)
        phi = _parse_vector(_require(rec, "phi", lineno), "phi", lineno)
        if phi.shape[0] != d_glob:
            raise DatasetError(f"line {lineno}: global feature dimension {phi.shape[0]} != header d_glob {d_glob}")
        raw_boxes = _require(rec, "boxes", lineno)
        if not isinstance(raw_boxes, list):
            raise DatasetError(f"line {lineno}: field 'boxes' must be a list")
        boxes = tuple(_parse_box(b, lineno, d_app) for b in raw_boxes)
        try:
            images.append(ImageRecord(image_id, phi, boxes))
        except DatasetError as e:
            raise DatasetError(f"line {lineno}: {e}") from None
    return Dataset(tuple(images), d_glob, d_app)


# --------------------------------------------------------------------------
# Splitting


def split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Random train/test partition; both parts keep the input image order."""
    if not (0.0 < test_fraction < 1.0):
        raise DatasetError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(ds)
    if n < 2:
        raise DatasetError(f"need at least 2 images to split, got {n}")
    n_test = min(max(int(round(n * test_fraction)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = np.sort(perm[:n_test])
    is_test = np.zeros(n, dtype=bool)
    is_test[test_idx] = True
    train = tuple(img for img, t in zip(ds.images, is_test) if not t)
    test = tuple(img for img, t in zip(ds.images, is_test) if t)
    return Dataset(train, ds.d_glob, ds.d_app), Dataset(test, ds.d_glob, ds.d_app)


# --------------------------------------------------------------------------
# Synthetic scenes


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic scene generator.

    Every image belongs to a latent scene type. The scene fixes the image's
    global-feature prototype, a categorical over detector components, a
    Gaussian over box centres and a log-normal over box sizes, so global
    appearance is predictive of object properties.

    ``prototype_support`` limits each scene prototype to that many nonzero
    (nonnegative) dimensions, mimicking sparse bag-of-words histograms; None
    gives dense Gaussian prototypes. ``component_concentration`` is the
    Dirichlet concentration of the per-scene component categoricals (small
    values give peaky scenes).
    """

    num_scene_types: int = 8
    num_components: int = 16
    images_per_scene: int = 275
    boxes_per_image: tuple[int, int] = (1, 3)
    d_glob: int = 32
    d_app: int = 8
    noise_global: float = 0.3
    noise_app: float = 0.1
    noise_pos: float = 0.05
    seed: int = 0
    noise_scale: float = 0.15
    prototype_support: int | None = None
    component_concentration: float = 0.3
    negative_fraction: float = 0.0
    template_coherence: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "boxes_per_image", tuple(self.boxes_per_image))
        for name in ("num_scene_types", "num_components", "images_per_scene", "d_glob", "d_app"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        lo, hi = self.boxes_per_image
        if lo < 1 or hi < lo:
            raise ValueError(f"boxes_per_image must satisfy 1 <= lo <= hi, got {self.boxes_per_image}")
        for name in ("noise_global", "noise_app", "noise_pos", "noise_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.prototype_support is not None and not (1 <= self.prototype_support <= self.d_glob):
            raise ValueError("prototype_support must be in [1, d_glob]")
        if self.component_concentration <= 0:
            raise ValueError("component_concentration must be > 0")
        if not (0.0 <= self.negative_fraction < 1.0):
            raise ValueError("negative_fraction must be in [0, 1)")
        if not (0.0 <= self.template_coherence < 1.0):
            raise ValueError("template_coherence must be in [0, 1)")


@dataclass(frozen=True)
class SceneModel:
    prototype: np.ndarray
    component_probs: np.ndarray
    pos_mean: np.ndarray
    log_size_mean: np.ndarray  # (log w, log h)


@dataclass(frozen=True)
class SynthOutput:
    dataset: Dataset
    scene_labels: dict[int, int]
    scenes: tuple[SceneModel, ...]
    component_prototypes: np.ndarray = field(repr=False)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def synth_scenes(cfg: SynthConfig) -> SynthOutput:
    """Generate a dataset together with the generator truth (scene labels and models)."""
    rng = np.random.default_rng(cfg.seed)
    C = cfg.num_components

    scenes = []
    for _ in range(cfg.num_scene_types):
        if cfg.prototype_support is None:
            proto = _unit(rng.standard_normal(cfg.d_glob))
        else:
            proto = np.zeros(cfg.d_glob)
            dims = rng.choice(cfg.d_glob, size=cfg.prototype_support, replace=False)
            proto[dims] = np.abs(rng.standard_normal(cfg.prototype_support)) + 0.5
            proto = _unit(proto)
        probs = rng.dirichlet(np.full(C, cfg.component_concentration))
        pos_mean = rng.uniform(0.15, 0.85, size=2)
        log_w = rng.uniform(math.log(0.05), math.log(0.4))
        log_aspect = rng.uniform(math.log(0.5), math.log(2.0))
        scenes.append(SceneModel(proto, probs, pos_mean, np.array([log_w, log_w + log_aspect])))
    templates = np.stack([_unit(rng.standard_normal(cfg.d_app)) for _ in range(C)])
    if cfg.template_coherence > 0:
        # components of one object class share a common appearance direction
        common = _unit(rng.standard_normal(cfg.d_app))
        rho = cfg.template_coherence
        templates = np.stack([_unit(math.sqrt(rho) * common + math.sqrt(1 - rho) * t) for t in templates])

    n_images = cfg.num_scene_types * cfg.images_per_scene
    labels = rng.permutation(np.repeat(np.arange(cfg.num_scene_types), cfg.images_per_scene))
    negative = rng.random(n_images) < cfg.negative_fraction
    lo, hi = cfg.boxes_per_image

    images = []
    for i in range(n_images):
        s = scenes[labels[i]]
        phi = s.prototype + cfg.noise_global * rng.standard_normal(cfg.d_glob)
        n_boxes = 0 if negative[i] else int(rng.integers(lo, hi + 1))
        boxes = []
        for _ in range(n_boxes):
            comp = int(rng.choice(C, p=s.component_probs))
            app = templates[comp] + cfg.noise_app * rng.standard_normal(cfg.d_app)
            cx, cy = np.clip(s.pos_mean + cfg.noise_pos * rng.standard_normal(2), 0.0, 1.0)
            w, h = np.clip(np.exp(s.log_size_mean + cfg.noise_scale * rng.standard_normal(2)), 1e-3, 1.0)
            boxes.append(ObjectBox(float(cx), float(cy), float(w), float(h), app, comp))
        images.append(ImageRecord(i, phi, tuple(boxes)))

    ds = Dataset(tuple(images), cfg.d_glob, cfg.d_app)
    return SynthOutput(ds, {i: int(labels[i]) for i in range(n_images)}, tuple(scenes), templates)


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Deterministic synthetic dataset for ``cfg.seed``."""
    return synth_scenes(cfg).dataset


def boxes_of(images: Sequence[ImageRecord]) -> list[ObjectBox]:
    return [b for img in images for b in img.boxes]
