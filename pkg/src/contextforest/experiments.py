"""Experiment configuration and the end-to-end pipelines behind the CLI.

Every pipeline is a plain function of an ``ExperimentConfig`` and datasets,
so tests can run them without going through the command line. All
randomness is derived from the config's root seed through named sub-seeds.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from contextforest.baseline import KnnIndex, knn_retrieval
from contextforest.dataset import Dataset, SynthConfig, load_dataset, split, synth_scenes
from contextforest.forest import (
    Forest,
    QueryStats,
    RetrievalSet,
    TrainConfig,
    footprint_from_counts,
    load_forest,
    memory_footprint,
    retrieval_set,
    train_forest,
)
from contextforest.metrics import PropertyKind, SigmaParams, retrieval_quality
from contextforest.mockdet import MockDetector, SweepRun, evaluate_ap, run_detector, speedup_report
from contextforest.rescore import CombineWeights, default_grid, fit_weights, location_scores, nms, rescored
from contextforest.selection import posterior, select_components

# The standard synthetic benchmark: 8 scenes, 16 components, 2200 images
# split 2000 / 200. Scene prototypes are sparse and the global noise is
# spread over many uninformative dimensions.
BENCHMARK_SYNTH = SynthConfig(
    num_scene_types=8,
    num_components=16,
    images_per_scene=275,
    boxes_per_image=(1, 3),
    d_glob=32,
    d_app=8,
    noise_global=0.4,
    noise_app=0.03,
    noise_pos=0.05,
    noise_scale=0.08,
    prototype_support=2,
    component_concentration=0.15,
    template_coherence=0.5,
)
BENCHMARK_TEST_FRACTION = 200 / 2200

KINDS = tuple(k.value for k in PropertyKind)


def sub_seed(root: int, name: str) -> int:
    """Independent 63-bit seed for the named consumer of randomness."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class DetectorConfig:
    score_noise: float = 0.1
    cost_per_component: float = 1.0
    distractor_rate: int = 10


@dataclass(frozen=True)
class SelectionConfig:
    kind: str = "appearance"
    k_retrieval: int = 20
    gammas: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 0.9, 0.95, 1.0)


@dataclass(frozen=True)
class RescoreConfig:
    k_retrieval: int = 10
    score_noise: float = 0.4
    val_fraction: float = 0.5
    grid: tuple[tuple[float, float], ...] | None = None
    shared_retrieval: bool = False
    nms_threshold: float = 0.5


@dataclass(frozen=True)
class FullScaleConfig:
    n_train: int = 14000
    d_glob: int = 16000
    num_trees: int = 750
    sample_trees: int = 3
    candidate_splits_per_node: int = 100
    proxy_d_glob: int = 32


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    synth: SynthConfig | None = BENCHMARK_SYNTH
    train_path: str | None = None
    test_path: str | None = None
    test_fraction: float = BENCHMARK_TEST_FRACTION
    kinds: tuple[str, ...] = KINDS
    forest: TrainConfig = TrainConfig(num_trees=200)
    forest_overrides: dict[str, dict[str, Any]] = field(default_factory=dict)
    forest_dir: str | None = None
    k_retrieval: int = 10
    retrieval_sizes: tuple[int, ...] = (1, 10)
    selection: SelectionConfig = SelectionConfig()
    detector: DetectorConfig = DetectorConfig()
    rescore: RescoreConfig = RescoreConfig()
    full_scale: FullScaleConfig | None = None
    iou_threshold: float = 0.5
    bench_probes: int = 100
    workers: int = 1
    out: str = "out"

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(PropertyKind(k).value for k in self.kinds))
        if self.synth is None and not (self.train_path and self.test_path):
            raise ValueError("config needs either a synth block or both train_path and test_path")
        if not self.kinds:
            raise ValueError("kinds must not be empty")
        if not self.retrieval_sizes or not self.selection.gammas:
            raise ValueError("retrieval_sizes and selection.gammas must not be empty")
        if self.rescore.grid is not None and not self.rescore.grid:
            raise ValueError("rescore.grid must not be empty")
        for g in self.selection.gammas:
            if not 0.0 <= g <= 1.0:
                raise ValueError(f"gamma {g} outside [0, 1]")
        for k in self.forest_overrides:
            PropertyKind(k)

    # ----------------------------------------------------------------- I/O

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "synth" in raw and raw["synth"] is not None:
            base = dataclasses.asdict(BENCHMARK_SYNTH)
            base.update(raw["synth"])
            raw["synth"] = SynthConfig(**base)
        if raw.get("train_path") and "synth" not in raw:
            raw["synth"] = None
        if "forest" in raw:
            raw["forest"] = TrainConfig(**{"num_trees": 200, **raw["forest"]})
        for key, typ in (("selection", SelectionConfig), ("detector", DetectorConfig), ("rescore", RescoreConfig)):
            if key in raw:
                raw[key] = typ(**raw[key])
        if raw.get("full_scale") is not None:
            raw["full_scale"] = FullScaleConfig(**raw["full_scale"])
        sel = raw.get("selection")
        if sel is not None:
            raw["selection"] = dataclasses.replace(sel, gammas=tuple(float(g) for g in sel.gammas))
        res = raw.get("rescore")
        if res is not None and res.grid is not None:
            raw["rescore"] = dataclasses.replace(res, grid=tuple((float(a), float(b)) for a, b in res.grid))
        for key in ("kinds", "retrieval_sizes"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @property
    def config_hash(self) -> str:
        """First 12 hex digits of the SHA-256 of the canonical JSON config.

        The output directory and worker count do not affect results and are
        left out.
        """
        d = self.to_dict()
        d.pop("out")
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=int(seed))

    def with_out(self, out: str) -> "ExperimentConfig":
        return dataclasses.replace(self, out=str(out))

    def train_config(self, kind: str) -> TrainConfig:
        """Forest settings for ``kind``: the shared block, per-kind overrides, derived seed."""
        over = dict(self.forest_overrides.get(PropertyKind(kind).value, {}))
        over.setdefault("seed", sub_seed(self.seed, f"forest/{PropertyKind(kind).value}"))
        return dataclasses.replace(self.forest, **over)


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


# --------------------------------------------------------------------------
# Data


@dataclass(frozen=True)
class Data:
    train: Dataset
    test: Dataset
    num_components: int
    scene_labels: dict[int, int] | None = None
    templates: np.ndarray | None = None


def synth_config_for(cfg: ExperimentConfig) -> SynthConfig:
    return dataclasses.replace(cfg.synth, seed=sub_seed(cfg.seed, "generator"))


def prepare_data(cfg: ExperimentConfig) -> Data:
    """Train/test datasets from the configured files or the seeded generator."""
    if cfg.train_path and cfg.test_path:
        train, test = load_dataset(cfg.train_path), load_dataset(cfg.test_path)
        C = max(train.num_components, test.num_components)
        return Data(train, test, C, None, templates_from_data(train, C))
    out = synth_scenes(synth_config_for(cfg))
    train, test = split(out.dataset, cfg.test_fraction, sub_seed(cfg.seed, "split"))
    return Data(train, test, cfg.synth.num_components, out.scene_labels, out.component_prototypes)


def templates_from_data(train: Dataset, num_components: int) -> np.ndarray:
    """Mean appearance per component over the training boxes."""
    sums = np.zeros((num_components, train.d_app))
    counts = np.zeros(num_components)
    for b in train.all_boxes():
        if b.component_id is None:
            continue
        sums[b.component_id] += b.appearance
        counts[b.component_id] += 1
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"components {missing} have no training boxes; cannot build detector templates")
    return sums / counts[:, None]


def make_detector(data: Data, det: DetectorConfig, score_noise: float | None = None) -> MockDetector:
    return MockDetector(
        data.templates,
        score_noise=det.score_noise if score_noise is None else score_noise,
        cost_per_component=det.cost_per_component,
        distractor_rate=det.distractor_rate,
    )


def forest_path(directory: str | Path, kind: str) -> Path:
    return Path(directory) / f"{PropertyKind(kind).value}.conf"


def get_forests(cfg: ExperimentConfig, train: Dataset, kinds: Sequence[str]) -> dict[str, Forest]:
    """Load forests from ``cfg.forest_dir`` when set, otherwise train them."""
    out = {}
    for k in kinds:
        k = PropertyKind(k).value
        if cfg.forest_dir:
            out[k] = load_forest(forest_path(cfg.forest_dir, k))
        else:
            out[k] = train_forest(train, k, cfg.train_config(k), cfg.k_retrieval, cfg.workers)
    return out


def boxes_of_set(train: Dataset, retr: RetrievalSet) -> list:
    return [b for i in retr.image_ids for b in train.image(i).boxes]


# --------------------------------------------------------------------------
# Retrieval quality

RETRIEVAL_METHODS = ("all-train", "knn", "conf")


@dataclass(frozen=True)
class RetrievalRow:
    kind: str
    method: str
    k: int
    mean_quality: float
    num_images: int


@dataclass(frozen=True)
class RetrievalImageRow:
    kind: str
    method: str
    k: int
    image_id: int
    quality: float


def _quality(test_boxes, retrieved, kind, sigma: SigmaParams) -> float:
    # an empty retrieved box set has zero density everywhere
    return retrieval_quality(test_boxes, retrieved, kind, sigma) if retrieved else 0.0


def eval_retrieval(cfg: ExperimentConfig, train: Dataset, test: Dataset,
                   forests: dict[str, Forest]) -> tuple[list[RetrievalRow], list[RetrievalImageRow]]:
    """Mean retrieval quality per kind, method and retrieval size over test images with boxes."""
    index = KnnIndex(train)
    prior_boxes = train.all_boxes()
    sizes = sorted(set(cfg.retrieval_sizes))
    per_image: list[RetrievalImageRow] = []
    rows: list[RetrievalRow] = []
    probes = [img for img in test.images if img.boxes]
    for kind in forests:
        forest = forests[kind]
        sigma = forest.sigma
        for img in probes:
            for k in sizes:
                conf = retrieval_set(forest, img.global_features, k)
                knn = knn_retrieval(index, img.global_features, k)
                q = {
                    "all-train": _quality(img.boxes, prior_boxes, kind, sigma),
                    "knn": _quality(img.boxes, boxes_of_set(train, knn), kind, sigma),
                    "conf": _quality(img.boxes, boxes_of_set(train, conf), kind, sigma),
                }
                for m in RETRIEVAL_METHODS:
                    per_image.append(RetrievalImageRow(kind, m, k, img.id, q[m]))
        for m in RETRIEVAL_METHODS:
            for k in sizes:
                vals = [r.quality for r in per_image if r.kind == kind and r.method == m and r.k == k]
                rows.append(RetrievalRow(kind, m, k, float(np.mean(vals)) if vals else float("nan"), len(vals)))
    return rows, per_image


# --------------------------------------------------------------------------
# Component selection sweep


@dataclass(frozen=True)
class SweepRow:
    method: str
    gamma: float
    mean_fraction: float
    total_cost: float
    ap: float
    ap_ratio: float


@dataclass(frozen=True)
class Selection:
    method: str
    gamma: float
    image_id: int
    active: tuple[int, ...]


def run_selection(det: MockDetector, test: Dataset, active_sets: Sequence[Sequence[int]], seed: int,
                  iou_threshold: float, gamma: float = 1.0) -> SweepRun:
    dets = []
    for img, act in zip(test.images, active_sets):
        dets.extend(run_detector(det, img, act, seed))
    sets = tuple(frozenset(int(c) for c in a) for a in active_sets)
    cost = sum(det.image_cost(a) for a in sets)
    return SweepRun(gamma, sets, cost, evaluate_ap(dets, test, iou_threshold))


def _selected(post, gamma: float, C: int) -> tuple[int, ...]:
    # no component evidence at all: fall back to running everything
    return tuple(range(C)) if post is None else select_components(post, gamma).selected


def _posterior_or_none(retr: RetrievalSet, train: Dataset, C: int):
    try:
        return posterior(retr, train, C)
    except ValueError:
        return None


def select_sweep(cfg: ExperimentConfig, data: Data, forest: Forest) -> tuple[list[SweepRow], list[Selection], float]:
    """AP and component usage per gamma for ConF, kNN and random selection.

    The random baseline pairs with each ConF point: it runs ceil(f * C)
    uniformly drawn components on every image, f being ConF's mean fraction.
    Returns the rows, every per-image selection and the full-model AP.
    """
    train, test, C = data.train, data.test, data.num_components
    det = make_detector(data, cfg.detector)
    det_seed = sub_seed(cfg.seed, "detector")
    rng = np.random.default_rng(sub_seed(cfg.seed, "random-selection"))
    index = KnnIndex(train)
    k = cfg.selection.k_retrieval
    post_conf = [_posterior_or_none(retrieval_set(forest, img.global_features, k), train, C) for img in test.images]
    post_knn = [_posterior_or_none(knn_retrieval(index, img.global_features, k), train, C) for img in test.images]

    full = run_selection(det, test, [range(C)] * len(test), det_seed, cfg.iou_threshold)
    full_ap = full.result.ap
    rows: list[SweepRow] = []
    selections: list[Selection] = []
    runs: dict[str, list[SweepRun]] = {"conf": [], "knn": [], "random": []}
    for gamma in sorted(cfg.selection.gammas):
        sets = {
            "conf": [_selected(p, gamma, C) for p in post_conf],
            "knn": [_selected(p, gamma, C) for p in post_knn],
        }
        frac = float(np.mean([len(s) for s in sets["conf"]])) / C
        m = min(C, math.ceil(frac * C - 1e-9))
        sets["random"] = [tuple(sorted(int(c) for c in rng.choice(C, size=m, replace=False))) for _ in test.images]
        for method, chosen in sets.items():
            runs[method].append(run_selection(det, test, chosen, det_seed, cfg.iou_threshold, gamma))
            selections.extend(Selection(method, gamma, img.id, tuple(a)) for img, a in zip(test.images, chosen))
    for method, method_runs in runs.items():
        for r in speedup_report(method_runs, C, full_ap):
            rows.append(SweepRow(method, r.gamma, r.mean_fraction, r.total_cost, r.ap, r.ap_ratio))
    return rows, selections, full_ap


def replay_selection(cfg: ExperimentConfig, data: Data, selections: Sequence[Selection]) -> float:
    """AP of a saved set of per-image selections, recomputed from scratch."""
    det = make_detector(data, cfg.detector)
    chosen = {s.image_id: s.active for s in selections}
    sets = [chosen.get(img.id, ()) for img in data.test.images]
    return run_selection(det, data.test, sets, sub_seed(cfg.seed, "detector"), cfg.iou_threshold).result.ap


# --------------------------------------------------------------------------
# Location and scale rescoring


@dataclass(frozen=True)
class RescoreRow:
    method: str
    alpha_pos: float
    alpha_scale: float
    val_ap: float
    test_ap: float


@dataclass(frozen=True)
class RescoreResult:
    rows: list[RescoreRow]
    test_detections: dict[str, list]  # method -> rescored detections before NMS


def _geometry_scores(dets, img, train: Dataset, pos_set: RetrievalSet, scale_set: RetrievalSet,
                     sigma_pos: SigmaParams, sigma_scale: SigmaParams) -> np.ndarray:
    pos_boxes = boxes_of_set(train, pos_set)
    scale_boxes = boxes_of_set(train, scale_set)
    if not dets:
        return np.zeros((0, 2))
    if not pos_boxes or not scale_boxes:
        # nothing retrieved to compare against: no augmentation for this image
        return np.zeros((len(dets), 2))
    return location_scores(dets, pos_boxes, sigma_pos, sigma_scale, scale_boxes)


def rescore_experiment(cfg: ExperimentConfig, data: Data, forests: dict[str, Forest]) -> RescoreResult:
    """Validation-fitted location/scale augmentation from ConF and from kNN retrieval sets.

    The test split is divided into a validation part (weights are fitted
    there) and an evaluation part; neither is seen by forest training.
    """
    rc = cfg.rescore
    val, test = split(data.test, rc.val_fraction, sub_seed(cfg.seed, "validation"))
    det = make_detector(data, cfg.detector, rc.score_noise)
    det_seed = sub_seed(cfg.seed, "detector")
    fp = forests["position"]
    fs = fp if rc.shared_retrieval else forests["scale"]
    index = KnnIndex(data.train)
    grid = default_grid() if rc.grid is None else [CombineWeights(a, b) for a, b in rc.grid]
    k = rc.k_retrieval

    def collect(ds: Dataset):
        dets, geo = [], {"conf": [], "knn": []}
        for img in ds.images:
            d = run_detector(det, img, range(data.num_components), det_seed)
            dets.extend(d)
            conf_p = retrieval_set(fp, img.global_features, k)
            conf_s = conf_p if rc.shared_retrieval else retrieval_set(fs, img.global_features, k)
            knn = knn_retrieval(index, img.global_features, k)
            geo["conf"].append(_geometry_scores(d, img, data.train, conf_p, conf_s, fp.sigma, fs.sigma))
            geo["knn"].append(_geometry_scores(d, img, data.train, knn, knn, fp.sigma, fs.sigma))
        return dets, {m: np.vstack(g) if g else np.zeros((0, 2)) for m, g in geo.items()}

    val_dets, val_geo = collect(val)
    test_dets, test_geo = collect(test)
    base_val = evaluate_ap(nms(val_dets, rc.nms_threshold), val, cfg.iou_threshold).ap
    base_test = evaluate_ap(nms(test_dets, rc.nms_threshold), test, cfg.iou_threshold).ap
    rows = [RescoreRow("none", 0.0, 0.0, base_val, base_test)]
    out_dets = {"none": list(test_dets)}
    for method in ("conf", "knn"):
        wts, val_ap = fit_weights(val, val_dets, val_geo[method], grid, cfg.iou_threshold, rc.nms_threshold)
        scored = rescored(test_dets, test_geo[method], wts)
        test_ap = evaluate_ap(nms(scored, rc.nms_threshold), test, cfg.iou_threshold).ap
        rows.append(RescoreRow(method, wts.alpha_pos, wts.alpha_scale, val_ap, test_ap))
        out_dets[method] = scored
    return RescoreResult(rows, out_dets)


# --------------------------------------------------------------------------
# Cost and memory


def knn_matrix_bytes(n_train: int, d_glob: int, itemsize: int = 8) -> int:
    """Bytes of a dense (n_train, d_glob) feature matrix, as the kNN index stores it."""
    return int(n_train) * int(d_glob) * int(itemsize)


def bench(cfg: ExperimentConfig, data: Data, forest: Forest) -> dict:
    """Per-probe work of ConF against the linear-scan kNN, plus both memory footprints."""
    index = KnnIndex(data.train)
    probes = list(data.test.images[: cfg.bench_probes])
    visits, box_dist, knn_dist = [], [], []
    for img in probes:
        st = QueryStats()
        retrieval_set(forest, img.global_features, cfg.k_retrieval, st)
        visits.append(st.node_visits)
        box_dist.append(st.box_distance_computations)
        before = index.distance_computations
        knn_retrieval(index, img.global_features, cfg.k_retrieval)
        knn_dist.append(index.distance_computations - before)
    fp = memory_footprint(forest)
    report = {
        "config_hash": cfg.config_hash,
        "kind": forest.kind.value,
        "num_trees": forest.num_trees,
        "max_depth": forest.config.max_depth,
        "train_images": len(data.train),
        "probes": len(probes),
        "conf_node_visits_mean": float(np.mean(visits)) if visits else 0.0,
        "conf_node_visits_max": int(max(visits)) if visits else 0,
        "conf_node_visit_bound": forest.num_trees * forest.config.max_depth,
        "conf_box_distance_computations": int(sum(box_dist)),
        "knn_distance_computations_per_probe": sorted(set(knn_dist)),
        "forest_bytes": fp.total,
        "forest_internal_bytes": fp.internal_bytes,
        "forest_leaf_bytes": fp.leaf_bytes,
        "forest_mean_internal_nodes": fp.mean_internal_nodes,
        "knn_bytes": index.nbytes,
        "knn_to_forest_ratio": index.nbytes / fp.total,
    }
    if cfg.full_scale is not None:
        report["full_scale"] = full_scale_memory(cfg.full_scale, cfg.seed)
    return report


def full_scale_memory(ps: FullScaleConfig, seed: int = 0) -> dict:
    """Forest and kNN memory at full scale, from a few trees trained on the full training set size.

    Trees are grown on ``ps.n_train`` synthetic images; their internal-node
    counts are averaged and scaled to ``ps.num_trees`` trees, and every tree
    stores each training index exactly once. The forest's bytes do not depend
    on the feature dimension, so the trees are grown on ``ps.proxy_d_glob``
    dimensions while the kNN matrix is sized for ``ps.d_glob``.
    """
    per_scene = math.ceil(ps.n_train / BENCHMARK_SYNTH.num_scene_types)
    synth = dataclasses.replace(BENCHMARK_SYNTH, images_per_scene=per_scene, d_glob=ps.proxy_d_glob,
                                seed=sub_seed(seed, "full-scale/generator"))
    train = synth_scenes(synth).dataset
    tc = TrainConfig(num_trees=ps.sample_trees, candidate_splits_per_node=ps.candidate_splits_per_node,
                     seed=sub_seed(seed, "full-scale/forest"))
    forest = train_forest(train, "position", tc)
    counts = forest.internal_node_counts()
    mean_internal = float(np.mean(counts))
    fp = footprint_from_counts([mean_internal] * ps.num_trees, [len(train)] * ps.num_trees)
    knn = knn_matrix_bytes(len(train), ps.d_glob)
    return {
        "n_train": len(train),
        "d_glob": ps.d_glob,
        "num_trees": ps.num_trees,
        "sample_trees": ps.sample_trees,
        "sample_internal_nodes": counts,
        "mean_internal_nodes": mean_internal,
        "forest_bytes": fp.total,
        "knn_bytes": knn,
        "knn_to_forest_ratio": knn / fp.total,
    }


# --------------------------------------------------------------------------
# CSV output


def write_csv(path: str | Path, rows: Sequence[Any], config_hash: str) -> None:
    """Dataclass rows to CSV, with a trailing ``config_hash`` column."""
    rows = list(rows)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if not rows:
            return
        names = [f.name for f in dataclasses.fields(rows[0])]
        w.writerow(names + ["config_hash"])
        for r in rows:
            vals = [getattr(r, n) for n in names]
            w.writerow([" ".join(map(str, v)) if isinstance(v, tuple) else _fmt(v) for v in vals] + [config_hash])


def _fmt(v):
    return repr(v) if isinstance(v, float) else v
