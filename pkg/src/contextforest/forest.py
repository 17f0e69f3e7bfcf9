"""Context forest: extremely randomized trees grown to maximise box compactness.

Trees split on single dimensions of the global image features, but every
split is scored by how compact the *object boxes* of the two children are
under a chosen property distance. At query time each tree votes for the
training images in the leaf a probe reaches; the most voted images form the
retrieval set.
"""

from __future__ import annotations

import json
import logging
import multiprocessing
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numba
import numpy as np

from contextforest.dataset import Dataset, ImageRecord
from contextforest.metrics import (
    PropertyKind,
    SigmaParams,
    estimate_sigma,
    pairwise_kernel,
    property_array,
)

logger = logging.getLogger(__name__)

MAGIC = b"CONF"
FORMAT_VERSION = 1


class ForestFormatError(ValueError):
    """Unreadable forest file: bad magic, unsupported version or truncation."""


@dataclass(frozen=True)
class SplitParams:
    feature_index: int
    threshold: float

    def __post_init__(self):
        if self.feature_index < 0:
            raise ValueError(f"feature_index must be >= 0, got {self.feature_index}")


@dataclass(frozen=True)
class Leaf:
    image_ids: tuple[int, ...]

    def __post_init__(self):
        if not self.image_ids:
            raise ValueError("leaf must hold at least one image")


@dataclass(frozen=True)
class Internal:
    split: SplitParams
    left: "TreeNode"
    right: "TreeNode"


TreeNode = Union[Internal, Leaf]


@dataclass(frozen=True)
class TrainConfig:
    num_trees: int = 750
    candidate_splits_per_node: int = 2000
    min_images_per_leaf: int = 4
    max_depth: int = 20
    seed: int = 0
    sigma_k_nn: int = 10
    sigma_spread: str = "rms"
    objective: str = "weighted"
    center_kernel: bool = True

    def __post_init__(self):
        for name in ("num_trees", "candidate_splits_per_node", "min_images_per_leaf", "max_depth", "sigma_k_nn"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.sigma_spread not in ("rms", "std"):
            raise ValueError(f"sigma_spread must be 'rms' or 'std', got {self.sigma_spread!r}")
        if self.objective not in ("weighted", "sum"):
            raise ValueError(f"objective must be 'weighted' or 'sum', got {self.objective!r}")


@dataclass
class QueryStats:
    """Instrumentation for forest queries: split evaluations and box distances."""

    node_visits: int = 0
    box_distance_computations: int = 0
    queries: int = 0


@dataclass(frozen=True)
class RetrievalSet:
    entries: tuple[tuple[int, int], ...]

    @property
    def image_ids(self) -> list[int]:
        return [i for i, _ in self.entries]

    @property
    def votes(self) -> list[int]:
        return [v for _, v in self.entries]

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class NodeRecord:
    """Debug record of one trained internal node."""

    depth: int
    chosen: SplitParams
    chosen_score: float
    candidate_scores: np.ndarray = field(repr=False)


def eval_split(split: SplitParams, phi: np.ndarray) -> int:
    """0 routes left (value <= threshold), 1 routes right."""
    if not 0 <= split.feature_index < len(phi):
        raise IndexError(f"feature_index {split.feature_index} out of range for dimension {len(phi)}")
    return int(phi[split.feature_index] > split.threshold)


# --------------------------------------------------------------------------
# Split scoring

# Image pairs whose summed kernel is below exp(-72) (every box pair farther
# than 12 sigma apart) are dropped from split scoring; such terms are far
# below double-precision resolution of any non-negligible node sum.
KERNEL_FLOOR = float(np.exp(-72.0))


class _PairKernel:
    """Sparse image-level sums of box kernel values.

    Entry (a, b, v) with a <= b holds the kernel summed over the boxes of
    image a against the boxes of image b, skipping each box's pairing with
    itself. Computed on first use: a node only needs it when it has more
    than one valid candidate.
    """

    def __init__(self, props: np.ndarray, owner: np.ndarray, n_images: int, kind: PropertyKind, sigma: float,
                 center: float = 0.0):
        self.props = props
        self.owner = owner
        self.kind = kind
        self.sigma = sigma
        self.center = center
        self.n_images = n_images
        self.n_boxes = np.bincount(owner, minlength=n_images).astype(np.int64)
        self._entries = None

    @property
    def entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self._entries is None:
            self._entries = self._compute()
        return self._entries

    def _compute(self):
        pos = np.flatnonzero(self.n_boxes)
        if len(pos) == 0:
            e = np.zeros(0, dtype=np.int64)
            return e, e, np.zeros(0)
        starts = np.concatenate([[0], np.cumsum(self.n_boxes[pos])[:-1]])
        m = len(self.props)
        a_out, b_out, v_out = [], [], []
        # chunk by whole images so each chunk yields complete image rows
        box_budget = max(1, 2_000_000 // max(1, m * self.props.shape[1]))
        i = 0
        while i < len(pos):
            j = i + 1
            while j < len(pos) and starts[j] - starts[i] + self.n_boxes[pos[j]] <= box_budget:
                j += 1
            s = starts[i]
            e = starts[j] if j < len(pos) else m
            k = pairwise_kernel(self.kind, self.props[s:e], self.props, self.sigma, self.center)
            k[np.arange(e - s), np.arange(s, e)] = 0.0
            cols = np.add.reduceat(k, starts, axis=1)
            rows = np.add.reduceat(cols, starts[i:j] - s, axis=0)
            ra, cb = np.nonzero(rows >= KERNEL_FLOOR)
            ga = pos[i:j][ra]
            gb = pos[cb]
            upper = ga <= gb
            a_out.append(ga[upper])
            b_out.append(gb[upper])
            v_out.append(rows[ra[upper], cb[upper]])
            i = j
        return np.concatenate(a_out), np.concatenate(b_out), np.concatenate(v_out)


@dataclass
class _TrainState:
    features: np.ndarray
    ids: np.ndarray
    pair: _PairKernel
    norm: float
    cfg: TrainConfig


def _node_entries(state: _TrainState, idx: np.ndarray):
    """Kernel entries with both images inside the node, in node-local indices."""
    a, b, v = state.pair.entries
    local = np.full(state.pair.n_images, -1, dtype=np.int64)
    local[idx] = np.arange(len(idx))
    la, lb = local[a], local[b]
    keep = (la >= 0) & (lb >= 0)
    return la[keep], lb[keep], v[keep]


@numba.njit(cache=True, nogil=True)
def _left_counts(sorted_vals, slot, thr):
    # number of node images with phi <= thr, by binary search in the sorted column
    out = np.empty(len(thr), dtype=np.int64)
    for c in range(len(thr)):
        out[c] = np.searchsorted(sorted_vals[:, slot[c]], thr[c], side="right")
    return out


@numba.njit(cache=True, nogil=True)
def _score_kernel(order, slot, left_n, valid, la, lb, v, n_boxes, weighted, norm):
    n, n_feat = order.shape
    rank = np.empty((n, n_feat), dtype=np.int64)
    for f in range(n_feat):
        for r in range(n):
            rank[order[r, f], f] = r

    # mass[f, r]: kernel weight of pairs whose later member sits at rank r under feature f
    mass = np.zeros((n_feat, n + 1))
    rowsum = np.zeros(n)
    for e in range(len(la)):
        a = la[e]
        b = lb[e]
        we = v[e]
        rowsum[a] += we
        if a != b:
            rowsum[b] += we
            we = 2.0 * we
        ra = rank[a]
        rb = rank[b]
        for f in range(n_feat):
            r = ra[f] if ra[f] > rb[f] else rb[f]
            mass[f, r + 1] += we

    # prefix sums over the ranking: pair mass, row mass and box counts
    s_pref = np.zeros((n_feat, n + 1))
    row_pref = np.zeros((n_feat, n + 1))
    box_pref = np.zeros((n_feat, n + 1))
    for f in range(n_feat):
        for r in range(n):
            i = order[r, f]
            s_pref[f, r + 1] = s_pref[f, r] + mass[f, r + 1]
            row_pref[f, r + 1] = row_pref[f, r] + rowsum[i]
            box_pref[f, r + 1] = box_pref[f, r] + n_boxes[i]

    scores = np.full(len(slot), -np.inf)
    for c in range(len(slot)):
        if not valid[c]:
            continue
        k = slot[c]
        m = left_n[c]
        s_left = s_pref[k, m]
        # pairs with both members on the right = total - (pairs touching the left)
        s_right = max(s_pref[k, n] - 2.0 * row_pref[k, m] + s_left, 0.0)
        n_left = box_pref[k, m]
        n_right = box_pref[k, n] - n_left
        c_left = s_left / (n_left * n_left) if n_left > 0 else 0.0
        c_right = s_right / (n_right * n_right) if n_right > 0 else 0.0
        if weighted:
            total = n_left + n_right
            obj = (n_left * c_left + n_right * c_right) / total if total > 0 else 0.0
        else:
            obj = c_left + c_right
        scores[c] = norm * obj
    return scores


def _score_candidates(state: _TrainState, idx: np.ndarray, feats: np.ndarray, thr: np.ndarray,
                      min_child: int, need_scores, entries=None):
    """Validity and objective value of every candidate split at a node.

    All candidates are scored together: for every sampled feature the node's
    images are ranked, and the kernel mass inside each prefix of that ranking
    is accumulated by binning every image pair at the larger of its two ranks.
    """
    n = len(idx)
    used, slot = np.unique(feats, return_inverse=True)
    cols = state.features[np.ix_(idx, used)]
    order = np.argsort(cols, axis=0, kind="stable")
    sorted_vals = np.take_along_axis(cols, order, axis=0)
    left_n = _left_counts(sorted_vals, slot, thr)
    valid = (left_n >= min_child) & (n - left_n >= min_child)
    if not need_scores(valid):
        return valid, np.full(len(feats), -np.inf)

    la, lb, v = entries if entries is not None else _node_entries(state, idx)
    scores = _score_kernel(order, slot, left_n, valid, la, lb, v, state.pair.n_boxes[idx].astype(np.float64),
                           state.cfg.objective == "weighted", state.norm)
    return valid, scores


def _choose_split(state: _TrainState, idx: np.ndarray, rng: np.random.Generator, min_child: int,
                  record: bool = False, entries=None):
    """Sample candidates and return (split, score, candidate scores) or None."""
    cfg = state.cfg
    phi = state.features[idx]
    d = phi.shape[1]
    c = cfg.candidate_splits_per_node
    feats = rng.integers(0, d, size=c)
    u = rng.random(c)
    lo = phi.min(axis=0)
    hi = phi.max(axis=0)
    thr = lo[feats] + u * (hi[feats] - lo[feats])

    need = (lambda v: bool(v.any())) if record else (lambda v: np.count_nonzero(v) > 1)
    valid, scores = _score_candidates(state, idx, feats, thr, min_child, need, entries)
    if not valid.any():
        return None
    # highest score, ties to the lower feature index then the lower threshold
    top = np.where(valid, scores, -np.inf)
    tied = np.flatnonzero(valid & (top == top[valid].max()))
    best = tied[np.lexsort((thr[tied], feats[tied]))[0]]
    split = SplitParams(int(feats[best]), float(thr[best]))
    return split, float(scores[best]), np.where(valid, scores, np.nan)


@numba.njit(cache=True, nogil=True)
def _split_entries(la, lb, v, go_right):
    n = len(go_right)
    local = np.empty(n, dtype=np.int64)
    counts = np.zeros(2, dtype=np.int64)
    for i in range(n):
        s = 1 if go_right[i] else 0
        local[i] = counts[s]
        counts[s] += 1
    sizes = np.zeros(2, dtype=np.int64)
    for e in range(len(la)):
        if go_right[la[e]] == go_right[lb[e]]:
            sizes[1 if go_right[la[e]] else 0] += 1
    out = []
    for s in range(2):
        out.append((np.empty(sizes[s], dtype=np.int64), np.empty(sizes[s], dtype=np.int64), np.empty(sizes[s])))
    fill = np.zeros(2, dtype=np.int64)
    for e in range(len(la)):
        a = la[e]
        b = lb[e]
        if go_right[a] != go_right[b]:
            continue
        s = 1 if go_right[a] else 0
        j = fill[s]
        out[s][0][j] = local[a]
        out[s][1][j] = local[b]
        out[s][2][j] = v[e]
        fill[s] += 1
    return out[0], out[1]


def _grow(state: _TrainState, idx: np.ndarray, depth: int, rng: np.random.Generator,
          records: list | None, entries=None) -> TreeNode:
    cfg = state.cfg
    n = len(idx)
    if n < 2 * cfg.min_images_per_leaf or depth >= cfg.max_depth:
        return Leaf(tuple(int(i) for i in state.ids[idx]))
    found = _choose_split(state, idx, rng, cfg.min_images_per_leaf, record=records is not None, entries=entries)
    if found is None:
        return Leaf(tuple(int(i) for i in state.ids[idx]))
    split, score, all_scores = found
    go_right = state.features[idx, split.feature_index] > split.threshold
    if records is not None:
        records.append(NodeRecord(depth, split, score, all_scores))
    if entries is None and state.pair._entries is not None:
        entries = _node_entries(state, idx)
    # carry the node's kernel entries down instead of re-filtering the full set
    split_entries = _split_entries(*entries, go_right) if entries is not None else (None, None)
    children = []
    for side, child_entries in zip((~go_right, go_right), split_entries):
        children.append(_grow(state, idx[side], depth + 1, rng, records, child_entries))
    return Internal(split, children[0], children[1])


def _make_state(train: Dataset, kind: PropertyKind, sigma: SigmaParams, cfg: TrainConfig) -> _TrainState:
    boxes = [b for img in train.images for b in img.boxes]
    owner = np.repeat(np.arange(len(train)), [len(img.boxes) for img in train.images])
    props = property_array(boxes, kind) if boxes else np.zeros((0, 2))
    pair = _PairKernel(props, owner, len(train), kind, sigma.sigma, sigma.center)
    return _TrainState(np.asarray(train.features), train.ids, pair, sigma.norm, cfg)


def _tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tree_index]))


def best_split(images_at_node: Sequence[ImageRecord], kind: PropertyKind, sigma: SigmaParams, cfg: TrainConfig,
               rng: np.random.Generator, min_child: int = 1, records: list | None = None) -> SplitParams | None:
    """Best of ``cfg.candidate_splits_per_node`` random axis-aligned splits.

    Candidates leaving fewer than ``min_child`` images on a side are
    discarded; None when no candidate survives.
    """
    if len(images_at_node) < 2:
        return None
    node = Dataset(tuple(images_at_node), len(images_at_node[0].global_features),
                   _app_dim(images_at_node))
    state = _make_state(node, kind, sigma, cfg)
    found = _choose_split(state, np.arange(len(node)), rng, min_child, record=records is not None)
    if found is None:
        return None
    if records is not None:
        records.append(NodeRecord(0, found[0], found[1], found[2]))
    return found[0]


def _app_dim(images: Sequence[ImageRecord]) -> int:
    for img in images:
        for b in img.boxes:
            return len(b.appearance)
    return 1


def train_tree(train: Dataset, kind: PropertyKind, sigma: SigmaParams, cfg: TrainConfig, tree_seed: int,
               records: list | None = None) -> TreeNode:
    """Grow one tree; ``records`` (if given) collects a NodeRecord per internal node."""
    if len(train) == 0:
        raise ValueError("cannot train a tree on an empty dataset")
    state = _make_state(train, PropertyKind(kind), sigma, cfg)
    return _grow(state, np.arange(len(train)), 0, np.random.default_rng(tree_seed), records)


# --------------------------------------------------------------------------
# Forest


@dataclass(frozen=True)
class _FlatTree:
    """Pre-order arrays; leaves have feature -1 and index into ``leaves``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf: np.ndarray
    leaves: tuple[np.ndarray, ...]


def _flatten(root: TreeNode, position: dict[int, int]) -> _FlatTree:
    feature, threshold, left, right, leaf = [], [], [], [], []
    leaves = []

    def visit(node):
        i = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        leaf.append(-1)
        if isinstance(node, Leaf):
            leaf[i] = len(leaves)
            leaves.append(np.array([position[j] for j in node.image_ids], dtype=np.int64))
        else:
            feature[i] = node.split.feature_index
            threshold[i] = node.split.threshold
            left[i] = visit(node.left)
            right[i] = visit(node.right)
        return i

    visit(root)
    return _FlatTree(np.array(feature), np.array(threshold), np.array(left), np.array(right), np.array(leaf),
                     tuple(leaves))


def iter_nodes(root: TreeNode):
    """Pre-order traversal yielding (node, depth)."""
    stack = [(root, 0)]
    while stack:
        node, depth = stack.pop()
        yield node, depth
        if isinstance(node, Internal):
            stack.append((node.right, depth + 1))
            stack.append((node.left, depth + 1))


class Forest:
    """A trained context forest. Immutable; queries are read-only."""

    def __init__(self, trees: Sequence[TreeNode], kind: PropertyKind, sigma: SigmaParams, d_glob: int,
                 train_ids: Sequence[int], k_retrieval: int = 10, config: TrainConfig | None = None):
        if not trees:
            raise ValueError("a forest needs at least one tree")
        self.trees = tuple(trees)
        self.kind = PropertyKind(kind)
        self.sigma = sigma
        self.d_glob = d_glob
        self.train_ids = np.asarray(sorted(train_ids), dtype=np.int64)
        self.k_retrieval = k_retrieval
        self.config = config or TrainConfig(num_trees=len(self.trees))
        position = {int(i): p for p, i in enumerate(self.train_ids)}
        self._flat = tuple(_flatten(t, position) for t in self.trees)

    @property
    def num_trees(self) -> int:
        return len(self.trees)

    def internal_node_counts(self) -> list[int]:
        return [int(np.count_nonzero(t.feature >= 0)) for t in self._flat]

    def depths(self) -> list[int]:
        return [max(d for _, d in iter_nodes(t)) for t in self.trees]

    def vote_array(self, phi: np.ndarray, stats: QueryStats | None = None) -> np.ndarray:
        phi = np.asarray(phi, dtype=np.float64)
        if phi.shape != (self.d_glob,):
            raise ValueError(f"probe dimension {phi.shape[-1] if phi.ndim else 0} != forest d_glob {self.d_glob}")
        votes = np.zeros(len(self.train_ids), dtype=np.int64)
        visits = 0
        for t in self._flat:
            i = 0
            f = t.feature
            while f[i] >= 0:
                visits += 1
                i = t.right[i] if phi[f[i]] > t.threshold[i] else t.left[i]
            votes[t.leaves[t.leaf[i]]] += 1
        if stats is not None:
            stats.node_visits += visits
            stats.queries += 1
        return votes


def train_forest(train: Dataset, kind: PropertyKind, cfg: TrainConfig, k_retrieval: int = 10,
                 workers: int = 1) -> Forest:
    """Estimate sigma once from all training boxes, then grow ``cfg.num_trees`` trees.

    Tree ``t`` is seeded from ``(cfg.seed, t)``; the result does not depend
    on ``workers``.
    """
    kind = PropertyKind(kind)
    boxes = train.all_boxes()
    if not boxes:
        raise ValueError("training set has no boxes; sigma cannot be estimated")
    sigma = estimate_sigma(boxes, kind, cfg.sigma_k_nn, cfg.sigma_spread, None if cfg.center_kernel else 0.0)
    state = _make_state(train, kind, sigma, cfg)
    logger.info("training %d %s trees on %d images (sigma=%.6g)", cfg.num_trees, kind.value, len(train), sigma.sigma)
    if workers <= 1:
        trees = [_train_one(state, t) for t in range(cfg.num_trees)]
    else:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_worker_init,
                                 initargs=(state,)) as pool:
            trees = list(pool.map(_worker_tree, range(cfg.num_trees)))
    return Forest(trees, kind, sigma, train.d_glob, train.ids.tolist(), k_retrieval, cfg)


def _train_one(state: _TrainState, t: int) -> TreeNode:
    return _grow(state, np.arange(len(state.ids)), 0, _tree_rng(state.cfg.seed, t), None)


_WORKER_STATE: _TrainState | None = None


def _worker_init(state: _TrainState) -> None:
    global _WORKER_STATE
    _WORKER_STATE = state


def _worker_tree(t: int) -> TreeNode:
    return _train_one(_WORKER_STATE, t)


def query(forest: Forest, phi: np.ndarray, stats: QueryStats | None = None) -> dict[int, int]:
    """Votes per training image id: the number of trees whose reached leaf holds it."""
    votes = forest.vote_array(phi, stats)
    return dict(zip(forest.train_ids.tolist(), votes.tolist()))


def top_k(ids: np.ndarray, votes: np.ndarray, k: int) -> RetrievalSet:
    """Top ``k`` ids by votes (ties to the lower id), excluding zero votes."""
    keep = np.flatnonzero(votes > 0)
    order = keep[np.lexsort((ids[keep], -votes[keep]))][:k]
    return RetrievalSet(tuple((int(ids[i]), int(votes[i])) for i in order))


def retrieval_set(forest: Forest, phi: np.ndarray, k: int | None = None,
                  stats: QueryStats | None = None) -> RetrievalSet:
    k = forest.k_retrieval if k is None else k
    return top_k(forest.train_ids, forest.vote_array(phi, stats), k)


# --------------------------------------------------------------------------
# Memory accounting

INTERNAL_NODE_BYTES = 16
INDEX_BYTES = 2


@dataclass(frozen=True)
class Footprint:
    internal_bytes: int
    leaf_bytes: int
    total: int
    mean_internal_nodes: float


def footprint_from_counts(internal_nodes_per_tree: Sequence[int], stored_indices_per_tree: Sequence[int]) -> Footprint:
    internal = INTERNAL_NODE_BYTES * int(sum(internal_nodes_per_tree))
    leaf = INDEX_BYTES * int(sum(stored_indices_per_tree))
    mean = float(np.mean(internal_nodes_per_tree)) if len(internal_nodes_per_tree) else 0.0
    return Footprint(internal, leaf, internal + leaf, mean)


def memory_footprint(forest: Forest) -> Footprint:
    """16 bytes per internal node (threshold, feature id, two child ids) plus 2 bytes per stored image index."""
    stored = [sum(len(a) for a in t.leaves) for t in forest._flat]
    return footprint_from_counts(forest.internal_node_counts(), stored)


# --------------------------------------------------------------------------
# Serialization
#
# magic "CONF" | u16 version | u32 header length | header JSON (utf-8)
# u32 tree count, then per tree: u32 node count and the nodes in pre-order,
#   internal: u8 0 | u32 feature | f64 threshold
#   leaf:     u8 1 | u32 id count | i64 ids...
# All integers little-endian, doubles IEEE-754 binary64.


def _header(forest: Forest) -> dict:
    return {
        "kind": forest.kind.value,
        "sigma": forest.sigma.sigma,
        "sigma_k_nn": forest.sigma.k_nn,
        "sigma_degenerate": forest.sigma.degenerate,
        "sigma_center": forest.sigma.center,
        "d_glob": forest.d_glob,
        "k_retrieval": forest.k_retrieval,
        "config": asdict(forest.config),
        "train_ids": forest.train_ids.tolist(),
    }


def forest_to_bytes(forest: Forest) -> bytes:
    header = json.dumps(_header(forest), sort_keys=True).encode()
    out = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(header)), header, struct.pack("<I", forest.num_trees)]
    for root in forest.trees:
        nodes = list(iter_nodes(root))
        out.append(struct.pack("<I", len(nodes)))
        for node, _ in nodes:
            if isinstance(node, Internal):
                out.append(struct.pack("<BId", 0, node.split.feature_index, node.split.threshold))
            else:
                out.append(struct.pack("<BI", 1, len(node.image_ids)))
                out.append(np.asarray(node.image_ids, dtype="<i8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ForestFormatError(f"truncated forest file at byte {self.pos} (wanted {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_tree(r: _Reader, remaining: list[int]) -> TreeNode:
    if remaining[0] <= 0:
        raise ForestFormatError("tree node count exhausted before the tree was complete")
    remaining[0] -= 1
    (tag,) = r.unpack("<B")
    if tag == 0:
        feature, threshold = r.unpack("<Id")
        left = _read_tree(r, remaining)
        right = _read_tree(r, remaining)
        return Internal(SplitParams(feature, threshold), left, right)
    if tag == 1:
        (count,) = r.unpack("<I")
        if count == 0:
            raise ForestFormatError("empty leaf")
        ids = np.frombuffer(r.take(8 * count), dtype="<i8")
        return Leaf(tuple(int(i) for i in ids))
    raise ForestFormatError(f"unknown node tag {tag}")


def forest_from_bytes(data: bytes) -> Forest:
    r = _Reader(data)
    magic = r.take(4)
    if magic != MAGIC:
        raise ForestFormatError(f"bad magic {magic!r}; not a forest file or unsupported version")
    version, header_len = r.unpack("<HI")
    if version != FORMAT_VERSION:
        raise ForestFormatError(f"unsupported forest format version {version} (expected {FORMAT_VERSION})")
    try:
        header = json.loads(r.take(header_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ForestFormatError(f"corrupt header: {e}") from None
    (num_trees,) = r.unpack("<I")
    trees = []
    for _ in range(num_trees):
        (count,) = r.unpack("<I")
        remaining = [count]
        trees.append(_read_tree(r, remaining))
        if remaining[0] != 0:
            raise ForestFormatError("tree node count does not match the encoded tree")
    if r.pos != len(data):
        raise ForestFormatError(f"{len(data) - r.pos} trailing bytes after the last tree")
    kind = PropertyKind(header["kind"])
    sigma = SigmaParams(header["sigma"], kind, header["sigma_k_nn"], header["sigma_degenerate"], header["sigma_center"])
    cfg = TrainConfig(**header["config"])
    return Forest(trees, kind, sigma, header["d_glob"], header["train_ids"], header["k_retrieval"], cfg)


def save_forest(forest: Forest, path: str | Path) -> None:
    if not str(path):
        raise OSError("empty path")
    Path(path).write_bytes(forest_to_bytes(forest))


def load_forest(path: str | Path) -> Forest:
    if not str(path):
        raise OSError("empty path")
    return forest_from_bytes(Path(path).read_bytes())
