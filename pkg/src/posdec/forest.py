"""Random forest with Gini-split trees, OOB error, permutation importance.

Implemented from first principles on numpy. Every random decision draws
from a stream derived from the forest seed and the logical task (tree
index, OOB tie-breaks, per-tree permutations), so training, evaluation
and importance are bit-reproducible regardless of worker count.

Split scores are computed from integer class counts as exact rational
numerators and denominators before the final division, so independent
implementations of the same rule produce bit-identical scores and the
documented tie-breaks (lowest feature index, then lowest threshold) are
meaningful.
"""

from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import seeded_rng
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

# stream ids under the forest seed
_STREAM_TREE = 1
_STREAM_OOB = 2
_STREAM_PERM = 3
_STREAM_PREDICT = 4

_RF_MAGIC = b"POSDRF01"
_RF_VERSION = 1


def mtry_default(n_features: int) -> int:
    """Candidate features per split: floor(sqrt(p)), at least 1."""
    if n_features < 1:
        raise ConfigError(f"need at least one feature, got {n_features}")
    return max(1, math.isqrt(n_features))


def bootstrap_sample(n_rows: int, rng: np.random.Generator):
    """Bag of n_rows draws with replacement, and the out-of-bag rows.

    Bag and OOB rows partition the row set: every row is either drawn at
    least once or out of bag.
    """
    if n_rows < 1:
        raise DataError("cannot bootstrap an empty row set")
    bag = rng.integers(0, n_rows, size=n_rows)
    counts = np.bincount(bag, minlength=n_rows)
    return bag, np.flatnonzero(counts == 0)


# ---------------------------------------------------------------------------
# trees
# ---------------------------------------------------------------------------

@dataclass
class Tree:
    """Decision tree as parallel node arrays (preorder, left child first).

    `feature` is -1 at leaves; `label` holds the predicted class at leaves
    and 0 elsewhere. Rows with value <= threshold go left.
    """

    feature: np.ndarray    # int32
    threshold: np.ndarray  # float64
    left: np.ndarray       # int32
    right: np.ndarray      # int32
    label: np.ndarray      # int16

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def used_features(self) -> np.ndarray:
        """Sorted unique feature indices this tree splits on."""
        return np.unique(self.feature[self.feature >= 0])

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Predicted class per row (vectorized descent)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        node = np.zeros(X.shape[0], dtype=np.int32)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                return self.label[node].copy()
            r, nd = rows[active], node[active]
            go_left = X[r, f[active]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])


def _best_split(Xn: np.ndarray, y_enc: np.ndarray, n_classes: int):
    """Best split over one node's candidate columns.

    Scores are the size-weighted Gini impurity of the children as the
    rational num / (n * n_left * n_right); every intermediate is an exact
    integer below 2**53, so equal rationals give equal floats and the tie
    breaks (lowest candidate column, then lowest threshold) are exact.
    Returns (column, threshold, exact numerator, sort order, position) or
    None when no column admits a split.
    """
    n, m = Xn.shape
    order = np.argsort(Xn, axis=0, kind="stable")
    sv = np.take_along_axis(Xn, order, axis=0)
    sy = y_enc[order]                                     # (n, m)
    onehot = np.zeros((n, m, n_classes), dtype=np.float64)
    np.put_along_axis(onehot, sy[:, :, None], 1.0, axis=2)
    cum = onehot.cumsum(axis=0)                           # exact integer counts
    total = cum[-1]                                       # (m, K)

    n_left = np.arange(1, n, dtype=np.float64)[:, None]   # (n-1, 1)
    n_right = n - n_left
    sumsq_left = (cum[:-1] ** 2).sum(axis=2)
    sumsq_right = ((total[None, :, :] - cum[:-1]) ** 2).sum(axis=2)
    num = (n_right * (n_left * n_left - sumsq_left)
           + n_left * (n_right * n_right - sumsq_right))
    score = num / (n * n_left * n_right)

    valid = sv[1:] > sv[:-1]
    if not valid.any():
        return None
    score[~valid] = np.inf
    pos = score.argmin(axis=0)                 # per column, first min: lowest threshold
    col_best = score[pos, np.arange(m)]
    j = int(col_best.argmin())                 # first min: lowest candidate column
    if not np.isfinite(col_best[j]):
        return None
    pj = int(pos[j])
    a, b = sv[pj, j], sv[pj + 1, j]
    thr = (a + b) / 2.0
    if thr >= b:  # adjacent floats: midpoint rounded up would break the partition
        thr = a
    return j, thr, int(num[pj, j]), order[:, j], pj


def grow_tree(X: np.ndarray, y: np.ndarray, rows: np.ndarray, mtry: int,
              rng: np.random.Generator, min_node_size: int = 1,
              max_depth: int = None, classes: np.ndarray = None) -> Tree:
    """Grow one tree on the given rows (a bag may repeat rows).

    At each node, `mtry` distinct candidate features are drawn; the split
    maximizing the Gini impurity decrease is taken (candidate thresholds
    are midpoints between consecutive distinct sorted values). Nodes stop
    at purity, at `min_node_size` rows, at `max_depth`, or when no
    candidate split reduces impurity. Leaf labels are the majority class,
    ties broken uniformly at random from the tree's stream.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    rows = np.asarray(rows, dtype=np.intp)
    if classes is None:
        classes = np.unique(y)
    n_classes = len(classes)
    y_enc = np.searchsorted(classes, y)
    p = X.shape[1]
    if not 1 <= mtry <= p:
        raise ConfigError(f"mtry must be in 1..{p}, got {mtry}")
    if min_node_size < 1:
        raise ConfigError(f"min_node_size must be >= 1, got {min_node_size}")

    feature, threshold, left, right, label = [], [], [], [], []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        label.append(0)
        return len(feature) - 1

    def make_leaf(nid: int, counts: np.ndarray):
        top = counts.max()
        tied = np.flatnonzero(counts == top)
        k = tied[0] if len(tied) == 1 else tied[rng.integers(len(tied))]
        label[nid] = int(classes[k])

    root = new_node()
    # stack of (node id, rows in node, depth); right child pushed first so
    # the left child is processed and numbered first (preorder)
    stack = [(root, rows, 0)]
    while stack:
        nid, nrows, depth = stack.pop()
        ye = y_enc[nrows]
        counts = np.bincount(ye, minlength=n_classes)
        if ((counts > 0).sum() == 1 or len(nrows) <= min_node_size
                or (max_depth is not None and depth >= max_depth)):
            make_leaf(nid, counts)
            continue
        cand = np.sort(rng.choice(p, size=mtry, replace=False))
        found = _best_split(X[np.ix_(nrows, cand)], ye, n_classes)
        if found is None:
            make_leaf(nid, counts)
            continue
        j, thr, child_num, order, pj = found
        # accept only a strict impurity decrease; the comparison
        #   child_num / (n nL nR)  <  (n^2 - sumsq) / n^2
        # is exact in integer cross-multiplication
        n_node = len(nrows)
        n_l = pj + 1
        n_r = n_node - n_l
        parent_num = n_node * n_node - int((counts.astype(np.int64) ** 2).sum())
        if not (child_num * n_node * n_node
                < parent_num * n_node * n_l * n_r):
            make_leaf(nid, counts)
            continue
        srows = nrows[order]
        feature[nid] = int(cand[j])
        threshold[nid] = thr
        lid = new_node()
        rid = new_node()
        left[nid], right[nid] = lid, rid
        stack.append((rid, srows[pj + 1:], depth + 1))
        stack.append((lid, srows[:pj + 1], depth + 1))

    return Tree(np.array(feature, dtype=np.int32),
                np.array(threshold, dtype=np.float64),
                np.array(left, dtype=np.int32),
                np.array(right, dtype=np.int32),
                np.array(label, dtype=np.int16))


# ---------------------------------------------------------------------------
# forest
# ---------------------------------------------------------------------------

@dataclass
class Forest:
    """Trained ensemble plus everything needed to reproduce its analysis."""

    trees: list
    bag_counts: np.ndarray   # (n_trees, n_rows) uint16
    classes: np.ndarray      # sorted class labels seen at training
    seed: int
    mtry: int
    n_features: int
    min_node_size: int = 1
    max_depth: int = None

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def n_rows(self) -> int:
        return self.bag_counts.shape[1]

    def oob_rows(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.bag_counts[t] == 0)


def train_forest(X: np.ndarray, y: np.ndarray, n_trees: int = 900,
                 mtry: int = None, seed: int = 0, threads: int = 1,
                 min_node_size: int = 1, max_depth: int = None) -> Forest:
    """Train `n_trees` bagged trees; deterministic for a given seed.

    Each tree draws its bag and all its split decisions from a stream
    derived from (seed, tree index), so the result is independent of
    `threads`.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(y) != X.shape[0]:
        raise DataError(f"bad training shapes: X {X.shape}, y {y.shape}")
    n, p = X.shape
    if n < 2:
        raise DataError("need at least two training rows")
    if n_trees < 1:
        raise ConfigError(f"n_trees must be >= 1, got {n_trees}")
    if n >= 0xFFFF:
        raise DataError("bag counts stored as uint16; row count too large")
    if mtry is None:
        mtry = mtry_default(p)
    classes = np.unique(y)

    def build(t: int):
        rng = seeded_rng(seed, _STREAM_TREE, t)
        bag, _ = bootstrap_sample(n, rng)
        tree = grow_tree(X, y, bag, mtry, rng, min_node_size=min_node_size,
                         max_depth=max_depth, classes=classes)
        return tree, np.bincount(bag, minlength=n).astype(np.uint16)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(build, range(n_trees)))
    else:
        results = [build(t) for t in range(n_trees)]

    return Forest(trees=[r[0] for r in results],
                  bag_counts=np.stack([r[1] for r in results]),
                  classes=classes, seed=seed, mtry=mtry, n_features=p,
                  min_node_size=min_node_size, max_depth=max_depth)


def _encode(classes: np.ndarray, labels: np.ndarray) -> np.ndarray:
    enc = np.searchsorted(classes, labels)
    enc = np.clip(enc, 0, len(classes) - 1)
    return enc


def _vote_winners(votes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row-wise argmax with uniform random tie-break, rows in order."""
    top = votes.max(axis=1, keepdims=True)
    is_top = votes == top
    n_top = is_top.sum(axis=1)
    winners = votes.argmax(axis=1)
    for i in np.flatnonzero(n_top > 1):  # draw only on actual ties
        tied = np.flatnonzero(is_top[i])
        winners[i] = tied[rng.integers(len(tied))]
    return winners


def predict(forest: Forest, X: np.ndarray,
            rng: np.random.Generator = None) -> np.ndarray:
    """Majority vote over trees; vote ties are broken uniformly at random.

    Pass an explicit stream for sequenced prediction (as the evaluation
    stage does); by default a fresh stream derived from the forest seed is
    used, so repeated calls with identical input are identical.
    """
    single = np.asarray(X).ndim == 1
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != forest.n_features:
        raise DataError(
            f"{X.shape[1]} feature columns, forest expects {forest.n_features}")
    if rng is None:
        rng = seeded_rng(forest.seed, _STREAM_PREDICT)
    votes = np.zeros((X.shape[0], len(forest.classes)), dtype=np.int32)
    rows = np.arange(X.shape[0])
    for tree in forest.trees:
        votes[rows, _encode(forest.classes, tree.predict(X))] += 1
    winners = forest.classes[_vote_winners(votes, rng)]
    return winners[0] if single else winners


def vote_counts(forest: Forest, X: np.ndarray) -> np.ndarray:
    """Per-row class vote counts (rows sum to the number of trees)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    votes = np.zeros((X.shape[0], len(forest.classes)), dtype=np.int32)
    rows = np.arange(X.shape[0])
    for tree in forest.trees:
        votes[rows, _encode(forest.classes, tree.predict(X))] += 1
    return votes


def oob_error(forest: Forest, X: np.ndarray, y: np.ndarray) -> float:
    """Out-of-bag error: each row is voted on only by trees that did not
    see it; rows with no OOB votes are excluded from the denominator."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n = forest.n_rows
    if X.shape[0] != n or len(y) != n:
        raise DataError("OOB error needs the original training rows")
    votes = np.zeros((n, len(forest.classes)), dtype=np.int32)
    for t, tree in enumerate(forest.trees):
        oob = forest.oob_rows(t)
        if oob.size == 0:
            continue
        votes[oob, _encode(forest.classes, tree.predict(X[oob]))] += 1
    counted = votes.sum(axis=1) > 0
    if not counted.any():
        raise DataError("no row has OOB votes; too few trees")
    rng = seeded_rng(forest.seed, _STREAM_OOB)
    winners = _vote_winners(votes[counted], rng)
    wrong = winners != _encode(forest.classes, y[counted])
    return float(wrong.mean())


def permutation_importance(forest: Forest, X: np.ndarray, y: np.ndarray,
                           threads: int = 1, permute=None) -> np.ndarray:
    """Mean OOB error increase per feature, as percent of the OOB error.

    For each tree and each feature that tree actually uses, the feature's
    values are permuted among the tree's OOB rows and the increase of that
    tree's OOB error is recorded. Scores average the raw increases over
    all trees (trees not using a feature contribute an exact 0) and are
    expressed as percent of the forest's baseline OOB error. If that
    baseline is 0 the percent is undefined: raw mean increases are
    returned and a warning is logged.

    `permute` is a test hook mapping (rng, n) to a permutation; the
    default draws rng.permutation(n).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if permute is None:
        permute = lambda rng, m: rng.permutation(m)

    def tree_deltas(t: int) -> dict:
        tree = forest.trees[t]
        oob = forest.oob_rows(t)
        deltas = {}
        if oob.size == 0:
            return deltas
        Xo = X[oob].copy()
        yo = y[oob]
        base = float((tree.predict(Xo) != yo).mean())
        rng = seeded_rng(forest.seed, _STREAM_PERM, t)
        for f in tree.used_features():
            perm = permute(rng, oob.size)
            saved = Xo[:, f].copy()
            Xo[:, f] = saved[perm]
            err = float((tree.predict(Xo) != yo).mean())
            Xo[:, f] = saved
            deltas[int(f)] = err - base
        return deltas

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            all_deltas = list(pool.map(tree_deltas, range(forest.n_trees)))
    else:
        all_deltas = [tree_deltas(t) for t in range(forest.n_trees)]

    raw = np.zeros(forest.n_features, dtype=np.float64)
    for deltas in all_deltas:  # fixed tree order: deterministic summation
        for f, d in deltas.items():
            raw[f] += d
    raw /= forest.n_trees

    baseline = oob_error(forest, X, y)
    if baseline == 0.0:
        log.warning("baseline OOB error is 0; returning raw importance "
                    "increases instead of percentages")
        return raw
    return raw / baseline * 100.0


# ---------------------------------------------------------------------------
# forest container
# ---------------------------------------------------------------------------

def write_forest(forest: Forest, path):
    """Binary container: header, per-tree bag counts and node arrays."""
    with open(path, "wb") as fh:
        fh.write(_RF_MAGIC)
        fh.write(struct.pack("<H", _RF_VERSION))
        fh.write(struct.pack("<QIIIIi", forest.seed, forest.n_trees,
                             forest.mtry, forest.n_features,
                             forest.min_node_size,
                             -1 if forest.max_depth is None else forest.max_depth))
        fh.write(struct.pack("<I", forest.n_rows))
        fh.write(struct.pack("<H", len(forest.classes)))
        fh.write(np.ascontiguousarray(forest.classes, dtype="<i2").tobytes())
        for t, tree in enumerate(forest.trees):
            fh.write(np.ascontiguousarray(forest.bag_counts[t], dtype="<u2").tobytes())
            fh.write(struct.pack("<I", tree.n_nodes))
            fh.write(np.ascontiguousarray(tree.feature, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(tree.threshold, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(tree.left, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(tree.right, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(tree.label, dtype="<i2").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise DataError(f"truncated forest file while reading {what}")
    return raw


def read_forest(path) -> Forest:
    with open(path, "rb") as fh:
        if fh.read(len(_RF_MAGIC)) != _RF_MAGIC:
            raise DataError(f"{path}: not a forest file (bad magic)")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != _RF_VERSION:
            raise DataError(f"{path}: unsupported forest version {version}")
        seed, n_trees, mtry, n_features, min_node, max_depth = struct.unpack(
            "<QIIIIi", _read_exact(fh, 28, "header"))
        (n_rows,) = struct.unpack("<I", _read_exact(fh, 4, "row count"))
        (n_classes,) = struct.unpack("<H", _read_exact(fh, 2, "class count"))
        classes = np.frombuffer(
            _read_exact(fh, 2 * n_classes, "classes"), dtype="<i2").astype(np.int64)
        trees, bags = [], []
        for _ in range(n_trees):
            bags.append(np.frombuffer(
                _read_exact(fh, 2 * n_rows, "bag counts"), dtype="<u2").copy())
            (n_nodes,) = struct.unpack("<I", _read_exact(fh, 4, "node count"))
            feature = np.frombuffer(
                _read_exact(fh, 4 * n_nodes, "features"), dtype="<i4").copy()
            threshold = np.frombuffer(
                _read_exact(fh, 8 * n_nodes, "thresholds"), dtype="<f8").copy()
            lft = np.frombuffer(
                _read_exact(fh, 4 * n_nodes, "left"), dtype="<i4").copy()
            rgt = np.frombuffer(
                _read_exact(fh, 4 * n_nodes, "right"), dtype="<i4").copy()
            lab = np.frombuffer(
                _read_exact(fh, 2 * n_nodes, "labels"), dtype="<i2").copy()
            trees.append(Tree(feature, threshold, lft, rgt, lab))
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after forest data")
    return Forest(trees=trees, bag_counts=np.stack(bags), classes=classes,
                  seed=seed, mtry=mtry, n_features=n_features,
                  min_node_size=min_node,
                  max_depth=None if max_depth < 0 else max_depth)
