"""Exhaustive-split reference tree for checking forest tree growth.

Grows a tree by scoring every (column, position) split of every node
with exact Fraction arithmetic over explicit python loops, instead of
the library's vectorized float path. The growth rule is the documented
one: size-weighted Gini impurity of the children, lowest candidate
column then lowest threshold on ties, midpoint thresholds clamped to
the lower value when rounding would break the partition, and a strict
impurity decrease required to keep a split. Random draws (candidate
columns, leaf tie-breaks) call the supplied generator exactly where the
documented algorithm does, so a generator seeded the same way stays in
step with the library's.

Also provides a fixed corpus of small datasets (at most 12 rows and 3
features, heavy on duplicate values) used to compare the two
implementations split for split.
"""

from collections import Counter
from fractions import Fraction

import numpy as np


def grow_reference_tree(X, y, rows, mtry, rng, min_node_size=1,
                        max_depth=None, classes=None):
    """Reference tree as a list of node dicts in preorder.

    Node keys: feature (-1 at leaves), threshold, left, right, label.
    `rows` may repeat row indices, as a bootstrap bag does.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    rows = [int(r) for r in np.asarray(rows)]
    if classes is None:
        classes = sorted(set(int(v) for v in y))
    else:
        classes = [int(v) for v in classes]
    class_pos = {c: i for i, c in enumerate(classes)}
    p = X.shape[1]

    nodes = []

    def new_node():
        nodes.append({"feature": -1, "threshold": 0.0, "left": -1,
                      "right": -1, "label": 0})
        return len(nodes) - 1

    def make_leaf(nid, node_rows):
        counts = Counter(class_pos[int(y[r])] for r in node_rows)
        top = max(counts.values())
        tied = sorted(k for k, v in counts.items() if v == top)
        k = tied[0] if len(tied) == 1 else tied[int(rng.integers(len(tied)))]
        nodes[nid]["label"] = classes[k]

    root = new_node()
    stack = [(root, rows, 0)]
    while stack:
        nid, node_rows, depth = stack.pop()
        labels = [class_pos[int(y[r])] for r in node_rows]
        if (len(set(labels)) == 1 or len(node_rows) <= min_node_size
                or (max_depth is not None and depth >= max_depth)):
            make_leaf(nid, node_rows)
            continue
        cand = sorted(int(c) for c in rng.choice(p, size=mtry, replace=False))
        n_node = len(node_rows)
        best = None  # (score, candidate position, split position, numerator, order)
        for cj, col in enumerate(cand):
            order = sorted(range(n_node),
                           key=lambda i: (X[node_rows[i], col], i))
            vals = [float(X[node_rows[i], col]) for i in order]
            labs = [labels[i] for i in order]
            for pos in range(n_node - 1):
                if not vals[pos + 1] > vals[pos]:
                    continue
                n_l, n_r = pos + 1, n_node - pos - 1
                left_counts = Counter(labs[:pos + 1])
                right_counts = Counter(labs[pos + 1:])
                num = (n_r * (n_l * n_l - sum(v * v for v in left_counts.values()))
                       + n_l * (n_r * n_r - sum(v * v for v in right_counts.values())))
                score = Fraction(num, n_node * n_l * n_r)
                if best is None or score < best[0]:
                    best = (score, cj, pos, num, order)
        if best is None:
            make_leaf(nid, node_rows)
            continue
        _, cj, pos, child_num, order = best
        counts = Counter(labels)
        parent_num = n_node * n_node - sum(v * v for v in counts.values())
        n_l, n_r = pos + 1, n_node - pos - 1
        if not (Fraction(child_num, n_node * n_l * n_r)
                < Fraction(parent_num, n_node * n_node)):
            make_leaf(nid, node_rows)
            continue
        a = float(X[node_rows[order[pos]], cand[cj]])
        b = float(X[node_rows[order[pos + 1]], cand[cj]])
        thr = (a + b) / 2.0
        if thr >= b:
            thr = a
        srows = [node_rows[i] for i in order]
        nodes[nid]["feature"] = cand[cj]
        nodes[nid]["threshold"] = thr
        lid = new_node()
        rid = new_node()
        nodes[nid]["left"], nodes[nid]["right"] = lid, rid
        stack.append((rid, srows[pos + 1:], depth + 1))
        stack.append((lid, srows[:pos + 1], depth + 1))
    return nodes


def reference_predict(nodes, x):
    """Label for one sample by explicit descent (value <= threshold goes left)."""
    i = 0
    while nodes[i]["feature"] >= 0:
        if x[nodes[i]["feature"]] <= nodes[i]["threshold"]:
            i = nodes[i]["left"]
        else:
            i = nodes[i]["right"]
    return nodes[i]["label"]


def split_corpus():
    """Fixed list of (X, y) datasets, each at most 12 rows by 3 features.

    Mixes hand-picked degenerate shapes (no valid split, pure labels,
    alternating labels, duplicated values) with seeded integer-grid
    draws whose coarse value grid forces plenty of duplicate values and
    score ties.
    """
    rng = np.random.default_rng(411)
    datasets = [
        (np.zeros((4, 2)), np.array([1, 1, 2, 2])),
        (np.arange(6, dtype=float)[:, None], np.array([1, 2, 1, 2, 1, 2])),
        (np.array([[0.0], [0.0], [1.0], [1.0]]), np.array([3, 3, 5, 5])),
        (np.array([[0.0], [1.0]]), np.array([7, 7])),
        (np.repeat(np.arange(4.0), 3)[:, None],
         np.array([1, 1, 2, 2, 2, 3, 3, 1, 1, 3, 3, 2])),
        (np.column_stack([np.tile([0.0, 1.0], 6), np.repeat([0.0, 1.0, 2.0], 4)]),
         np.array([1, 2, 2, 1, 1, 2, 2, 1, 1, 2, 2, 1])),
    ]
    for n in (2, 3, 4, 5, 7, 9, 12):
        for p in (1, 2, 3):
            for rep in range(4):
                X = rng.integers(0, 4, size=(n, p)).astype(float)
                weights = rng.integers(1, 4, size=p)
                k = int(rng.integers(2, min(9, n) + 1))
                if rep % 3 == 0:
                    yv = (X @ weights).astype(int) % k
                elif rep % 3 == 1:
                    yv = rng.integers(0, k, size=n)
                else:
                    yv = ((X[:, 0] > X[:, 0].mean()).astype(int)
                          + 2 * rng.integers(0, 2, size=n))
                datasets.append((X, yv + 1))
    return datasets
