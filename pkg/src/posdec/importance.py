"""Aggregation of per-fold permutation importances.

Per-fold feature importances (mean percent OOB-error increase) are
averaged into one score per feature (FIS), summed per channel and band
(CIS), and sliced at the best channel per window (WIS) and for the
whole-trial feature (IS). Channel maps can be rasterized onto a scalp
grid for plotting.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.spatial

from .core import (BETA, MU, N_SLIDING, N_WINDOWS, FeatureLayout,
                   FeatureMatrix, Montage)
from .errors import DataError
from .evaluate import loso_folds
from .forest import Forest, permutation_importance, read_forest
from .robust import impute_outliers


# ---------------------------------------------------------------------------
# score aggregation
# ---------------------------------------------------------------------------

def average_fis(fold_vectors) -> np.ndarray:
    """Element-wise arithmetic mean of per-fold importance vectors."""
    vecs = [np.asarray(v, dtype=np.float64) for v in fold_vectors]
    if not vecs:
        raise DataError("no fold importance vectors to average")
    length = vecs[0].shape
    if any(v.shape != length for v in vecs):
        raise DataError("fold importance vectors differ in length")
    return np.mean(vecs, axis=0)


def channel_scores(fis: np.ndarray, layout: FeatureLayout, band: int) -> np.ndarray:
    """Per-channel importance: sum of the channel's 42 entries in `band`."""
    fis = np.asarray(fis, dtype=np.float64)
    if fis.shape != (layout.n_features,):
        raise DataError(
            f"fis has length {fis.shape}, layout expects {layout.n_features}")
    per_channel = fis.reshape(layout.n_channels, 2, N_WINDOWS)
    return per_channel[:, band, :].sum(axis=1)


def top_channel(cis_mu: np.ndarray, cis_beta: np.ndarray) -> int:
    """Channel whose score tops both per-band vectors.

    Argmax over the concatenation of the two vectors, reported as a
    channel index; exact ties go to the lowest channel index (and the
    μ vector wins over β at the same channel, which maps to the same
    index anyway).
    """
    cis_mu = np.asarray(cis_mu)
    cis_beta = np.asarray(cis_beta)
    if cis_mu.shape != cis_beta.shape:
        raise DataError("per-band channel score lengths differ")
    best = np.maximum(cis_mu, cis_beta)
    return int(np.argmax(best))


def window_scores(fis: np.ndarray, layout: FeatureLayout, channel: int,
                  band: int):
    """(41 sliding-window scores, whole-trial score) at one channel/band."""
    fis = np.asarray(fis, dtype=np.float64)
    wis = np.array([fis[layout.feature_index(channel, band, w)]
                    for w in range(N_SLIDING)])
    whole = float(fis[layout.feature_index(channel, band, "whole")])
    return wis, whole


@dataclass
class ImportanceReport:
    """FIS plus its channel, window, and whole-trial aggregations."""

    layout: FeatureLayout
    fis: np.ndarray          # (n_features,) mean over folds
    cis_mu: np.ndarray       # (n_channels,)
    cis_beta: np.ndarray     # (n_channels,)
    top_channel: int
    wis_mu: np.ndarray       # (41,) at top_channel
    wis_beta: np.ndarray
    is_mu: float
    is_beta: float
    n_folds: int = 0

    @property
    def top_channel_name(self) -> str:
        return self.layout.channel_names[self.top_channel]


def summarize_fis(layout: FeatureLayout, fis: np.ndarray,
                  n_folds: int = 0) -> ImportanceReport:
    """Build the full report from an averaged importance vector."""
    cis_mu = channel_scores(fis, layout, MU)
    cis_beta = channel_scores(fis, layout, BETA)
    best = top_channel(cis_mu, cis_beta)
    wis_mu, is_mu = window_scores(fis, layout, best, MU)
    wis_beta, is_beta = window_scores(fis, layout, best, BETA)
    return ImportanceReport(layout=layout, fis=np.asarray(fis, np.float64),
                            cis_mu=cis_mu, cis_beta=cis_beta,
                            top_channel=best, wis_mu=wis_mu,
                            wis_beta=wis_beta, is_mu=is_mu, is_beta=is_beta,
                            n_folds=n_folds)


def compute_importance(fm: FeatureMatrix, forests: dict, threads: int = 1,
                       impute_mode: str = "train-mean") -> ImportanceReport:
    """Permutation importance per fold forest, averaged into one report.

    `forests` maps each held-out subject to its fold's trained Forest or
    to a file path of one, as produced by the cross-validation stage.
    Each fold's importance is computed on the same imputed training rows
    the forest was fit on; forests loaded from disk are released after
    their fold, so at most one is resident at a time.
    """
    vectors = []
    for held_out, train_subjects in loso_folds(fm.subjects()):
        if held_out not in forests:
            raise DataError(f"no fold forest for held-out subject {held_out}")
        forest = forests[held_out]
        if not isinstance(forest, Forest):
            forest = read_forest(forest)
        values = impute_outliers(fm, train_subjects, test_mode=impute_mode)
        train_rows = np.flatnonzero(fm.subject_ids != held_out)
        if forest.n_features != fm.n_features:
            raise DataError(
                f"fold forest for {held_out} expects {forest.n_features} "
                f"features, matrix has {fm.n_features}")
        vectors.append(permutation_importance(
            forest, values[train_rows], fm.labels[train_rows], threads=threads))
        del forest
    fis = average_fis(vectors)
    return summarize_fis(fm.layout, fis, n_folds=len(vectors))


# ---------------------------------------------------------------------------
# scalp-map rasterization
# ---------------------------------------------------------------------------

def idw_interpolate(positions: np.ndarray, values: np.ndarray,
                    queries: np.ndarray, power: float = 2.0) -> np.ndarray:
    """Inverse-distance-weighted interpolation, exact at the nodes."""
    positions = np.asarray(positions, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    d2 = ((queries[:, None, :] - positions[None, :, :]) ** 2).sum(axis=2)
    out = np.empty(len(queries))
    at_node = d2 < 1e-24
    hit = at_node.any(axis=1)
    out[hit] = values[np.argmax(at_node[hit], axis=1)]
    free = ~hit
    if free.any():
        w = d2[free] ** (-power / 2.0)
        out[free] = (w * values).sum(axis=1) / w.sum(axis=1)
    return out


def topomap_grid(values: np.ndarray, montage: Montage, resolution: int = 64):
    """Rasterize per-channel values onto a square scalp grid.

    Inverse-distance weighting (power 2) over the electrode positions,
    evaluated on a resolution × resolution grid spanning the electrode
    bounding box and clipped to the convex hull of the electrodes
    (outside cells are NaN). Degenerate montages whose positions do not
    span an area skip the hull clip. Returns (xs, ys, grid) with
    grid[j, i] holding the value at (xs[i], ys[j]).
    """
    values = np.asarray(values, dtype=np.float64)
    pos = np.asarray(montage.positions, dtype=np.float64)
    if values.shape != (len(pos),):
        raise DataError("one value per montage channel required")
    if resolution < 2:
        raise DataError("grid resolution must be at least 2")
    uniq = {(float(x), float(y)) for x, y in pos}
    if len(uniq) != len(pos):
        raise DataError("montage has duplicate electrode positions")
    xs = np.linspace(pos[:, 0].min(), pos[:, 0].max(), resolution)
    ys = np.linspace(pos[:, 1].min(), pos[:, 1].max(), resolution)
    gx, gy = np.meshgrid(xs, ys)
    queries = np.column_stack([gx.ravel(), gy.ravel()])
    grid = idw_interpolate(pos, values, queries)
    try:
        hull = scipy.spatial.Delaunay(pos)
        inside = hull.find_simplex(queries) >= 0
        grid = np.where(inside, grid, np.nan)
    except scipy.spatial.QhullError:
        pass
    return xs, ys, grid.reshape(resolution, resolution)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v))


def write_importance_report(report: ImportanceReport, directory):
    """Write the delimited report set into `directory`.

    fis.tsv (one row per feature), cis.tsv (one row per channel),
    wis.tsv (windows at the top channel), and summary.kv (scalars).
    """
    os.makedirs(directory, exist_ok=True)
    layout = report.layout
    with open(os.path.join(directory, "fis.tsv"), "w") as fh:
        fh.write("feature\tfis\n")
        for j in range(layout.n_features):
            fh.write(f"{layout.feature_label(j)}\t{_fmt(report.fis[j])}\n")
    with open(os.path.join(directory, "cis.tsv"), "w") as fh:
        fh.write("channel\tcis_mu\tcis_beta\n")
        for c, name in enumerate(layout.channel_names):
            fh.write(f"{name}\t{_fmt(report.cis_mu[c])}\t"
                     f"{_fmt(report.cis_beta[c])}\n")
    with open(os.path.join(directory, "wis.tsv"), "w") as fh:
        fh.write("window\tcenter_seconds\twis_mu\twis_beta\n")
        for w in range(N_SLIDING):
            center = layout.window_center_seconds(w)
            fh.write(f"{w}\t{_fmt(center)}\t{_fmt(report.wis_mu[w])}\t"
                     f"{_fmt(report.wis_beta[w])}\n")
        fh.write(f"whole\t{_fmt(layout.trial_seconds / 2.0)}\t"
                 f"{_fmt(report.is_mu)}\t{_fmt(report.is_beta)}\n")
    with open(os.path.join(directory, "summary.kv"), "w") as fh:
        fh.write("format = posdec-importance-report\nversion = 1\n")
        fh.write(f"n_folds = {report.n_folds}\n")
        fh.write(f"top_channel = {report.top_channel}\n")
        fh.write(f"top_channel_name = {report.top_channel_name}\n")
        fh.write(f"is_mu = {_fmt(report.is_mu)}\n")
        fh.write(f"is_beta = {_fmt(report.is_beta)}\n")


def read_importance_report(directory, layout: FeatureLayout) -> ImportanceReport:
    """Rebuild an ImportanceReport from a directory written by
    write_importance_report. Floats round-trip exactly."""
    path = os.path.join(directory, "fis.tsv")
    fis = np.empty(layout.n_features)
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("feature\t"):
            raise DataError(f"{path}: not a feature importance table")
        count = 0
        for line in fh:
            label, value = line.rstrip("\n").split("\t")
            fis[layout.feature_index(*layout.parse_feature_label(label))] = float(value)
            count += 1
    if count != layout.n_features:
        raise DataError(f"{path}: expected {layout.n_features} rows, got {count}")
    n_folds = 0
    summary = os.path.join(directory, "summary.kv")
    if os.path.exists(summary):
        with open(summary) as fh:
            for line in fh:
                key, sep, value = line.partition("=")
                if sep and key.strip() == "n_folds":
                    n_folds = int(value.strip())
    return summarize_fis(layout, fis, n_folds=n_folds)


def export_topomap(xs: np.ndarray, ys: np.ndarray, grid: np.ndarray, path):
    """Long-format delimited grid: x, y, value (NaN for outside cells)."""
    with open(path, "w") as fh:
        fh.write("x\ty\tvalue\n")
        for j, y in enumerate(ys):
            for i, x in enumerate(xs):
                fh.write(f"{_fmt(x)}\t{_fmt(y)}\t{_fmt(grid[j, i])}\n")
