"""Outlier handling and per-subject feature normalization.

Outliers are marked per subject and feature by iterating a 3-sigma rule
to a fixed point; statistics always use the population convention
(divide by n). Normalization then standardizes each subject's unmasked
values, and imputation fills masked cells from training-fold means just
before classification.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import FeatureMatrix
from .errors import ConfigError, DataError, DegenerateDataError

log = logging.getLogger(__name__)


@dataclass
class NormalizationParams:
    """Per-feature mean/std of one subject's unmasked values.

    `constant` flags features whose unmasked values had zero spread; their
    normalized values are defined as 0.
    """

    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # bool


def mark_outliers_iterative(values: np.ndarray, mask: np.ndarray = None,
                            sigma: float = 3.0) -> np.ndarray:
    """Iterate sigma-clipping on one feature column to a fixed point.

    Each pass computes mean and population std over currently unmasked
    values and marks values with |v - mean| > sigma * std. Masks only
    grow; iteration stops when a pass marks nothing new.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise DataError("mark_outliers_iterative expects a single feature column")
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    out = (np.zeros(v.shape, dtype=bool) if mask is None
           else np.array(mask, dtype=bool, copy=True))
    if v.size < 2:
        raise DataError("need at least two values to mark outliers")
    while True:
        keep = ~out
        n = keep.sum()
        if n == 0:
            raise DegenerateDataError("all values masked: degenerate feature")
        m = v[keep].mean()
        s = v[keep].std()  # population convention
        new = keep & (np.abs(v - m) > sigma * s)
        if not new.any():
            return out
        out |= new


def mark_outliers_matrix(fm: FeatureMatrix, sigma: float = 3.0) -> np.ndarray:
    """Outlier mask for a whole feature matrix, per subject and feature."""
    mask = np.zeros_like(fm.mask)
    for sid in fm.subjects():
        rows = fm.rows_for_subject(sid)
        sub = fm.values[rows]
        for j in range(fm.n_features):
            col_mask = mark_outliers_iterative(sub[:, j], sigma=sigma)
            if col_mask.any():
                mask[rows, j] = col_mask
    return mask


def normalize_per_subject(fm: FeatureMatrix) -> FeatureMatrix:
    """Z-score each subject's features over unmasked values (population std).

    Masked cells pass through unchanged; features with zero spread are set
    to 0 for all unmasked cells and flagged constant. Returns a new matrix
    carrying the per-subject parameters.
    """
    values = fm.values.copy()
    params = {}
    for sid in fm.subjects():
        rows = fm.rows_for_subject(sid)
        sub = values[rows]
        keep = ~fm.mask[rows]
        n_keep = keep.sum(axis=0)
        if (n_keep == 0).any():
            j = int(np.flatnonzero(n_keep == 0)[0])
            raise DegenerateDataError(
                f"subject {sid!r}: feature {j} has no unmasked values")
        s = np.where(keep, sub, 0.0)
        mean = s.sum(axis=0) / n_keep
        var = (np.where(keep, (sub - mean) ** 2, 0.0)).sum(axis=0) / n_keep
        std = np.sqrt(var)
        constant = std == 0.0
        safe_std = np.where(constant, 1.0, std)
        normed = (sub - mean) / safe_std
        normed[:, constant] = 0.0
        sub_out = np.where(keep, normed, sub)  # masked cells untouched
        values[rows] = sub_out
        params[sid] = NormalizationParams(mean=mean, std=std, constant=constant)
    out = FeatureMatrix(fm.layout, values, fm.mask.copy(), fm.subject_ids.copy(),
                        fm.sessions.copy(), fm.labels.copy(),
                        subject_bands=dict(fm.subject_bands))
    out.normalization = params
    return out


def export_outlier_report(fm: FeatureMatrix, path) -> None:
    """Per-feature outlier counts as delimited text, one row per feature."""
    counts = fm.mask.sum(axis=0)
    with open(path, "w") as fh:
        fh.write("feature\toutlier_count\n")
        for j in range(fm.n_features):
            fh.write(f"{fm.layout.feature_label(j)}\t{int(counts[j])}\n")


def impute_outliers(fm: FeatureMatrix, train_subjects,
                    test_mode: str = "train-mean") -> np.ndarray:
    """Replace masked cells for one cross-validation fold.

    Training rows always receive the per-feature mean over unmasked
    training cells. Held-out rows follow `test_mode`:

    - "train-mean": same training means (default).
    - "normalize": keep the held-out subject's own values, transformed by
      that subject's normalization parameters (requires a normalized
      matrix). Cells of constant features become 0.

    A feature with zero unmasked training values is imputed with 0 and
    flagged by a warning. Returns a dense values array; unmasked cells
    are never changed.
    """
    if test_mode not in ("train-mean", "normalize"):
        raise ConfigError(f"unknown imputation mode {test_mode!r}")
    train_subjects = set(train_subjects)
    unknown = train_subjects - set(fm.subjects())
    if unknown:
        raise DataError(f"training subjects not in matrix: {sorted(unknown)}")
    train_rows = np.array([sid in train_subjects for sid in fm.subject_ids])
    if not train_rows.any():
        raise DataError("no training rows in this fold")

    keep = ~fm.mask[train_rows]
    n_keep = keep.sum(axis=0)
    empty = n_keep == 0
    if empty.any():
        log.warning("%d features have no unmasked training values; "
                    "imputing them with 0", int(empty.sum()))
    means = (np.where(keep, fm.values[train_rows], 0.0).sum(axis=0)
             / np.where(empty, 1, n_keep))

    values = fm.values.copy()
    fill_rows = (np.ones(fm.n_rows, dtype=bool) if test_mode == "train-mean"
                 else train_rows)
    m = fm.mask & fill_rows[:, None]
    values[m] = np.broadcast_to(means, fm.values.shape)[m]

    if test_mode == "normalize":
        if not fm.normalization:
            raise DataError("mode 'normalize' needs a normalized matrix")
        for sid in fm.subjects():
            if sid in train_subjects:
                continue
            rows = fm.rows_for_subject(sid)
            pars = fm.normalization[sid]
            sub_mask = fm.mask[rows]
            if not sub_mask.any():
                continue
            sub = fm.values[rows]
            safe_std = np.where(pars.constant, 1.0, pars.std)
            normed = (sub - pars.mean) / safe_std
            normed[:, pars.constant] = 0.0
            values[rows] = np.where(sub_mask, normed, values[rows])
    return values
