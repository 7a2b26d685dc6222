"""Leave-one-subject-out evaluation of the feature-to-forest chain.

One fold per subject: imputation parameters and the forest are fit on the
remaining subjects, predictions are collected on the held-out subject,
and the pooled accuracy is tested against chance (1/9) with an exact
one-sided binomial test computed in log space.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.special

from .core import KEYS, FeatureMatrix, seeded_rng
from .errors import ConfigError, DataError
from .forest import predict, train_forest, write_forest
from .robust import impute_outliers

_STREAM_FOLD = 101   # per-fold forest seeds
_STREAM_EVAL = 102   # per-fold prediction tie-breaks

CHANCE = 1.0 / len(KEYS)


# ---------------------------------------------------------------------------
# exact binomial tail
# ---------------------------------------------------------------------------

def binomial_test(hits: int, n: int, p: float) -> float:
    """One-sided upper-tail exact binomial test: P[X >= hits | n, p].

    The probability mass terms are summed in log space, so tails far
    below double precision of any single term still come out right.
    """
    if n < 1:
        raise DataError(f"need n >= 1 trials, got {n}")
    if not 0 <= hits <= n:
        raise DataError(f"hits {hits} outside 0..{n}")
    if not 0.0 < p < 1.0:
        raise ConfigError(f"success probability must be in (0, 1), got {p}")
    if hits == 0:
        return 1.0
    k = np.arange(hits, n + 1, dtype=np.float64)
    log_pmf = (scipy.special.gammaln(n + 1.0)
               - scipy.special.gammaln(k + 1.0)
               - scipy.special.gammaln(n - k + 1.0)
               + k * np.log(p) + (n - k) * np.log1p(-p))
    shift = log_pmf.max()
    log_tail = shift + np.log(np.exp(log_pmf - shift).sum())
    return float(min(1.0, np.exp(log_tail)))


# ---------------------------------------------------------------------------
# fold bookkeeping and rate summaries
# ---------------------------------------------------------------------------

def loso_folds(subjects) -> list:
    """(held-out subject, training subjects) per fold, in subject order."""
    subjects = list(subjects)
    if len(subjects) < 2:
        raise DataError("leave-one-subject-out needs at least two subjects")
    if len(set(subjects)) != len(subjects):
        raise DataError("duplicate subject ids")
    return [(s, [t for t in subjects if t != s]) for s in subjects]


def confusion_matrix(y_true, y_pred, classes=KEYS) -> np.ndarray:
    """Row-normalized confusion in percent: row k is the prediction
    distribution over classes for trials whose true class is k. Rows of a
    class with no trials are NaN (undefined, not zero)."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise DataError("true/predicted label lengths differ")
    k = len(classes)
    out = np.full((k, k), np.nan)
    for i, ci in enumerate(classes):
        sel = y_true == ci
        n = sel.sum()
        if n == 0:
            continue
        row = np.array([(y_pred[sel] == cj).sum() for cj in classes], dtype=float)
        out[i] = row / n * 100.0
    return out


def tp_tn_rates(y_true, y_pred, classes=KEYS):
    """Per-class true-positive and true-negative rates in percent.

    tp[k] = P[pred = k | true = k]; tn[k] = P[pred != k | true != k].
    Classes without positive (resp. negative) trials get NaN.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    tp = np.full(len(classes), np.nan)
    tn = np.full(len(classes), np.nan)
    for i, c in enumerate(classes):
        pos = y_true == c
        if pos.any():
            tp[i] = (y_pred[pos] == c).mean() * 100.0
        neg = ~pos
        if neg.any():
            tn[i] = (y_pred[neg] != c).mean() * 100.0
    return tp, tn


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

@dataclass
class CrossvalReport:
    """Everything the evaluation stage measured, in fold order."""

    subjects: list
    fold_hits: np.ndarray
    fold_n: np.ndarray
    overall_hits: int
    overall_n: int
    p_value: float
    confusion: np.ndarray          # (9, 9) percent
    tp: np.ndarray                 # (9,) percent
    tn: np.ndarray                 # (9,) percent
    row_true: np.ndarray           # per matrix row
    row_pred: np.ndarray
    row_subject: np.ndarray
    row_session: np.ndarray
    seed: int = 0
    n_trees: int = 0
    mtry: int = 0
    impute_mode: str = "train-mean"
    forest_paths: dict = field(default_factory=dict)

    @property
    def fold_pa(self) -> np.ndarray:
        return self.fold_hits / self.fold_n * 100.0

    @property
    def overall_pa(self) -> float:
        return self.overall_hits / self.overall_n * 100.0


def fold_forest_seed(master_seed: int, fold_index: int) -> int:
    """Deterministic per-fold forest seed derived from the master seed."""
    ss = np.random.SeedSequence((master_seed, _STREAM_FOLD, fold_index))
    return int(ss.generate_state(1, np.uint64)[0])


def run_crossval(fm: FeatureMatrix, n_trees: int = 900, mtry: int = None,
                 seed: int = 0, threads: int = 1, min_node_size: int = 1,
                 max_depth: int = None, impute_mode: str = "train-mean",
                 persist_dir=None, keep_forests: bool = False):
    """Leave-one-subject-out evaluation of the full matrix.

    Per fold: impute from the fold's training subjects, train a forest
    with its own derived seed, predict the held-out subject with a
    sequenced per-fold stream. Fold forests are written to `persist_dir`
    (one file per held-out subject) so the importance stage can reload
    them; with `keep_forests` they are also returned in memory.

    Returns (report, forests) where `forests` maps held-out subject to the
    Forest when kept, else to its file path.
    """
    folds = loso_folds(fm.subjects())
    n_rows = fm.n_rows
    row_pred = np.zeros(n_rows, dtype=np.int64)
    fold_hits, fold_n, subjects = [], [], []
    forests = {}
    forest_paths = {}
    for i, (held_out, train_subjects) in enumerate(folds):
        values = impute_outliers(fm, train_subjects, test_mode=impute_mode)
        train_rows = np.flatnonzero(fm.subject_ids != held_out)
        test_rows = fm.rows_for_subject(held_out)
        forest = train_forest(values[train_rows], fm.labels[train_rows],
                              n_trees=n_trees, mtry=mtry,
                              seed=fold_forest_seed(seed, i), threads=threads,
                              min_node_size=min_node_size, max_depth=max_depth)
        preds = predict(forest, values[test_rows],
                        rng=seeded_rng(seed, _STREAM_EVAL, i))
        row_pred[test_rows] = preds
        subjects.append(held_out)
        fold_hits.append(int((preds == fm.labels[test_rows]).sum()))
        fold_n.append(len(test_rows))
        if persist_dir is not None:
            path = os.path.join(persist_dir, f"fold_{held_out}.forest")
            write_forest(forest, path)
            forest_paths[held_out] = path
        if keep_forests:
            forests[held_out] = forest

    overall_hits = int(sum(fold_hits))
    overall_n = int(sum(fold_n))
    report = CrossvalReport(
        subjects=subjects,
        fold_hits=np.array(fold_hits), fold_n=np.array(fold_n),
        overall_hits=overall_hits, overall_n=overall_n,
        p_value=binomial_test(overall_hits, overall_n, CHANCE),
        confusion=confusion_matrix(fm.labels, row_pred),
        tp=tp_tn_rates(fm.labels, row_pred)[0],
        tn=tp_tn_rates(fm.labels, row_pred)[1],
        row_true=fm.labels.copy(), row_pred=row_pred,
        row_subject=fm.subject_ids.copy(), row_session=fm.sessions.copy(),
        seed=seed, n_trees=n_trees,
        mtry=mtry if mtry is not None else 0,
        impute_mode=impute_mode, forest_paths=forest_paths)
    return report, (forests if keep_forests else forest_paths)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v))


def write_crossval_report(report: CrossvalReport, path):
    """Machine-readable key-value report; floats round-trip exactly."""
    lines = ["format = posdec-crossval-report", "version = 1"]
    lines.append(f"seed = {report.seed}")
    lines.append(f"n_trees = {report.n_trees}")
    lines.append(f"mtry = {report.mtry}")
    lines.append(f"impute_mode = {report.impute_mode}")
    lines.append(f"chance_percent = {_fmt(CHANCE * 100.0)}")
    lines.append(f"overall.hits = {report.overall_hits}")
    lines.append(f"overall.n = {report.overall_n}")
    lines.append(f"overall.pa_percent = {_fmt(report.overall_pa)}")
    lines.append(f"overall.p_value = {_fmt(report.p_value)}")
    for s, h, n in zip(report.subjects, report.fold_hits, report.fold_n):
        lines.append(f"fold.{s}.hits = {int(h)}")
        lines.append(f"fold.{s}.n = {int(n)}")
        lines.append(f"fold.{s}.pa_percent = {_fmt(h / n * 100.0)}")
    for i, k in enumerate(KEYS):
        lines.append(f"tp.{k} = {_fmt(report.tp[i])}")
        lines.append(f"tn.{k} = {_fmt(report.tn[i])}")
    for i, k in enumerate(KEYS):
        row = " ".join(_fmt(v) for v in report.confusion[i])
        lines.append(f"confusion.{k} = {row}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_crossval_report(path) -> CrossvalReport:
    kv = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise DataError(f"{path}:{lineno}: expected 'key = value'")
            kv[key.strip()] = value.strip()
    if kv.get("format") != "posdec-crossval-report":
        raise DataError(f"{path}: not a crossval report")
    subjects = []
    for key in kv:
        if key.startswith("fold.") and key.endswith(".hits"):
            subjects.append(key[len("fold."):-len(".hits")])
    fold_hits = np.array([int(kv[f"fold.{s}.hits"]) for s in subjects])
    fold_n = np.array([int(kv[f"fold.{s}.n"]) for s in subjects])
    confusion = np.array([[float(v) for v in kv[f"confusion.{k}"].split()]
                          for k in KEYS])
    return CrossvalReport(
        subjects=subjects, fold_hits=fold_hits, fold_n=fold_n,
        overall_hits=int(kv["overall.hits"]), overall_n=int(kv["overall.n"]),
        p_value=float(kv["overall.p_value"]), confusion=confusion,
        tp=np.array([float(kv[f"tp.{k}"]) for k in KEYS]),
        tn=np.array([float(kv[f"tn.{k}"]) for k in KEYS]),
        row_true=np.array([], dtype=np.int64),
        row_pred=np.array([], dtype=np.int64),
        row_subject=np.array([], dtype=object),
        row_session=np.array([], dtype=np.int32),
        seed=int(kv["seed"]), n_trees=int(kv["n_trees"]),
        mtry=int(kv["mtry"]), impute_mode=kv["impute_mode"])


def export_confusion(report: CrossvalReport, path):
    """Delimited confusion matrix, percent, one row per true class."""
    with open(path, "w") as fh:
        fh.write("true\\pred\t" + "\t".join(str(k) for k in KEYS) + "\n")
        for i, k in enumerate(KEYS):
            cells = "\t".join(_fmt(v) for v in report.confusion[i])
            fh.write(f"{k}\t{cells}\n")


def export_predictions(report: CrossvalReport, path):
    """Per-trial predictions: subject, session, true and predicted key."""
    if report.row_true.size == 0:
        raise DataError("report carries no per-trial predictions")
    with open(path, "w") as fh:
        fh.write("subject\tsession\ttrue\tpredicted\n")
        for s, sess, t, p in zip(report.row_subject, report.row_session,
                                 report.row_true, report.row_pred):
            fh.write(f"{s}\t{sess}\t{t}\t{p}\n")


def render_tables(report: CrossvalReport) -> str:
    """Human-readable summary: per-subject accuracies, per-key rates,
    confusion matrix, and the pooled result."""
    out = []
    out.append("Per-subject prediction accuracy (percent)")
    out.append("-" * 42)
    for s, h, n in zip(report.subjects, report.fold_hits, report.fold_n):
        out.append(f"  {s:<12} {h / n * 100.0:6.2f}   ({int(h)}/{int(n)})")
    out.append("")
    out.append(f"  overall      {report.overall_pa:6.2f}   "
               f"({report.overall_hits}/{report.overall_n})")
    out.append(f"  chance       {CHANCE * 100.0:6.2f}")
    out.append(f"  exact one-sided binomial p-value: {report.p_value:.3g}")
    out.append("")
    out.append("Per-key true positive / true negative rates (percent)")
    out.append("-" * 54)
    out.append("  key     tp      tn")
    for i, k in enumerate(KEYS):
        out.append(f"  {k}    {report.tp[i]:6.2f}  {report.tn[i]:6.2f}")
    out.append("")
    out.append("Confusion matrix (rows: true key, columns: predicted key, percent)")
    out.append("-" * 68)
    header = "        " + "".join(f"{k:>7}" for k in KEYS)
    out.append(header)
    for i, k in enumerate(KEYS):
        cells = "".join(
            f"{v:7.2f}" if np.isfinite(v) else f"{'n/a':>7}"
            for v in report.confusion[i])
        out.append(f"  {k:>4}  {cells}")
    return "\n".join(out) + "\n"
