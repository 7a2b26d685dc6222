"""Command-line front end: one subcommand per pipeline stage.

Stages communicate through files in a working directory::

    synth       -> raw/            recordings, trial events, truth.json
    preprocess  -> preprocessed/   spatially filtered, highpassed, re-referenced
    features    -> features.fmx    trials x features with mask and bands
    crossval    -> crossval/       report.kv, predictions, confusion, fold forests
    importance  -> importance/     fis/cis/wis tables, topomap grids
    report      -> report/         tables as text, confusion/topomap/window SVGs

Every stage builds its output in a temporary location and swaps it in
with a rename, so interrupted runs never leave half-written outputs.
Progress goes to standard error; exit codes are 0 on success, 2 for
configuration errors, 3 for data errors, 4 for degenerate data.
"""

from __future__ import annotations

import argparse
import contextlib
import glob
import logging
import os
import shutil
import sys
import time
from types import SimpleNamespace

import numpy as np

from . import config as config_mod
from . import dsp, evaluate, figures, importance, robust, spectral, synth
from .core import (FeatureLayout, FeatureMatrix, Recording, default_montage,
                   subselect_montage)
from .errors import ConfigError, DataError, PosdecError

log = logging.getLogger("posdec")


# ---------------------------------------------------------------------------
# atomic output helpers
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def _atomic_file(path):
    """Yield a temporary path that replaces `path` on success."""
    tmp = f"{path}.tmp-{os.getpid()}"
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


@contextlib.contextmanager
def _atomic_dir(path):
    """Yield a temporary directory that replaces `path` on success."""
    tmp = f"{path}.tmp-{os.getpid()}"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    try:
        yield tmp
        if os.path.exists(path):
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _require(path, hint: str):
    if not os.path.exists(path):
        raise DataError(f"missing input {path}; run '{hint}' first")
    return path


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_synth(cfg, work_dir: str) -> None:
    profile = synth.get_profile(cfg.synth.profile)
    effect = cfg.synth.to_effect()
    os.makedirs(work_dir, exist_ok=True)
    t0 = time.time()
    with _atomic_dir(os.path.join(work_dir, "raw")) as raw:
        truths = []
        for recording, events, truth in synth.generate_dataset(
                cfg.synth.seed, profile, effect):
            dsp.write_recording(recording,
                                os.path.join(raw, f"{recording.subject_id}.rec"))
            synth.write_events(events,
                               os.path.join(raw, f"{recording.subject_id}.events.tsv"))
            truths.append(truth)
            log.info("generated %s: %d channels, %.0f s, %d trials",
                     recording.subject_id, recording.n_channels,
                     recording.duration_seconds, truth.n_trials)
        synth.write_truth(os.path.join(raw, "truth.json"),
                          cfg.synth.seed, profile, effect, truths)
    log.info("synth: %d subjects in %.1f s -> %s/raw",
             profile.n_subjects, time.time() - t0, work_dir)


def _list_recordings(directory: str):
    paths = sorted(glob.glob(os.path.join(directory, "*.rec")))
    if not paths:
        raise DataError(f"no recordings (*.rec) found in {directory}")
    return paths


def cmd_preprocess(cfg, work_dir: str, data_dir: str) -> None:
    raw = _require(os.path.join(data_dir, "raw"), "posdec synth")
    paths = _list_recordings(raw)
    montage = default_montage()
    named = [SimpleNamespace(channel_names=dsp.read_recording_header(p)[2])
             for p in paths]
    common = dsp.intersect_channels(named, montage)
    log.info("preprocess: %d recordings, %d common channels",
             len(paths), len(common))

    t0 = time.time()
    with _atomic_dir(os.path.join(work_dir, "preprocessed")) as out:
        for path in paths:
            rec = dsp.read_recording(path)
            sub_montage = subselect_montage(montage, rec.channel_names)
            rec = dsp.laplacian(rec, sub_montage)
            rec = dsp.restrict_recording(rec, common)
            filt = dsp.design_highpass_butterworth(
                cfg.dsp.highpass_hz, rec.sample_rate, cfg.dsp.filter_order)
            rec = Recording(rec.subject_id, rec.sample_rate,
                            list(rec.channel_names),
                            dsp.filtfilt(filt, rec.samples))
            rec = dsp.common_average_reference(rec)
            dsp.write_recording(rec, os.path.join(out, f"{rec.subject_id}.rec"))
            events_src = os.path.join(raw, f"{rec.subject_id}.events.tsv")
            _require(events_src, "posdec synth")
            shutil.copyfile(events_src,
                            os.path.join(out, f"{rec.subject_id}.events.tsv"))
            log.info("preprocessed %s", rec.subject_id)
    log.info("preprocess done in %.1f s", time.time() - t0)


def cmd_features(cfg, work_dir: str, data_dir: str,
                 outlier_report: bool = False) -> None:
    pre = _require(os.path.join(data_dir, "preprocessed"), "posdec preprocess")
    paths = _list_recordings(pre)
    s = cfg.spectral
    override = cfg.mu_override()
    if override is not None:
        spectral.validate_mu_override(override, s.mu_search_low, s.mu_search_high)

    def sensorimotor_set(channel_names):
        """Configured channels plus their montage neighbors, if present."""
        montage = subselect_montage(default_montage(), channel_names)
        chosen = []
        for name in s.mu_channels:
            if name not in montage.names:
                continue
            i = montage.channel_index(name)
            chosen.append(name)
            chosen.extend(montage.names[j] for j in montage.neighbors[i])
        picked = [n for n in channel_names if n in set(chosen)]
        if not picked:
            raise DataError(
                f"none of spectral.mu_channels {list(s.mu_channels)} "
                "(or their neighbors) are present in the recordings")
        return picked

    t0 = time.time()
    layout = None
    sample_rate = None
    blocks, subject_bands = [], {}
    meta_subject, meta_session, meta_label = [], [], []
    for path in paths:
        rec = dsp.read_recording(path)
        if layout is None:
            layout = FeatureLayout(channel_names=tuple(rec.channel_names),
                                   window_seconds=s.window_seconds,
                                   step_seconds=s.step_seconds,
                                   trial_seconds=s.trial_seconds)
            sample_rate = rec.sample_rate
        elif tuple(rec.channel_names) != layout.channel_names:
            raise DataError(f"{path}: channel set differs from first recording; "
                            "run 'posdec preprocess' over the full dataset")
        elif rec.sample_rate != sample_rate:
            raise DataError(f"{path}: sample rate {rec.sample_rate} differs "
                            f"from {sample_rate}")
        events = synth.read_events(
            _require(os.path.join(pre, f"{rec.subject_id}.events.tsv"),
                     "posdec preprocess"))
        if not events:
            raise DataError(f"{rec.subject_id}: no trials in events file")
        first_onset = min(ev.onset_sample for ev in events)
        resting = Recording(rec.subject_id, rec.sample_rate,
                            list(rec.channel_names),
                            rec.samples[:, :first_onset])
        if override is not None:
            mu = override
        else:
            mu = spectral.identify_mu_band(
                resting, sensorimotor_set(rec.channel_names),
                s.mu_search_low, s.mu_search_high,
                tuple(s.mu_widths), min_seconds=s.resting_min_seconds)
        bands = spectral.SubjectBands(mu=mu, beta=spectral.Band(s.beta_low,
                                                                s.beta_high))
        subject_bands[rec.subject_id] = bands
        rows = np.empty((len(events), layout.n_features))
        for i, ev in enumerate(events):
            crop = dsp.crop_trial(rec, ev.onset_sample, s.trial_seconds)
            rows[i] = spectral.extract_features(crop, rec.sample_rate,
                                                layout, bands)
            meta_subject.append(rec.subject_id)
            meta_session.append(ev.session)
            meta_label.append(ev.label)
        blocks.append(rows)
        log.info("features %s: mu band [%g, %g] Hz, %d trials",
                 rec.subject_id, mu.low, mu.high, len(events))

    values = np.vstack(blocks)
    fm = FeatureMatrix(layout=layout, values=values,
                       mask=np.zeros(values.shape, dtype=bool),
                       subject_ids=np.array(meta_subject, dtype=object),
                       sessions=np.array(meta_session, dtype=np.int32),
                       labels=np.array(meta_label, dtype=np.int64),
                       subject_bands=subject_bands)
    fm.mask[:] = robust.mark_outliers_matrix(fm, cfg.robust.sigma)
    log.info("outliers marked: %.3f%% of cells", fm.mask.mean() * 100.0)
    fm = robust.normalize_per_subject(fm)
    target = os.path.join(work_dir, "features.fmx")
    with _atomic_file(target) as tmp:
        spectral.write_feature_matrix(fm, tmp)
    if outlier_report:
        report_path = os.path.join(work_dir, "outlier_report.tsv")
        with _atomic_file(report_path) as tmp:
            robust.export_outlier_report(fm, tmp)
        log.info("outlier report -> %s", report_path)
    log.info("features: %d trials x %d features in %.1f s -> %s",
             fm.n_rows, fm.n_features, time.time() - t0, target)


def cmd_crossval(cfg, work_dir: str) -> None:
    fm = spectral.read_feature_matrix(
        _require(os.path.join(work_dir, "features.fmx"), "posdec features"))
    mtry = cfg.forest.mtry if cfg.forest.mtry > 0 else None
    t0 = time.time()
    with _atomic_dir(os.path.join(work_dir, "crossval")) as out:
        forests_dir = os.path.join(out, "forests")
        os.makedirs(forests_dir)
        report, _ = evaluate.run_crossval(
            fm, n_trees=cfg.forest.n_trees, mtry=mtry, seed=cfg.forest.seed,
            threads=cfg.forest.threads, min_node_size=cfg.forest.min_node_size,
            impute_mode=cfg.robust.impute_mode, persist_dir=forests_dir)
        evaluate.write_crossval_report(report, os.path.join(out, "report.kv"))
        evaluate.export_confusion(report, os.path.join(out, "confusion.tsv"))
        evaluate.export_predictions(report, os.path.join(out, "predictions.tsv"))
    log.info("crossval: overall PA %.2f%% (%d/%d), p = %.3g, %.1f s",
             report.overall_pa, report.overall_hits, report.overall_n,
             report.p_value, time.time() - t0)


def cmd_importance(cfg, work_dir: str, resolution: int,
                   render_figures: bool = False) -> None:
    fm = spectral.read_feature_matrix(
        _require(os.path.join(work_dir, "features.fmx"), "posdec features"))
    forests_dir = _require(os.path.join(work_dir, "crossval", "forests"),
                           "posdec crossval")
    forests = {}
    for sid in fm.subjects():
        forests[sid] = _require(os.path.join(forests_dir, f"fold_{sid}.forest"),
                                "posdec crossval")
    t0 = time.time()
    report = importance.compute_importance(fm, forests,
                                           threads=cfg.forest.threads,
                                           impute_mode=cfg.robust.impute_mode)
    with _atomic_dir(os.path.join(work_dir, "importance")) as out:
        importance.write_importance_report(report, out)
        montage = subselect_montage(default_montage(), fm.layout.channel_names)
        for band_name, cis in (("mu", report.cis_mu), ("beta", report.cis_beta)):
            xs, ys, grid = importance.topomap_grid(cis, montage, resolution)
            importance.export_topomap(
                xs, ys, grid, os.path.join(out, f"topomap_{band_name}.tsv"))
            if render_figures:
                figures.save_topomap(
                    xs, ys, grid, montage,
                    os.path.join(out, f"topomap_{band_name}.svg"),
                    title=f"channel importance, {band_name} band")
        if render_figures:
            centers = np.array([fm.layout.window_center_seconds(w)
                                for w in range(41)])
            figures.save_window_scores(centers, report.wis_mu, report.wis_beta,
                                       report.is_mu, report.is_beta,
                                       report.top_channel_name,
                                       os.path.join(out, "windows.svg"))
    log.info("importance: top channel %s, %.1f s",
             report.top_channel_name, time.time() - t0)


def cmd_report(cfg, work_dir: str, resolution: int) -> None:
    crep = evaluate.read_crossval_report(
        _require(os.path.join(work_dir, "crossval", "report.kv"),
                 "posdec crossval"))
    fm = spectral.read_feature_matrix(
        _require(os.path.join(work_dir, "features.fmx"), "posdec features"))
    irep = importance.read_importance_report(
        _require(os.path.join(work_dir, "importance"), "posdec importance"),
        fm.layout)
    montage = subselect_montage(default_montage(), fm.layout.channel_names)
    centers = np.array([fm.layout.window_center_seconds(w)
                        for w in range(41)])
    t0 = time.time()
    with _atomic_dir(os.path.join(work_dir, "report")) as out:
        with open(os.path.join(out, "report.txt"), "w") as fh:
            fh.write(evaluate.render_tables(crep))
            fh.write(f"\nTop channel by importance: {irep.top_channel_name}\n")
            fh.write(f"Whole-trial importance at {irep.top_channel_name}: "
                     f"mu {irep.is_mu:.4f}, beta {irep.is_beta:.4f}\n")
        shutil.copyfile(os.path.join(work_dir, "crossval", "confusion.tsv"),
                        os.path.join(out, "confusion.tsv"))
        figures.save_confusion(crep.confusion, os.path.join(out, "confusion.svg"))
        for band_name, cis in (("mu", irep.cis_mu), ("beta", irep.cis_beta)):
            xs, ys, grid = importance.topomap_grid(cis, montage, resolution)
            figures.save_topomap(xs, ys, grid, montage,
                                 os.path.join(out, f"topomap_{band_name}.svg"),
                                 title=f"channel importance, {band_name} band")
        figures.save_window_scores(centers, irep.wis_mu, irep.wis_beta,
                                   irep.is_mu, irep.is_beta,
                                   irep.top_channel_name,
                                   os.path.join(out, "windows.svg"))
    log.info("report written to %s/report in %.1f s", work_dir, time.time() - t0)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="posdec",
        description="Cross-subject decoding of held key positions from "
                    "multichannel recordings: synthesis, preprocessing, "
                    "band-power features, forest cross-validation, "
                    "importance maps.")
    parser.add_argument("--config", metavar="FILE", default=None,
                        help="config file (default: $POSDEC_CONFIG if set)")
    parser.add_argument("--dir", metavar="DIR", default=None,
                        help="working directory for stage inputs/outputs "
                             "(default: paths.out_dir from config)")
    parser.add_argument("--threads", type=int, default=None, metavar="N",
                        help="worker threads; never changes results")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--profile", choices=sorted(synth.PROFILES), default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("preprocess", help="spatial filters, highpass, "
                                          "re-reference")
    p.add_argument("--data", metavar="DIR", default=None,
                   help="directory holding raw/ (default: --dir)")

    p = sub.add_parser("features", help="band-power features with outlier "
                                        "mask and normalization")
    p.add_argument("--data", metavar="DIR", default=None,
                   help="directory holding preprocessed/ (default: --dir)")
    p.add_argument("--mu-band", metavar="LOW,HIGH", default=None,
                   help="fixed mu band override, e.g. 10,12 "
                        "(default: per-subject resting scan)")
    p.add_argument("--export-outlier-report", action="store_true",
                   help="also write per-feature outlier counts as TSV")

    p = sub.add_parser("crossval", help="leave-one-subject-out evaluation")
    p.add_argument("--trees", type=int, default=None, metavar="N")
    p.add_argument("--mtry", type=int, default=None, metavar="N")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--impute", choices=("train-mean", "normalize"), default=None)

    p = sub.add_parser("importance", help="permutation importance maps")
    p.add_argument("--resolution", type=int, default=64, metavar="N",
                   help="topomap grid resolution per axis (default 64)")
    p.add_argument("--figures", action="store_true",
                   help="also render topomap and window-score SVGs here")

    p = sub.add_parser("report", help="tables and figures from stage outputs")
    p.add_argument("--resolution", type=int, default=64, metavar="N")
    return parser


def _overrides_from_args(args) -> dict:
    """Map command-line flags onto dotted config keys."""
    over = {}
    if args.threads is not None:
        over["forest.threads"] = str(args.threads)
    if args.command == "synth":
        if args.profile is not None:
            over["synth.profile"] = args.profile
        if args.seed is not None:
            over["synth.seed"] = str(args.seed)
    elif args.command == "features":
        if args.mu_band is not None:
            try:
                low, high = (float(v) for v in args.mu_band.split(","))
            except ValueError:
                raise ConfigError(
                    f"--mu-band expects LOW,HIGH, got {args.mu_band!r}") from None
            over["spectral.mu_low"] = repr(low)
            over["spectral.mu_high"] = repr(high)
    elif args.command == "crossval":
        if args.trees is not None:
            over["forest.n_trees"] = str(args.trees)
        if args.mtry is not None:
            over["forest.mtry"] = str(args.mtry)
        if args.seed is not None:
            over["forest.seed"] = str(args.seed)
        if args.impute is not None:
            over["robust.impute_mode"] = args.impute
    return over


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        cfg = config_mod.load_config(args.config, _overrides_from_args(args))
        work_dir = args.dir if args.dir is not None else cfg.paths.out_dir
        data_dir = getattr(args, "data", None) or work_dir
        if args.command == "synth":
            cmd_synth(cfg, work_dir)
        elif args.command == "preprocess":
            cmd_preprocess(cfg, work_dir, data_dir)
        elif args.command == "features":
            cmd_features(cfg, work_dir, data_dir,
                         outlier_report=args.export_outlier_report)
        elif args.command == "crossval":
            cmd_crossval(cfg, work_dir)
        elif args.command == "importance":
            cmd_importance(cfg, work_dir, args.resolution,
                           render_figures=args.figures)
        elif args.command == "report":
            cmd_report(cfg, work_dir, args.resolution)
        return 0
    except PosdecError as exc:
        log.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
