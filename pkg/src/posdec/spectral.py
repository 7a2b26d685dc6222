"""Band-power feature extraction.

Every feature is the natural log of summed periodogram power of one
channel in one band over one window. The periodogram convention is fixed
throughout: multiply the segment by a Hann window (no amplitude
correction), take the one-sided FFT without zero padding, and sum
|X[k]|^2 over the bins whose center frequency lies in the closed band
interval. Differences induced by window length carry the signal of
interest, so no per-length rescaling is applied.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .core import (BETA, MU, N_SLIDING, FeatureLayout, FeatureMatrix,
                   Recording)
from .errors import ConfigError, DataError
from .robust import NormalizationParams

log = logging.getLogger(__name__)

POWER_FLOOR = 1e-20  # power sum substituted for all-zero segments

_FMX_MAGIC = b"POSDFMX1"
_FMX_VERSION = 1


@dataclass(frozen=True)
class Band:
    """Closed frequency interval in Hz."""

    low: float
    high: float

    def __post_init__(self):
        if not (self.low > 0 and self.high > self.low):
            raise ConfigError(f"bad band [{self.low}, {self.high}]")


@dataclass(frozen=True)
class SubjectBands:
    """The two bands used for one subject: individual mu, fixed beta."""

    mu: Band
    beta: Band


def bin_frequencies(n_samples: int, sample_rate: float) -> np.ndarray:
    """Center frequencies of the one-sided FFT bins.

    Computed as k * sample_rate / n so integer-Hz edges land exactly on
    bins whenever they are representable.
    """
    return np.arange(n_samples // 2 + 1) * float(sample_rate) / n_samples


def band_bins(n_samples: int, sample_rate: float, band: Band) -> np.ndarray:
    freqs = bin_frequencies(n_samples, sample_rate)
    sel = np.flatnonzero((freqs >= band.low) & (freqs <= band.high))
    if sel.size == 0:
        raise DataError(
            f"band [{band.low}, {band.high}] Hz covers no FFT bin for a "
            f"segment of {n_samples} samples at {sample_rate} Hz")
    return sel

def power_spectrum(segment: np.ndarray, sample_rate: float):
    """(frequencies, periodogram power |FFT(hann * x)|^2) along the last axis."""
    segment = np.asarray(segment, dtype=np.float64)
    n = segment.shape[-1]
    if n < 2:
        raise DataError("segment too short for a power spectrum")
    spec = np.fft.rfft(segment * np.hanning(n))
    return bin_frequencies(n, sample_rate), (spec.real ** 2 + spec.imag ** 2)


def _log_power(power_sum) -> np.ndarray:
    floored = power_sum <= 0.0
    if np.any(floored):
        log.warning("all-zero segment(s): %d band power value(s) floored to "
                    "log(%g)", int(np.sum(floored)), POWER_FLOOR)
    return np.log(np.where(floored, POWER_FLOOR, power_sum))


def log_bandpower(segment: np.ndarray, sample_rate: float, band: Band) -> float:
    """Natural log of summed periodogram power in `band` (closed interval)."""
    _, power = power_spectrum(segment, sample_rate)
    sel = band_bins(np.asarray(segment).shape[-1], sample_rate, band)
    return float(_log_power(power[..., sel].sum(axis=-1)))


# ---------------------------------------------------------------------------
# mu band identification
# ---------------------------------------------------------------------------

def candidate_mu_bands(search_low: int = 8, search_high: int = 15,
                       widths=(1, 2, 3)) -> list:
    """All integer-edge candidates inside the search range, scan order:
    lower edge ascending, then width ascending (the tie-break order)."""
    cands = []
    for low in range(search_low, search_high):
        for w in sorted(widths):
            if low + w <= search_high:
                cands.append(Band(float(low), float(low + w)))
    return cands


def identify_mu_band(resting: Recording, channels, search_low: int = 8,
                     search_high: int = 15, widths=(1, 2, 3),
                     min_seconds: float = 60.0) -> Band:
    """Pick the subject's mu band from resting data by exhaustive scan.

    Scores every integer-edge candidate within the search range by mean
    per-bin periodogram power over the given channels; ties resolve toward
    the lower edge, then the smaller width. Power is averaged per bin so
    candidates of different widths compare on density rather than on bin
    count, and scores equal within 1e-9 relative count as tied so that
    summation roundoff cannot override the documented tie-break order.
    """
    if resting.duration_seconds < min_seconds:
        raise DataError(
            f"resting segment of {resting.duration_seconds:.1f} s is shorter "
            f"than the required {min_seconds:.0f} s")
    rows = [resting.channel_index(name) for name in channels]
    if not rows:
        raise DataError("no channels given for mu band identification")
    x = resting.samples[rows]
    _, power = power_spectrum(x, resting.sample_rate)
    mean_power = power.mean(axis=0)
    n = x.shape[-1]

    best, best_score = None, -np.inf
    for band in candidate_mu_bands(search_low, search_high, widths):
        sel = band_bins(n, resting.sample_rate, band)
        score = mean_power[sel].sum() / sel.size
        if best is None or score > best_score * (1.0 + 1e-9):
            best, best_score = band, score
    return best


def validate_mu_override(band: Band, search_low: float = 8.0,
                         search_high: float = 15.0) -> Band:
    """Check a manually supplied mu band against the physiological range."""
    if band.low < search_low or band.high > search_high:
        raise ConfigError(
            f"mu band [{band.low}, {band.high}] outside [{search_low}, "
            f"{search_high}] Hz")
    return band


# ---------------------------------------------------------------------------
# feature extraction
# ---------------------------------------------------------------------------

def extract_features(trial_samples: np.ndarray, sample_rate: float,
                     layout: FeatureLayout, bands: SubjectBands) -> np.ndarray:
    """Feature row of one trial: per channel and band, 41 sliding-window
    log band powers followed by the whole-trial log band power."""
    x = np.asarray(trial_samples, dtype=np.float64)
    n_trial = layout.trial_length_samples(sample_rate)
    if x.shape != (layout.n_channels, n_trial):
        raise DataError(
            f"trial shape {x.shape} does not match layout "
            f"({layout.n_channels} channels x {n_trial} samples)")
    win_len = layout.window_length_samples(sample_rate)
    starts = layout.window_start_samples(sample_rate)
    if starts[-1] + win_len > n_trial:
        raise DataError("sliding windows do not fit inside the trial")

    # one batched FFT per window length; both bands read the same spectra
    windows = np.lib.stride_tricks.sliding_window_view(
        x, win_len, axis=1)[:, starts, :]
    _, win_power = power_spectrum(windows, sample_rate)
    _, whole_power = power_spectrum(x, sample_rate)

    row = np.empty(layout.n_features, dtype=np.float64)
    for band_idx, band in ((MU, bands.mu), (BETA, bands.beta)):
        wsel = band_bins(win_len, sample_rate, band)
        tsel = band_bins(n_trial, sample_rate, band)
        sliding = _log_power(win_power[:, :, wsel].sum(axis=-1))   # (ch, 41)
        whole = _log_power(whole_power[:, tsel].sum(axis=-1))      # (ch,)
        for c in range(layout.n_channels):
            base = layout.feature_index(c, band_idx, 0)
            row[base:base + N_SLIDING] = sliding[c]
            row[base + N_SLIDING] = whole[c]
    return row


def build_feature_matrix(trials, sample_rate: float, layout: FeatureLayout,
                         subject_bands: dict) -> FeatureMatrix:
    """Stack per-trial feature rows; the outlier mask starts empty."""
    if not trials:
        raise DataError("no trials to extract features from")
    values = np.empty((len(trials), layout.n_features), dtype=np.float64)
    for i, trial in enumerate(trials):
        try:
            bands = subject_bands[trial.subject_id]
        except KeyError:
            raise DataError(f"no bands for subject {trial.subject_id!r}") from None
        values[i] = extract_features(trial.samples, sample_rate, layout, bands)
    return FeatureMatrix(
        layout=layout,
        values=values,
        mask=np.zeros(values.shape, dtype=bool),
        subject_ids=np.array([t.subject_id for t in trials], dtype=object),
        sessions=np.array([t.session for t in trials], dtype=np.int32),
        labels=np.array([t.label for t in trials], dtype=np.int64),
        subject_bands=dict(subject_bands),
    )


# ---------------------------------------------------------------------------
# feature matrix container
# ---------------------------------------------------------------------------

def _write_str(fh, s: str):
    raw = s.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_exact(fh, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise DataError(f"truncated feature matrix file while reading {what}")
    return raw


def _read_str(fh, what: str) -> str:
    (n,) = struct.unpack("<H", _read_exact(fh, 2, what))
    return _read_exact(fh, n, what).decode("utf-8")


def write_feature_matrix(fm: FeatureMatrix, path):
    """Binary container: layout, per-subject bands, row metadata, float64
    values, packed outlier mask, optional normalization parameters."""
    subjects = fm.subjects()
    missing = [s for s in subjects if s not in fm.subject_bands]
    if missing:
        raise DataError(f"subjects without band information: {missing}")
    sub_index = {sid: i for i, sid in enumerate(subjects)}
    with open(path, "wb") as fh:
        fh.write(_FMX_MAGIC)
        fh.write(struct.pack("<H", _FMX_VERSION))
        lay = fm.layout
        fh.write(struct.pack("<ddd", lay.window_seconds, lay.step_seconds,
                             lay.trial_seconds))
        fh.write(struct.pack("<I", lay.n_channels))
        for name in lay.channel_names:
            _write_str(fh, name)
        fh.write(struct.pack("<I", len(subjects)))
        for sid in subjects:
            _write_str(fh, str(sid))
            b = fm.subject_bands[sid]
            fh.write(struct.pack("<dddd", b.mu.low, b.mu.high,
                                 b.beta.low, b.beta.high))
        fh.write(struct.pack("<I", fm.n_rows))
        for i in range(fm.n_rows):
            fh.write(struct.pack("<IHB", sub_index[fm.subject_ids[i]],
                                 int(fm.sessions[i]), int(fm.labels[i])))
        fh.write(np.ascontiguousarray(fm.values, dtype="<f8").tobytes())
        fh.write(np.packbits(fm.mask).tobytes())
        if fm.normalization:
            fh.write(struct.pack("<B", 1))
            for sid in subjects:
                pars = fm.normalization[sid]
                fh.write(np.ascontiguousarray(pars.mean, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(pars.std, dtype="<f8").tobytes())
                fh.write(np.packbits(pars.constant).tobytes())
        else:
            fh.write(struct.pack("<B", 0))


def read_feature_matrix(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        if fh.read(len(_FMX_MAGIC)) != _FMX_MAGIC:
            raise DataError(f"{path}: not a feature matrix file (bad magic)")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != _FMX_VERSION:
            raise DataError(f"{path}: unsupported feature matrix version {version}")
        win_s, step_s, trial_s = struct.unpack("<ddd", _read_exact(fh, 24, "layout"))
        (n_channels,) = struct.unpack("<I", _read_exact(fh, 4, "channel count"))
        names = tuple(_read_str(fh, "channel name") for _ in range(n_channels))
        layout = FeatureLayout(names, window_seconds=win_s, step_seconds=step_s,
                               trial_seconds=trial_s)
        (n_subjects,) = struct.unpack("<I", _read_exact(fh, 4, "subject count"))
        subjects, bands = [], {}
        for _ in range(n_subjects):
            sid = _read_str(fh, "subject id")
            mu_lo, mu_hi, be_lo, be_hi = struct.unpack(
                "<dddd", _read_exact(fh, 32, "bands"))
            subjects.append(sid)
            bands[sid] = SubjectBands(Band(mu_lo, mu_hi), Band(be_lo, be_hi))
        (n_rows,) = struct.unpack("<I", _read_exact(fh, 4, "row count"))
        sub_ids, sessions, labels = [], [], []
        for _ in range(n_rows):
            si, sess, lab = struct.unpack("<IHB", _read_exact(fh, 7, "row meta"))
            if si >= n_subjects:
                raise DataError(f"{path}: row references unknown subject {si}")
            sub_ids.append(subjects[si])
            sessions.append(sess)
            labels.append(lab)
        p = layout.n_features
        values = np.frombuffer(
            _read_exact(fh, 8 * n_rows * p, "values"), dtype="<f8").reshape(n_rows, p)
        n_mask_bytes = (n_rows * p + 7) // 8
        mask = np.unpackbits(
            np.frombuffer(_read_exact(fh, n_mask_bytes, "mask"), dtype=np.uint8),
            count=n_rows * p).astype(bool).reshape(n_rows, p)
        (has_norm,) = struct.unpack("<B", _read_exact(fh, 1, "normalization flag"))
        normalization = {}
        if has_norm:
            n_const_bytes = (p + 7) // 8
            for sid in subjects:
                mean = np.frombuffer(_read_exact(fh, 8 * p, "norm mean"), dtype="<f8")
                std = np.frombuffer(_read_exact(fh, 8 * p, "norm std"), dtype="<f8")
                constant = np.unpackbits(
                    np.frombuffer(_read_exact(fh, n_const_bytes, "norm flags"),
                                  dtype=np.uint8), count=p).astype(bool)
                normalization[sid] = NormalizationParams(
                    mean.copy(), std.copy(), constant)
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after feature matrix")
    fm = FeatureMatrix(layout, values.copy(), mask,
                       np.array(sub_ids, dtype=object),
                       np.array(sessions, dtype=np.int32),
                       np.array(labels, dtype=np.int64),
                       subject_bands=bands)
    fm.normalization = normalization
    return fm


def export_feature_matrix_text(fm: FeatureMatrix, path):
    """Delimited text export: one row per trial, metadata then values."""
    lay = fm.layout
    cols = ["subject", "session", "label"]
    for flat in range(lay.n_features):
        cols.append(lay.feature_label(flat))
    with open(path, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for i in range(fm.n_rows):
            vals = "\t".join(repr(v) for v in fm.values[i])
            fh.write(f"{fm.subject_ids[i]}\t{fm.sessions[i]}\t{fm.labels[i]}\t{vals}\n")
