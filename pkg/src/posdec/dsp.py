"""Spatial and temporal preprocessing of multichannel recordings.

The preprocessing chain runs, in order: surface Laplacian over each
subject's own channels, restriction to the channels common to all
subjects, zero-phase high-pass filtering, common average reference, and
trial cropping. This module provides each step plus the binary container
for continuous recordings.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.signal

from .core import Montage, Recording
from .errors import ConfigError, DataError

_REC_MAGIC = b"POSDREC1"
_REC_VERSION = 1


# ---------------------------------------------------------------------------
# IIR filter design and zero-phase application
# ---------------------------------------------------------------------------

@dataclass
class IirFilter:
    """Cascaded second-order sections, each stored as (b0, b1, b2, a1, a2).

    The leading denominator coefficient is normalized to 1 and not stored.
    """

    sections: np.ndarray  # (n_sections, 5)
    order: int
    cutoff_hz: float
    sample_rate: float

    def __post_init__(self):
        self.sections = np.asarray(self.sections, dtype=np.float64)
        if self.sections.ndim != 2 or self.sections.shape[1] != 5:
            raise ConfigError(f"filter sections must be (n, 5), got {self.sections.shape}")

    def sos(self) -> np.ndarray:
        """Sections in scipy's (b0, b1, b2, a0, a1, a2) layout."""
        n = len(self.sections)
        out = np.empty((n, 6))
        out[:, :3] = self.sections[:, :3]
        out[:, 3] = 1.0
        out[:, 4:] = self.sections[:, 3:]
        return out

    def poles(self) -> np.ndarray:
        return np.concatenate([
            np.roots([1.0, a1, a2]) for _, _, _, a1, a2 in self.sections])

    def validate(self):
        """Check stability: every section pole strictly inside the unit circle."""
        mags = np.abs(self.poles())
        if not np.all(mags < 1.0):
            raise ConfigError(f"unstable filter: pole magnitude {mags.max():.6f} >= 1")

    def freq_response(self, freqs) -> np.ndarray:
        """Complex response of one forward pass at the given frequencies (Hz)."""
        w = 2.0 * np.pi * np.asarray(freqs, dtype=float) / self.sample_rate
        z1 = np.exp(-1j * w)
        z2 = z1 * z1
        h = np.ones_like(z1, dtype=complex)
        for b0, b1, b2, a1, a2 in self.sections:
            h = h * (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2)
        return h


def design_highpass_butterworth(cutoff_hz: float, sample_rate: float,
                                order: int = 3) -> IirFilter:
    """Butterworth high-pass via bilinear transform with frequency prewarping.

    Monotone magnitude response with -3 dB (1/sqrt(2)) at the cutoff.
    """
    if order < 1:
        raise ConfigError(f"filter order must be >= 1, got {order}")
    if not 0.0 < cutoff_hz < sample_rate / 2.0:
        raise ConfigError(
            f"cutoff {cutoff_hz} Hz must lie strictly between 0 and the "
            f"Nyquist frequency {sample_rate / 2.0} Hz")
    sos = scipy.signal.butter(order, cutoff_hz, btype="highpass",
                              fs=sample_rate, output="sos")
    filt = IirFilter(sos[:, [0, 1, 2, 4, 5]], order=order,
                     cutoff_hz=float(cutoff_hz), sample_rate=float(sample_rate))
    filt.validate()
    return filt


def filtfilt(filt: IirFilter, x: np.ndarray) -> np.ndarray:
    """Forward-backward filtering along the last axis (zero phase lag).

    Edges are extended with odd (reflect-and-negate) padding of length
    3 * (order + 1); the effective magnitude response is |H(f)|^2 with
    zero phase. Output length equals input length.
    """
    x = np.asarray(x, dtype=np.float64)
    padlen = 3 * (filt.order + 1)
    if x.shape[-1] <= padlen:
        raise DataError(
            f"signal length {x.shape[-1]} too short for padding length {padlen}")
    return scipy.signal.sosfiltfilt(filt.sos(), x, axis=-1,
                                    padtype="odd", padlen=padlen)


# ---------------------------------------------------------------------------
# spatial filters
# ---------------------------------------------------------------------------

def laplacian(recording: Recording, montage: Montage) -> Recording:
    """Surface Laplacian: subtract from each channel the mean of its
    montage neighbors that are present in the recording.

    Channels appearing in the recording but not in the montage are an
    error, as is a channel left with no present neighbor.
    """
    present = {name: i for i, name in enumerate(recording.channel_names)}
    x = recording.samples
    out = np.empty_like(x)
    for row, name in enumerate(recording.channel_names):
        c = montage.channel_index(name)
        nb_rows = [present[montage.names[j]] for j in montage.neighbors[c]
                   if montage.names[j] in present]
        if not nb_rows:
            raise ConfigError(
                f"channel {name!r} has no montage neighbor present in "
                f"recording {recording.subject_id!r}")
        out[row] = x[row] - x[nb_rows].mean(axis=0)
    return Recording(recording.subject_id, recording.sample_rate,
                     list(recording.channel_names), out)


def intersect_channels(recordings, montage: Montage = None) -> list:
    """Channel names common to every recording.

    Order follows the montage when one is given, otherwise the first
    recording's channel order (recordings are constructed in montage
    order, so the two normally coincide).
    """
    if not recordings:
        raise DataError("no recordings given")
    common = set(recordings[0].channel_names)
    for rec in recordings[1:]:
        common &= set(rec.channel_names)
    if not common:
        raise DataError("channel intersection across recordings is empty")
    ordering = montage.names if montage is not None else recordings[0].channel_names
    return [name for name in ordering if name in common]


def restrict_recording(recording: Recording, channel_names) -> Recording:
    """Recording reduced to `channel_names`, rows in the given order."""
    rows = [recording.channel_index(name) for name in channel_names]
    return Recording(recording.subject_id, recording.sample_rate,
                     list(channel_names), recording.samples[rows])


def common_average_reference(recording: Recording) -> Recording:
    """Subtract the instantaneous mean over channels from every channel."""
    x = recording.samples
    return Recording(recording.subject_id, recording.sample_rate,
                     list(recording.channel_names), x - x.mean(axis=0))


def crop_trial(recording: Recording, onset_sample: int,
               trial_seconds: float = 3.0) -> np.ndarray:
    """First `trial_seconds` of a key hold, as (n_channels, n) samples."""
    n = round(trial_seconds * recording.sample_rate)
    if onset_sample < 0 or onset_sample + n > recording.n_samples:
        raise DataError(
            f"trial at sample {onset_sample} (+{n}) out of range for recording "
            f"{recording.subject_id!r} with {recording.n_samples} samples")
    return recording.samples[:, onset_sample:onset_sample + n].copy()


# ---------------------------------------------------------------------------
# recording container
# ---------------------------------------------------------------------------

def _write_str(fh, s: str):
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise DataError(f"string too long for container: {s[:32]!r}...")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_exact(fh, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise DataError(f"truncated recording file while reading {what}")
    return raw


def _read_str(fh, what: str) -> str:
    (n,) = struct.unpack("<H", _read_exact(fh, 2, what))
    return _read_exact(fh, n, what).decode("utf-8")


def write_recording(recording: Recording, path):
    """Binary container: header plus float32 little-endian channel-major data."""
    with open(path, "wb") as fh:
        fh.write(_REC_MAGIC)
        fh.write(struct.pack("<H", _REC_VERSION))
        _write_str(fh, recording.subject_id)
        fh.write(struct.pack("<d", float(recording.sample_rate)))
        fh.write(struct.pack("<IQ", recording.n_channels, recording.n_samples))
        for name in recording.channel_names:
            _write_str(fh, name)
        fh.write(np.ascontiguousarray(recording.samples, dtype="<f4").tobytes())


def _read_recording_header(fh, origin: str):
    magic = fh.read(len(_REC_MAGIC))
    if magic != _REC_MAGIC:
        raise DataError(f"{origin}: not a recording container (bad magic)")
    (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
    if version != _REC_VERSION:
        raise DataError(f"{origin}: unsupported container version {version}")
    subject_id = _read_str(fh, "subject id")
    (sample_rate,) = struct.unpack("<d", _read_exact(fh, 8, "sample rate"))
    n_channels, n_samples = struct.unpack("<IQ", _read_exact(fh, 12, "shape"))
    names = [_read_str(fh, "channel name") for _ in range(n_channels)]
    return subject_id, sample_rate, names, n_samples


def read_recording_header(path):
    """(subject_id, sample_rate, channel_names, n_samples) without the data."""
    with open(path, "rb") as fh:
        return _read_recording_header(fh, str(path))


def read_recording(path) -> Recording:
    with open(path, "rb") as fh:
        subject_id, fs, names, n_samples = _read_recording_header(fh, str(path))
        count = len(names) * n_samples
        data = np.frombuffer(_read_exact(fh, 4 * count, "samples"), dtype="<f4")
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after sample data")
    samples = data.astype(np.float64).reshape(len(names), n_samples)
    return Recording(subject_id, fs, names, samples)


def import_recording_text(path, subject_id: str, sample_rate: float) -> Recording:
    """Import a delimited text recording: header of channel names, then one
    row per time point with one column per channel."""
    with open(path) as fh:
        header = None
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                header = line.split()
                break
        if header is None:
            raise DataError(f"{path}: empty recording text")
        try:
            data = np.loadtxt(fh, dtype=np.float64, comments="#", ndmin=2)
        except ValueError as exc:
            raise DataError(f"{path}: bad sample row ({exc})") from None
    if data.size == 0:
        raise DataError(f"{path}: no sample rows")
    if data.shape[1] != len(header):
        raise DataError(
            f"{path}: {data.shape[1]} columns per row but {len(header)} channel names")
    return Recording(subject_id, sample_rate, header, data.T.copy())
