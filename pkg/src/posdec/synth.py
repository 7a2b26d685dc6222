"""Seedable synthetic EEG with a planted, class-dependent band effect.

The generator reproduces the paradigm's trial structure: sessions of
trials whose target keys are balanced per session and never repeat
back to back, hold durations uniform on [3, 4] seconds, and a resting
segment before the first trial. Signals are per-channel 1/f noise plus
a resting-state narrowband oscillation (so the band scan has a real
peak to find) and, per trial, a band-limited burst at one channel whose
amplitude scales with the trial's key. Everything derives from one
master seed, so regenerated datasets are bit-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .core import (KEYS, Montage, Recording, default_montage, seeded_rng,
                   subselect_montage)
from .errors import ConfigError, DataError
from .spectral import Band

_STREAM_SUBJECT = 201

_DESK_CHANNELS = (
    "Fp1", "Fp2", "AFz", "F7", "F3", "Fz", "F4", "F8", "FT7", "FC3", "FCz",
    "FC4", "FT8", "T7", "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "T8",
    "TP7", "CP3", "CPz", "CP4", "TP8", "P7", "P3", "Pz", "P4", "P8")

_TINY_CHANNELS = ("F3", "Fz", "F4", "C5", "C3", "C1", "Cz", "C2", "C4",
                  "C6", "CPz", "Pz")


# ---------------------------------------------------------------------------
# effect and profile definitions
# ---------------------------------------------------------------------------

def default_class_gains() -> tuple:
    """Geometric amplitude ladder, 15% per key."""
    return tuple(1.15 ** (k - 1) for k in KEYS)


@dataclass(frozen=True)
class EffectSpec:
    """What gets planted into the synthetic signals.

    The per-trial burst sits at `effect_channel`, band-limited to
    `effect_band`, inside `effect_window` seconds after trial onset,
    with amplitude burst_amplitude * class_gains[key - 1]. The tonic
    component (off by default) spans the whole hold with the same class
    scaling, and `mu_effect` (off by default) adds a class-scaled
    oscillation at the `mu_channels` pair inside the effect window.
    `resting_mu_freq` fixes the resting oscillation frequency; left
    unset, each subject draws its own from 8.5 to 13.5 Hz.
    """

    effect_channel: str = "C3"
    effect_band: Band = Band(20.0, 30.0)
    effect_window: tuple = (0.0, 1.0)
    class_gains: tuple = field(default_factory=default_class_gains)
    burst_amplitude: float = 1.0
    tonic_amplitude: float = 0.0
    mu_effect: float = 0.0
    mu_channels: tuple = ("C3", "C4")
    noise_exponent: float = 1.0
    noise_amplitude: float = 1.0
    resting_mu_freq: float = None
    resting_mu_amplitude: float = 1.0

    def validate(self):
        problems = []
        if len(self.class_gains) != len(KEYS):
            problems.append(f"class_gains needs {len(KEYS)} entries, "
                            f"got {len(self.class_gains)}")
        elif any(g <= 0 for g in self.class_gains):
            problems.append("class_gains must all be positive")
        w0, w1 = self.effect_window
        if not 0.0 <= w0 < w1 <= 3.0:
            problems.append(f"effect_window {self.effect_window} must be an "
                            "increasing interval inside [0, 3] seconds")
        if self.burst_amplitude < 0 or self.tonic_amplitude < 0:
            problems.append("burst/tonic amplitudes must be >= 0")
        if self.mu_effect < 0 or self.resting_mu_amplitude < 0:
            problems.append("mu amplitudes must be >= 0")
        if self.noise_exponent < 0:
            problems.append("noise_exponent must be >= 0")
        if self.noise_amplitude <= 0:
            problems.append("noise_amplitude must be positive")
        if self.resting_mu_freq is not None and not 0 < self.resting_mu_freq:
            problems.append("resting_mu_freq must be positive")
        if problems:
            raise ConfigError(problems)


@dataclass(frozen=True)
class SynthProfile:
    """Dataset scale: subjects, sessions, montage subset, rates."""

    name: str
    n_subjects: int
    n_sessions: int
    trials_per_session: int
    sample_rate: float
    channels: tuple = None        # None = full montage
    resting_seconds: float = 75.0
    inter_trial_gap: float = 0.5

    @property
    def trials_per_subject(self) -> int:
        return self.n_sessions * self.trials_per_session


PROFILES = {
    # full paradigm scale; memory-hungry, for real hardware
    "full": SynthProfile("full", n_subjects=20, n_sessions=15,
                         trials_per_session=90, sample_rate=1000.0),
    # small enough for a workstation run, structured like the paradigm
    "desk": SynthProfile("desk", n_subjects=4, n_sessions=2,
                         trials_per_session=90, sample_rate=500.0,
                         channels=_DESK_CHANNELS),
    # smoke-test scale
    "tiny": SynthProfile("tiny", n_subjects=3, n_sessions=1,
                         trials_per_session=18, sample_rate=250.0,
                         channels=_TINY_CHANNELS, resting_seconds=61.0),
}


def get_profile(name: str) -> SynthProfile:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; "
                          f"choose from {sorted(PROFILES)}")
    return PROFILES[name]


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def _completable(counts: np.ndarray, last: int) -> bool:
    """Can the remaining key counts be ordered with no two adjacent equal
    and the first key differing from `last` (-1 for unconstrained)?

    A multiset arranges without adjacent repeats iff its maximum count is
    at most ceil(total/2); when total is odd and one key holds exactly
    ceil(total/2), every valid order starts with that key, so it must
    differ from `last`.
    """
    total = int(counts.sum())
    if total == 0:
        return True
    ceil_half = (total + 1) // 2
    m = int(counts.max())
    if m > ceil_half:
        return False
    if total % 2 == 1 and last >= 0 and counts[last] == ceil_half:
        return False
    return True


def generate_schedule(rng: np.random.Generator, sessions: int = 15,
                      trials_per_session: int = 90) -> np.ndarray:
    """Ordered target keys: balanced per session, no back-to-back repeats.

    Each session holds every key exactly trials_per_session / 9 times and
    no two consecutive trials share a key, session boundaries included.
    Keys are drawn uniformly among the choices that leave the rest of the
    session completable, so generation never dead-ends; an error here
    means the requested counts are genuinely unsatisfiable.
    """
    if sessions < 1 or trials_per_session < 1:
        raise ConfigError("sessions and trials_per_session must be >= 1")
    if trials_per_session % len(KEYS) != 0:
        raise ConfigError(
            f"trials_per_session must be divisible by {len(KEYS)}, "
            f"got {trials_per_session}")
    per_key = trials_per_session // len(KEYS)
    out = np.empty(sessions * trials_per_session, dtype=np.int64)
    last = -1
    pos = 0
    for _ in range(sessions):
        counts = np.full(len(KEYS), per_key, dtype=np.int64)
        for _ in range(trials_per_session):
            feasible = []
            for k in range(len(KEYS)):
                if k == last or counts[k] == 0:
                    continue
                counts[k] -= 1
                if _completable(counts, k):
                    feasible.append(k)
                counts[k] += 1
            if not feasible:
                raise DataError("schedule constraints are unsatisfiable")
            k = feasible[int(rng.integers(len(feasible)))]
            counts[k] -= 1
            out[pos] = KEYS[k]
            last = k
            pos += 1
    return out


def generate_hold_duration(rng: np.random.Generator) -> float:
    """Key-hold time in seconds, uniform on [3, 4]."""
    return float(rng.uniform(3.0, 4.0))


# ---------------------------------------------------------------------------
# signal synthesis
# ---------------------------------------------------------------------------

def _one_over_f_noise(rng: np.random.Generator, n: int, exponent: float,
                      amplitude: float, sample_rate: float) -> np.ndarray:
    """Gaussian noise with power spectrum proportional to 1/f^exponent,
    scaled to standard deviation `amplitude`."""
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    shape = np.zeros(len(freqs))
    shape[1:] = freqs[1:] ** (-exponent / 2.0)
    z = rng.standard_normal(len(freqs)) + 1j * rng.standard_normal(len(freqs))
    x = np.fft.irfft(shape * z, n)
    std = x.std()
    if std > 0:
        x *= amplitude / std
    return x


@dataclass
class TrialEvent:
    onset_sample: int
    label: int
    session: int


@dataclass
class SubjectTruth:
    """Ground-truth echo for one generated subject."""

    subject_id: str
    seed_stream: tuple
    mu_freq: float
    n_trials: int
    labels_per_key: dict


def generate_subject(subject_id: str, montage: Montage,
                     schedule: np.ndarray, session_of: np.ndarray,
                     effect: EffectSpec, sample_rate: float,
                     rng: np.random.Generator,
                     resting_seconds: float = 75.0,
                     inter_trial_gap: float = 0.5):
    """One subject's continuous recording plus its trial events.

    Timeline: `resting_seconds` of rest (with the planted resting-state
    oscillation), then the scheduled trials back to back, each holding
    for a uniform 3 to 4 seconds with `inter_trial_gap` seconds between
    key release and the next press. Returns (Recording, [TrialEvent],
    SubjectTruth).
    """
    effect.validate()
    if len(schedule) != len(session_of):
        raise DataError("schedule and session arrays differ in length")
    fs = float(sample_rate)
    n_trials = len(schedule)

    # subject-specific resting oscillation frequency
    if effect.resting_mu_freq is None:
        mu_freq = float(rng.integers(8, 14)) + 0.5
    else:
        mu_freq = float(effect.resting_mu_freq)

    # trial timing
    onsets = np.empty(n_trials, dtype=np.int64)
    holds = np.empty(n_trials)
    t = resting_seconds
    for i in range(n_trials):
        onsets[i] = round(t * fs)
        holds[i] = generate_hold_duration(rng)
        t += holds[i] + inter_trial_gap
    n_samples = round(t * fs)

    names = montage.names
    n_ch = len(names)
    samples = np.empty((n_ch, n_samples))

    # background noise, channel by channel
    for c in range(n_ch):
        samples[c] = _one_over_f_noise(rng, n_samples, effect.noise_exponent,
                                       effect.noise_amplitude, fs)

    # resting oscillation: common phase, channel-varying amplitude, so
    # spatial filtering (neighbor subtraction, average reference) keeps a
    # nonzero residual at the same frequency
    rest_n = round(resting_seconds * fs)
    amps = effect.resting_mu_amplitude * rng.uniform(0.5, 1.5, n_ch)
    tt = np.arange(rest_n) / fs
    rest_wave = np.sin(2.0 * np.pi * mu_freq * tt)
    samples[:, :rest_n] += amps[:, None] * rest_wave[None, :]

    # planted per-trial components
    try:
        eff_c = montage.channel_index(effect.effect_channel)
    except Exception:
        raise DataError(f"effect channel {effect.effect_channel!r} "
                        "not in montage") from None
    mu_idx = [montage.channel_index(nm) for nm in effect.mu_channels
              if nm in names]
    carrier = 0.5 * (effect.effect_band.low + effect.effect_band.high)
    w0, w1 = effect.effect_window
    burst_n = round((w1 - w0) * fs)
    burst_env = np.hanning(burst_n)
    burst_t = np.arange(burst_n) / fs
    for i in range(n_trials):
        gain = effect.class_gains[int(schedule[i]) - 1]
        start = onsets[i] + round(w0 * fs)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        if effect.burst_amplitude > 0:
            wave = np.sin(2.0 * np.pi * carrier * burst_t + phase)
            samples[eff_c, start:start + burst_n] += \
                effect.burst_amplitude * gain * burst_env * wave
        if effect.tonic_amplitude > 0:
            hold_n = round(holds[i] * fs)
            ht = np.arange(hold_n) / fs
            tone = np.sin(2.0 * np.pi * carrier * ht + phase)
            samples[eff_c, onsets[i]:onsets[i] + hold_n] += \
                effect.tonic_amplitude * gain * tone
        if effect.mu_effect > 0 and mu_idx:
            wave = np.sin(2.0 * np.pi * mu_freq * burst_t + phase)
            for c in mu_idx:
                samples[c, start:start + burst_n] += \
                    effect.mu_effect * gain * burst_env * wave

    recording = Recording(subject_id=subject_id, sample_rate=fs,
                          channel_names=names, samples=samples)
    events = [TrialEvent(int(onsets[i]), int(schedule[i]), int(session_of[i]))
              for i in range(n_trials)]
    per_key = {int(k): int((schedule == k).sum()) for k in KEYS}
    truth = SubjectTruth(subject_id=subject_id, seed_stream=(),
                         mu_freq=mu_freq, n_trials=n_trials,
                         labels_per_key=per_key)
    return recording, events, truth


def generate_dataset(master_seed: int, profile: SynthProfile,
                     effect: EffectSpec = None, montage: Montage = None,
                     drop_channels: dict = None, truncate_trials: dict = None):
    """All subjects of a profile, each from its own derived stream.

    `drop_channels` maps subject index to channel names left out of that
    subject's recording (exercising the channel intersection), and
    `truncate_trials` maps subject index to a number of trials cut from
    the end (exercising incomplete-experiment bookkeeping). Yields
    (Recording, [TrialEvent], SubjectTruth) per subject in index order.
    """
    effect = effect if effect is not None else EffectSpec()
    effect.validate()
    base = montage if montage is not None else default_montage()
    if profile.channels is not None:
        base = subselect_montage(base, profile.channels)
    drop_channels = drop_channels or {}
    truncate_trials = truncate_trials or {}

    for idx in range(profile.n_subjects):
        subject_id = f"S{idx + 1:02d}"
        rng = seeded_rng(master_seed, _STREAM_SUBJECT, idx)
        schedule = generate_schedule(rng, profile.n_sessions,
                                     profile.trials_per_session)
        session_of = np.repeat(np.arange(1, profile.n_sessions + 1),
                               profile.trials_per_session)
        cut = int(truncate_trials.get(idx, 0))
        if cut:
            if cut >= len(schedule):
                raise ConfigError(f"cannot truncate {cut} of "
                                  f"{len(schedule)} trials")
            schedule = schedule[:-cut]
            session_of = session_of[:-cut]
        sub_montage = base
        dropped = drop_channels.get(idx)
        if dropped:
            keep = [nm for nm in base.names if nm not in set(dropped)]
            if len(keep) == len(base.names):
                raise ConfigError(f"drop_channels for subject {idx} names "
                                  "no montage channel")
            sub_montage = subselect_montage(base, keep)
        recording, events, truth = generate_subject(
            subject_id, sub_montage, schedule, session_of, effect,
            profile.sample_rate, rng,
            resting_seconds=profile.resting_seconds,
            inter_trial_gap=profile.inter_trial_gap)
        truth.seed_stream = (master_seed, _STREAM_SUBJECT, idx)
        yield recording, events, truth


# ---------------------------------------------------------------------------
# sidecar files
# ---------------------------------------------------------------------------

def write_events(events, path):
    """Delimited trial events: onset sample, target key, session."""
    with open(path, "w") as fh:
        fh.write("onset_sample\tlabel\tsession\n")
        for ev in events:
            fh.write(f"{ev.onset_sample}\t{ev.label}\t{ev.session}\n")


def read_events(path):
    events = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != "onset_sample\tlabel\tsession":
            raise DataError(f"{path}: not a trial-events file")
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 columns")
            try:
                onset, label, session = (int(p) for p in parts)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer field") from None
            if label not in KEYS:
                raise DataError(f"{path}:{lineno}: label {label} not in 1..9")
            events.append(TrialEvent(onset, label, session))
    return events


def write_truth(path, master_seed: int, profile: SynthProfile,
                effect: EffectSpec, truths):
    """Ground-truth echo of what was generated, for test assertions."""
    doc = {
        "master_seed": int(master_seed),
        "profile": asdict(profile),
        "effect": {**asdict(effect),
                   "effect_band": [effect.effect_band.low,
                                   effect.effect_band.high]},
        "subjects": [asdict(t) for t in truths],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_truth(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
