"""Pipeline configuration: defaults, file parsing, flag overrides.

The config file is plain text with one dotted key per line::

    # comment
    forest.n_trees = 200
    spectral.beta_low = 18

Unset keys keep their defaults, which are the pipeline's reference
values (3 Hz order-3 highpass, 20 to 30 Hz beta band, 1 s windows at
50 ms steps over 3 s trials, 3 sigma outliers, 900 trees with
square-root feature sampling). `POSDEC_CONFIG` may point at a config
file; explicit command-line values override file values. Validation
collects every violation before failing, so one run reports them all.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .core import KEYS
from .errors import ConfigError
from .spectral import Band
from .synth import PROFILES, EffectSpec, default_class_gains


@dataclass
class PathsConfig:
    data_dir: str = "."
    out_dir: str = "."


@dataclass
class DspConfig:
    highpass_hz: float = 3.0
    filter_order: int = 3


@dataclass
class SpectralConfig:
    beta_low: float = 20.0
    beta_high: float = 30.0
    mu_search_low: int = 8
    mu_search_high: int = 15
    mu_widths: tuple = (1, 2, 3)
    mu_low: float = None          # set both to override the resting-scan band
    mu_high: float = None
    mu_channels: tuple = ("C3", "C4")  # expanded with montage neighbors
    window_seconds: float = 1.0
    step_seconds: float = 0.05
    trial_seconds: float = 3.0
    resting_min_seconds: float = 60.0


@dataclass
class RobustConfig:
    sigma: float = 3.0
    impute_mode: str = "train-mean"


@dataclass
class ForestConfig:
    n_trees: int = 900
    mtry: int = 0                 # 0 = floor(sqrt(n_features))
    seed: int = 0
    min_node_size: int = 1
    threads: int = 1


@dataclass
class SynthConfig:
    profile: str = "desk"
    seed: int = 0
    effect_channel: str = "C3"
    effect_low: float = 20.0
    effect_high: float = 30.0
    effect_window_start: float = 0.0
    effect_window_end: float = 1.0
    class_gains: tuple = field(default_factory=default_class_gains)
    burst_amplitude: float = 1.0
    tonic_amplitude: float = 0.0
    mu_effect: float = 0.0
    noise_exponent: float = 1.0
    noise_amplitude: float = 1.0
    resting_mu_freq: float = None
    resting_mu_amplitude: float = 1.0

    def to_effect(self) -> EffectSpec:
        return EffectSpec(
            effect_channel=self.effect_channel,
            effect_band=Band(self.effect_low, self.effect_high),
            effect_window=(self.effect_window_start, self.effect_window_end),
            class_gains=tuple(self.class_gains),
            burst_amplitude=self.burst_amplitude,
            tonic_amplitude=self.tonic_amplitude,
            mu_effect=self.mu_effect,
            noise_exponent=self.noise_exponent,
            noise_amplitude=self.noise_amplitude,
            resting_mu_freq=self.resting_mu_freq,
            resting_mu_amplitude=self.resting_mu_amplitude)


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    dsp: DspConfig = field(default_factory=DspConfig)
    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    robust: RobustConfig = field(default_factory=RobustConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def mu_override(self):
        """The configured fixed mu band, or None to scan per subject."""
        lo, hi = self.spectral.mu_low, self.spectral.mu_high
        if lo is None and hi is None:
            return None
        return Band(lo, hi)

    def validate(self) -> list:
        """Every violated constraint, as human-readable strings."""
        p = []
        if self.dsp.highpass_hz <= 0:
            p.append("dsp.highpass_hz must be positive")
        if self.dsp.filter_order < 1:
            p.append("dsp.filter_order must be >= 1")
        s = self.spectral
        if not 0 < s.beta_low < s.beta_high:
            p.append("spectral.beta_low/beta_high must satisfy 0 < low < high")
        if not 0 < s.mu_search_low < s.mu_search_high:
            p.append("spectral.mu_search_low/high must satisfy 0 < low < high")
        if not s.mu_widths or any(w < 1 for w in s.mu_widths):
            p.append("spectral.mu_widths must be positive integers")
        if (s.mu_low is None) != (s.mu_high is None):
            p.append("spectral.mu_low and mu_high must be set together")
        elif s.mu_low is not None and not 0 < s.mu_low < s.mu_high:
            p.append("spectral.mu_low/mu_high must satisfy 0 < low < high")
        if s.window_seconds <= 0 or s.step_seconds <= 0 or s.trial_seconds <= 0:
            p.append("spectral window/step/trial seconds must be positive")
        elif s.window_seconds > s.trial_seconds:
            p.append("spectral.window_seconds cannot exceed trial_seconds")
        if s.resting_min_seconds <= 0:
            p.append("spectral.resting_min_seconds must be positive")
        if not s.mu_channels:
            p.append("spectral.mu_channels must name at least one channel")
        if self.robust.sigma <= 0:
            p.append("robust.sigma must be positive")
        if self.robust.impute_mode not in ("train-mean", "normalize"):
            p.append("robust.impute_mode must be 'train-mean' or 'normalize'")
        f = self.forest
        if f.n_trees < 1:
            p.append("forest.n_trees must be >= 1")
        if f.mtry < 0:
            p.append("forest.mtry must be >= 0 (0 selects the default)")
        if f.seed < 0:
            p.append("forest.seed must be >= 0")
        if f.min_node_size < 1:
            p.append("forest.min_node_size must be >= 1")
        if f.threads < 1:
            p.append("forest.threads must be >= 1")
        sy = self.synth
        if sy.profile not in PROFILES:
            p.append(f"synth.profile must be one of {sorted(PROFILES)}")
        if sy.seed < 0:
            p.append("synth.seed must be >= 0")
        try:
            sy.to_effect().validate()
        except ConfigError as exc:
            p.extend(f"synth: {v}" for v in exc.violations)
        except Exception as exc:
            p.append(f"synth effect settings invalid: {exc}")
        return p


# ---------------------------------------------------------------------------
# value parsers, one per key
# ---------------------------------------------------------------------------

def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    return float(s)


def _str(s: str) -> str:
    return s


def _opt_float(s: str):
    return None if s.lower() in ("", "none") else float(s)


def _ints(s: str) -> tuple:
    return tuple(int(v.strip()) for v in s.split(",") if v.strip())


def _floats(s: str) -> tuple:
    return tuple(float(v.strip()) for v in s.split(",") if v.strip())


def _strs(s: str) -> tuple:
    return tuple(v.strip() for v in s.split(",") if v.strip())


_KEY_PARSERS = {
    "paths.data_dir": _str,
    "paths.out_dir": _str,
    "dsp.highpass_hz": _float,
    "dsp.filter_order": _int,
    "spectral.beta_low": _float,
    "spectral.beta_high": _float,
    "spectral.mu_search_low": _int,
    "spectral.mu_search_high": _int,
    "spectral.mu_widths": _ints,
    "spectral.mu_low": _opt_float,
    "spectral.mu_high": _opt_float,
    "spectral.mu_channels": _strs,
    "spectral.window_seconds": _float,
    "spectral.step_seconds": _float,
    "spectral.trial_seconds": _float,
    "spectral.resting_min_seconds": _float,
    "robust.sigma": _float,
    "robust.impute_mode": _str,
    "forest.n_trees": _int,
    "forest.mtry": _int,
    "forest.seed": _int,
    "forest.min_node_size": _int,
    "forest.threads": _int,
    "synth.profile": _str,
    "synth.seed": _int,
    "synth.effect_channel": _str,
    "synth.effect_low": _float,
    "synth.effect_high": _float,
    "synth.effect_window_start": _float,
    "synth.effect_window_end": _float,
    "synth.class_gains": _floats,
    "synth.burst_amplitude": _float,
    "synth.tonic_amplitude": _float,
    "synth.mu_effect": _float,
    "synth.noise_exponent": _float,
    "synth.noise_amplitude": _float,
    "synth.resting_mu_freq": _opt_float,
    "synth.resting_mu_amplitude": _float,
}


def parse_config_text(text: str, origin: str = "<config>"):
    """(settings dict, problems list) from dotted-key config text."""
    settings, problems = {}, []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            problems.append(f"{origin}:{lineno}: expected 'key = value', "
                            f"got {line!r}")
            continue
        settings[key.strip()] = value.strip()
    return settings, problems


def apply_settings(cfg: PipelineConfig, settings: dict, origin: str) -> list:
    """Set dotted keys on the config tree; returns problem strings."""
    problems = []
    for key, raw in settings.items():
        parser = _KEY_PARSERS.get(key)
        if parser is None:
            problems.append(f"{origin}: unknown config key {key!r}")
            continue
        section, name = key.split(".", 1)
        try:
            value = parser(raw)
        except ValueError:
            problems.append(f"{origin}: bad value for {key}: {raw!r}")
            continue
        setattr(getattr(cfg, section), name, value)
    return problems


def load_config(path: str = None, overrides: dict = None) -> PipelineConfig:
    """Defaults, then the config file, then explicit overrides.

    `path` falls back to the POSDEC_CONFIG environment variable. All
    parse and validation problems are raised together in one error.
    """
    cfg = PipelineConfig()
    problems = []
    if path is None:
        path = os.environ.get("POSDEC_CONFIG") or None
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            settings, parse_problems = parse_config_text(fh.read(), path)
        problems += parse_problems
        problems += apply_settings(cfg, settings, path)
    if overrides:
        problems += apply_settings(cfg, dict(overrides), "command line")
    problems += cfg.validate()
    if problems:
        raise ConfigError(problems)
    return cfg
