"""Shared types for the decoding pipeline.

This module defines the containers passed between pipeline stages
(montages, recordings, trials, feature matrices), the canonical flat
feature indexing, and the derived random-number streams that make every
stage reproducible from a single master seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ConfigError, DataError

# Keys are labelled 1..9 throughout (left little finger .. right little finger).
KEYS = tuple(range(1, 10))
N_KEYS = len(KEYS)

# Band axis of the feature layout.
MU, BETA = 0, 1
BAND_NAMES = ("mu", "beta")

DEFAULT_MONTAGE_RESOURCE = "montage106.txt"


# ---------------------------------------------------------------------------
# seeded random streams
# ---------------------------------------------------------------------------

def seeded_rng(master_seed: int, *stream: int) -> np.random.Generator:
    """Return an independent generator for (master_seed, stream...).

    Every random decision in the pipeline draws from a stream derived
    this way, so results depend only on the master seed and the logical
    task identity, never on execution order or worker count.
    """
    if master_seed < 0:
        raise ConfigError(f"master seed must be non-negative, got {master_seed}")
    for s in stream:
        if s < 0:
            raise ConfigError(f"stream ids must be non-negative, got {s}")
    return np.random.default_rng(np.random.SeedSequence((master_seed, *stream)))


# ---------------------------------------------------------------------------
# montage
# ---------------------------------------------------------------------------

@dataclass
class Montage:
    """Electrode names, flattened 2-D scalp positions, neighbor relation.

    The neighbor relation is symmetric and irreflexive; it drives the
    surface Laplacian. Positions live in an azimuthal-equidistant
    projection with the vertex at the origin and the head rim at radius 1.
    """

    names: tuple
    positions: np.ndarray  # (n, 2) float
    neighbors: tuple       # tuple of tuples of channel indices

    def __post_init__(self):
        self.names = tuple(self.names)
        self.positions = np.asarray(self.positions, dtype=float)
        self.neighbors = tuple(tuple(int(j) for j in nb) for nb in self.neighbors)
        self._index = {}
        for i, name in enumerate(self.names):
            if name in self._index:
                raise DataError(f"duplicate channel name in montage: {name!r}")
            self._index[name] = i
        self.validate()

    @property
    def n_channels(self) -> int:
        return len(self.names)

    def channel_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise DataError(f"channel {name!r} not in montage") from None

    def validate(self):
        n = self.n_channels
        if self.positions.shape != (n, 2):
            raise DataError(
                f"montage positions shape {self.positions.shape} does not match "
                f"{n} channels")
        if not np.all(np.isfinite(self.positions)):
            raise DataError("montage positions must be finite")
        if len(self.neighbors) != n:
            raise DataError("montage neighbor table does not match channel count")
        for i, nb in enumerate(self.neighbors):
            for j in nb:
                if not (0 <= j < n):
                    raise DataError(f"channel {self.names[i]} has invalid neighbor index {j}")
                if j == i:
                    raise DataError(f"channel {self.names[i]} lists itself as neighbor")
                if i not in self.neighbors[j]:
                    raise DataError(
                        f"neighbor relation not symmetric: {self.names[i]} -> "
                        f"{self.names[j]} has no reverse entry")


def nearest_neighbors(positions: np.ndarray, k: int = 4) -> tuple:
    """Symmetrized k-nearest-neighbor relation over 2-D positions.

    Ties in distance resolve toward the lower channel index. The raw
    k-NN relation is directional, so it is symmetrized by union; channels
    can therefore end up with more than k neighbors.
    """
    pos = np.asarray(positions, dtype=float)
    n = len(pos)
    if n < 2:
        raise DataError("need at least two channels to build a neighbor relation")
    if k < 1:
        raise ConfigError(f"neighbor count must be >= 1, got {k}")
    d = np.hypot(pos[:, 0][:, None] - pos[:, 0][None, :],
                 pos[:, 1][:, None] - pos[:, 1][None, :])
    sets = [set() for _ in range(n)]
    for i in range(n):
        order = sorted((d[i, j], j) for j in range(n) if j != i)
        for _, j in order[:k]:
            sets[i].add(j)
            sets[j].add(i)  # union symmetrization
    return tuple(tuple(sorted(s)) for s in sets)


def subselect_montage(montage: Montage, names, k: int = 4) -> Montage:
    """Montage restricted to `names` (kept in montage order), neighbors rebuilt."""
    wanted = set(names)
    missing = wanted - set(montage.names)
    if missing:
        raise DataError(f"channels not in montage: {sorted(missing)}")
    keep = [i for i, nm in enumerate(montage.names) if nm in wanted]
    sub_names = tuple(montage.names[i] for i in keep)
    sub_pos = montage.positions[keep]
    return Montage(sub_names, sub_pos, nearest_neighbors(sub_pos, k=k))


def save_montage(montage: Montage, path):
    """Write a montage as delimited text: position rows, then neighbor rows."""
    lines = ["# channel positions: name x y"]
    for name, (x, y) in zip(montage.names, montage.positions):
        lines.append(f"{name} {float(x)!r} {float(y)!r}")
    lines.append("")
    lines.append("# neighbors: name: n1,n2,...")
    for name, nb in zip(montage.names, montage.neighbors):
        lines.append(f"{name}: {','.join(montage.names[j] for j in nb)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_montage_text(text: str, origin: str) -> Montage:
    names, coords = [], []
    neighbor_rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" in line:
            neighbor_rows.append((lineno, line))
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataError(f"{origin}:{lineno}: expected 'name x y', got {raw!r}")
        name = parts[0]
        if name in names:
            raise DataError(f"{origin}:{lineno}: duplicate channel name {name!r}")
        try:
            coords.append((float(parts[1]), float(parts[2])))
        except ValueError:
            raise DataError(f"{origin}:{lineno}: bad coordinate in {raw!r}") from None
        names.append(name)
    if not names:
        raise DataError(f"{origin}: no channels found")
    index = {nm: i for i, nm in enumerate(names)}
    neighbors = [()] * len(names)
    seen = set()
    for lineno, line in neighbor_rows:
        head, _, tail = line.partition(":")
        name = head.strip()
        if name not in index:
            raise DataError(f"{origin}:{lineno}: neighbor list for unknown channel {name!r}")
        if name in seen:
            raise DataError(f"{origin}:{lineno}: duplicate neighbor list for {name!r}")
        seen.add(name)
        nb = []
        for tok in tail.split(","):
            tok = tok.strip()
            if not tok:
                continue
            if tok not in index:
                raise DataError(f"{origin}:{lineno}: unknown neighbor {tok!r} of {name!r}")
            nb.append(index[tok])
        neighbors[index[name]] = tuple(nb)
    if seen != set(names):
        missing = sorted(set(names) - seen)
        raise DataError(f"{origin}: missing neighbor lists for {missing}")
    return Montage(tuple(names), np.array(coords, dtype=float), tuple(neighbors))


def load_montage(path) -> Montage:
    """Parse a montage file (see `save_montage` for the format)."""
    with open(path) as fh:
        return _parse_montage_text(fh.read(), str(path))


# Scalp layout of the bundled montage. Rows run front to back; the first
# number is the arc position from nasion to inion in percent, each entry
# pairs a channel name with its left-to-right arc position in percent.
_MONTAGE_ROWS = (
    (10.0, (("Fp1", 40), ("Fpz", 50), ("Fp2", 60))),
    (20.0, (("AF7", 10), ("AF5", 20), ("AF3", 30), ("AF1", 40), ("AFz", 50),
            ("AF2", 60), ("AF4", 70), ("AF6", 80), ("AF8", 90))),
    (30.0, (("F9", 0), ("F7", 10), ("F5", 20), ("F3", 30), ("F1", 40), ("Fz", 50),
            ("F2", 60), ("F4", 70), ("F6", 80), ("F8", 90), ("F10", 100))),
    (35.0, (("FFC5h", 25), ("FFC3h", 35), ("FFC1h", 45), ("FFC2h", 55),
            ("FFC4h", 65), ("FFC6h", 75))),
    (40.0, (("FT9", 0), ("FT7", 10), ("FC5", 20), ("FC3", 30), ("FC1", 40),
            ("FCz", 50), ("FC2", 60), ("FC4", 70), ("FC6", 80), ("FT8", 90),
            ("FT10", 100))),
    (45.0, (("FCC5h", 25), ("FCC3h", 35), ("FCC1h", 45), ("FCC2h", 55),
            ("FCC4h", 65), ("FCC6h", 75))),
    (50.0, (("T9", 0), ("T7", 10), ("C5", 20), ("C3", 30), ("C1", 40), ("Cz", 50),
            ("C2", 60), ("C4", 70), ("C6", 80), ("T8", 90), ("T10", 100))),
    (55.0, (("CCP5h", 25), ("CCP3h", 35), ("CCP1h", 45), ("CCP2h", 55),
            ("CCP4h", 65), ("CCP6h", 75))),
    (60.0, (("TP9", 0), ("TP7", 10), ("CP5", 20), ("CP3", 30), ("CP1", 40),
            ("CPz", 50), ("CP2", 60), ("CP4", 70), ("CP6", 80), ("TP8", 90),
            ("TP10", 100))),
    (65.0, (("CPP5h", 25), ("CPP3h", 35), ("CPP1h", 45), ("CPP2h", 55),
            ("CPP4h", 65), ("CPP6h", 75))),
    (70.0, (("P9", 0), ("P7", 10), ("P5", 20), ("P3", 30), ("P1", 40), ("Pz", 50),
            ("P2", 60), ("P4", 70), ("P6", 80), ("P8", 90), ("P10", 100))),
    (80.0, (("PO9", 0), ("PO7", 10), ("PO5", 20), ("PO3", 30), ("PO1", 40),
            ("POz", 50), ("PO2", 60), ("PO4", 70), ("PO6", 80), ("PO8", 90),
            ("PO10", 100))),
    (90.0, (("O1", 40), ("Oz", 50), ("O2", 60))),
    (100.0, (("Iz", 50),)),
)


def _project_scalp(theta_pct: float, phi_pct: float):
    """Map (front-back %, left-right %) arc coordinates to the 2-D plane.

    Points sit on a unit sphere and are flattened with an
    azimuthal-equidistant projection about the vertex, so arc length from
    the vertex is preserved and the head rim lands at radius 1.
    """
    theta = theta_pct / 100.0 * math.pi
    phi = phi_pct / 100.0 * math.pi - math.pi / 2.0
    x = math.sin(theta) * math.sin(phi)   # +right
    y = math.cos(theta)                   # +front
    z = math.sin(theta) * math.cos(phi)   # +up
    r_plane = math.hypot(x, y)
    if r_plane < 1e-12:
        return 0.0, 0.0
    alpha = math.acos(max(-1.0, min(1.0, z)))
    scale = (alpha / (math.pi / 2.0)) / r_plane
    return x * scale, y * scale


def build_default_montage(k: int = 4) -> Montage:
    """Construct the bundled 106-channel extended 10-20 montage."""
    names, coords = [], []
    for theta_pct, row in _MONTAGE_ROWS:
        for name, phi_pct in row:
            names.append(name)
            coords.append(_project_scalp(theta_pct, phi_pct))
    pos = np.array(coords, dtype=float)
    return Montage(tuple(names), pos, nearest_neighbors(pos, k=k))


def default_montage() -> Montage:
    """Load the montage bundled with the package."""
    text = resources.files(__package__).joinpath(
        "data", DEFAULT_MONTAGE_RESOURCE).read_text()
    return _parse_montage_text(text, DEFAULT_MONTAGE_RESOURCE)


# ---------------------------------------------------------------------------
# recordings and trials
# ---------------------------------------------------------------------------

@dataclass
class Recording:
    """One subject's continuous multichannel signal.

    `samples` is channel-major, shape (n_channels, n_samples). The resting
    segment, when present, is the span before the first trial onset.
    """

    subject_id: str
    sample_rate: float
    channel_names: list
    samples: np.ndarray

    def __post_init__(self):
        self.channel_names = list(self.channel_names)
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 2 or self.samples.shape[0] != len(self.channel_names):
            raise DataError(
                f"recording {self.subject_id!r}: samples shape {self.samples.shape} "
                f"does not match {len(self.channel_names)} channels")
        if self.sample_rate <= 0:
            raise DataError(f"recording {self.subject_id!r}: bad sample rate")
        if len(set(self.channel_names)) != len(self.channel_names):
            raise DataError(f"recording {self.subject_id!r}: duplicate channel names")

    @property
    def n_channels(self) -> int:
        return len(self.channel_names)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_seconds(self) -> float:
        return self.n_samples / self.sample_rate

    def channel_index(self, name: str) -> int:
        try:
            return self.channel_names.index(name)
        except ValueError:
            raise DataError(f"channel {name!r} not in recording {self.subject_id!r}") from None


@dataclass
class Trial:
    """One cropped key-hold segment."""

    samples: np.ndarray  # (n_channels, n_samples)
    label: int
    subject_id: str
    session: int


# ---------------------------------------------------------------------------
# feature layout
# ---------------------------------------------------------------------------

N_SLIDING = 41
WHOLE = N_SLIDING          # flat window slot of the whole-trial feature
N_WINDOWS = N_SLIDING + 1  # sliding windows plus the whole-trial window


@dataclass(frozen=True)
class FeatureLayout:
    """Bijection between (channel, band, window) and flat feature columns.

    Order is channel-major, then band (mu before beta), then window
    (41 sliding windows in time order, then the whole-trial window), so a
    106-channel montage yields 106 * 2 * 42 = 8904 features.
    """

    channel_names: tuple
    window_seconds: float = 1.0
    step_seconds: float = 0.05
    trial_seconds: float = 3.0

    @property
    def n_channels(self) -> int:
        return len(self.channel_names)

    @property
    def features_per_channel(self) -> int:
        return 2 * N_WINDOWS

    @property
    def n_features(self) -> int:
        return self.n_channels * self.features_per_channel

    def feature_index(self, channel: int, band: int, window) -> int:
        """Flat column of one feature. `window` is 0..40 or WHOLE/'whole'."""
        if window == "whole":
            window = WHOLE
        if not 0 <= channel < self.n_channels:
            raise IndexError(f"channel {channel} out of range")
        if band not in (MU, BETA):
            raise IndexError(f"band must be {MU} (mu) or {BETA} (beta), got {band}")
        if not 0 <= window <= WHOLE:
            raise IndexError(f"window {window} out of range")
        return channel * self.features_per_channel + band * N_WINDOWS + window

    def feature_coords(self, flat: int):
        """Inverse of `feature_index`; window WHOLE marks the whole-trial slot."""
        if not 0 <= flat < self.n_features:
            raise IndexError(f"flat feature index {flat} out of range")
        channel, rest = divmod(flat, self.features_per_channel)
        band, window = divmod(rest, N_WINDOWS)
        return channel, band, window

    def window_center_seconds(self, window: int) -> float:
        """Center time of a sliding window relative to trial onset."""
        if not 0 <= window < N_SLIDING:
            raise IndexError(f"window {window} is not a sliding window")
        return self.window_seconds / 2.0 + window * self.step_seconds

    def window_label(self, window: int) -> str:
        if window == WHOLE:
            return "whole"
        return f"{self.window_center_seconds(window):.2f}"

    def feature_label(self, flat: int) -> str:
        """Readable column name, e.g. 'C3.beta.0.55' or 'C3.mu.whole'."""
        c, b, w = self.feature_coords(flat)
        return f"{self.channel_names[c]}.{BAND_NAMES[b]}.{self.window_label(w)}"

    def parse_feature_label(self, label: str):
        """Inverse of `feature_label`: (channel, band, window) coordinates."""
        try:
            name, band_name, wlab = label.split(".", 2)
            channel = self.channel_names.index(name)
            band = BAND_NAMES.index(band_name)
            if wlab == "whole":
                window = WHOLE
            else:
                window = round((float(wlab) - self.window_seconds / 2.0)
                               / self.step_seconds)
        except ValueError as exc:
            raise DataError(f"bad feature label {label!r}: {exc}") from None
        if self.feature_label(self.feature_index(channel, band, window)) != label:
            raise DataError(f"bad feature label {label!r}")
        return channel, band, window

    def window_start_samples(self, sample_rate: float) -> np.ndarray:
        """Start sample of each sliding window (closed start, open end)."""
        return np.array([round(i * self.step_seconds * sample_rate)
                         for i in range(N_SLIDING)], dtype=int)

    def window_length_samples(self, sample_rate: float) -> int:
        return round(self.window_seconds * sample_rate)

    def trial_length_samples(self, sample_rate: float) -> int:
        return round(self.trial_seconds * sample_rate)


# ---------------------------------------------------------------------------
# feature matrix
# ---------------------------------------------------------------------------

@dataclass
class FeatureMatrix:
    """Trials-by-features matrix with row metadata and an outlier mask.

    `mask` marks cells flagged by outlier detection; masked cells are
    excluded from normalization statistics and later imputed. Per-subject
    band choices and normalization parameters ride along once the
    corresponding stages have run.
    """

    layout: FeatureLayout
    values: np.ndarray        # (n_rows, n_features) float64
    mask: np.ndarray          # (n_rows, n_features) bool
    subject_ids: np.ndarray   # (n_rows,) str
    sessions: np.ndarray      # (n_rows,) int
    labels: np.ndarray        # (n_rows,) int, values in KEYS
    subject_bands: dict = field(default_factory=dict)
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.subject_ids = np.asarray(self.subject_ids, dtype=object)
        self.sessions = np.asarray(self.sessions, dtype=np.int32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    def validate(self):
        n, p = self.values.shape
        if p != self.layout.n_features:
            raise DataError(
                f"feature matrix has {p} columns, layout expects {self.layout.n_features}")
        if self.mask.shape != (n, p):
            raise DataError("outlier mask shape does not match values")
        for arr, what in ((self.subject_ids, "subject_ids"),
                          (self.sessions, "sessions"), (self.labels, "labels")):
            if arr.shape != (n,):
                raise DataError(f"{what} length does not match row count")
        bad = ~np.isin(self.labels, KEYS)
        if bad.any():
            raise DataError(f"labels outside 1..9 found: {sorted(set(self.labels[bad]))}")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def subjects(self) -> list:
        """Subject ids in order of first appearance."""
        seen, out = set(), []
        for sid in self.subject_ids:
            if sid not in seen:
                seen.add(sid)
                out.append(sid)
        return out

    def rows_for_subject(self, subject_id) -> np.ndarray:
        return np.flatnonzero(self.subject_ids == subject_id)
