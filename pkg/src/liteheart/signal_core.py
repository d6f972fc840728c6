"""Multi-lead signal records: preprocessing, lead masking, splitting, IO and a
synthetic corpus generator with lead-localized class patterns."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal as sps

log = logging.getLogger(__name__)

N_LEADS = 12
LEAD_NAMES = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
ZSCORE_EPS = 1e-8


@dataclass
class SignalRecord:
    id: str
    signal: np.ndarray
    fs: float
    labels: np.ndarray | None = None
    is_labeled: bool = True

    def __post_init__(self):
        self.signal = np.asarray(self.signal)
        if self.signal.ndim != 2 or self.signal.shape[0] != N_LEADS:
            raise ValueError(f"record {self.id}: expected a [12 x L] signal, got {self.signal.shape}")
        if self.signal.shape[1] == 0:
            raise ValueError(f"record {self.id}: empty signal")
        if not np.all(np.isfinite(self.signal)):
            raise ValueError(f"record {self.id}: signal contains non-finite values")
        if self.fs <= 2 * 47:
            raise ValueError(f"record {self.id}: sampling rate {self.fs} Hz must exceed 94 Hz")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int8)
            if self.labels.ndim != 1 or not np.isin(self.labels, (0, 1)).all():
                raise ValueError(f"record {self.id}: labels must be a binary vector")
        else:
            self.is_labeled = False

    @property
    def length(self) -> int:
        return self.signal.shape[1]


@dataclass
class LeadView:
    source_id: str
    signal: np.ndarray
    lead_index: int


@dataclass
class SplitSpec:
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    labeled_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if min(fracs) <= 0:
            raise ValueError("split fractions must be positive")
        if not math.isclose(sum(fracs), 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)}")
        if not 0 < self.labeled_frac <= 1:
            raise ValueError("labeled_frac must lie in (0, 1]")


@dataclass
class Split:
    labeled: list[SignalRecord]
    unlabeled: list[SignalRecord]
    val: list[SignalRecord]
    test: list[SignalRecord]

    def ids(self) -> dict[str, list[str]]:
        return {k: [r.id for r in getattr(self, k)] for k in ("labeled", "unlabeled", "val", "test")}


# -- preprocessing --------------------------------------------------------------


def _check_finite(record: SignalRecord) -> None:
    if not np.all(np.isfinite(record.signal)):
        raise ValueError(f"record {record.id}: non-finite input")


MAINS_HZ = 50.0
MAINS_ATTEN_DB = 20.0


def _lowpass_order(fs: float, high: float, order: int) -> int:
    # Raise the low-pass order until mains hum sits MAINS_ATTEN_DB down after the
    # forward-backward pass (half of that per pass).
    if MAINS_HZ >= fs / 2 or MAINS_HZ <= high:
        return order
    n, _ = sps.buttord(high, MAINS_HZ, gpass=3.0, gstop=MAINS_ATTEN_DB / 2, fs=fs)
    return max(order, int(n))


def bandpass_sos(fs: float, low: float = 1.0, high: float = 47.0, order: int = 4) -> np.ndarray:
    """Butterworth high-pass at ``low`` cascaded with a Butterworth low-pass at ``high``."""
    if fs <= 2 * high:
        raise ValueError(f"sampling rate {fs} Hz too low for a {high} Hz band edge")
    if not 0 < low < high:
        raise ValueError("band edges must satisfy 0 < low < high")
    hp = sps.butter(order, low, btype="highpass", fs=fs, output="sos")
    lp = sps.butter(_lowpass_order(fs, high, order), high, btype="lowpass", fs=fs, output="sos")
    return np.vstack([hp, lp])


def bandpass_filter(record: SignalRecord, low: float = 1.0, high: float = 47.0, order: int = 4) -> SignalRecord:
    """Zero-phase Butterworth band-pass applied per lead."""
    _check_finite(record)
    sos = bandpass_sos(record.fs, low, high, order)
    # sosfiltfilt's default edge padding
    padlen = 3 * (2 * len(sos) + 1 - min((sos[:, 2] == 0).sum(), (sos[:, 5] == 0).sum()))
    if record.length <= padlen:
        raise ValueError(f"record {record.id}: length {record.length} shorter than filter transient ({padlen})")
    out = sps.sosfiltfilt(sos, record.signal.astype(np.float64), axis=1)
    return replace(record, signal=out)


def zscore_normalize(record: SignalRecord, eps: float = ZSCORE_EPS) -> SignalRecord:
    """Per-lead z-score using the population std; flat leads map to zeros."""
    x = record.signal.astype(np.float64)
    mean = x.mean(axis=1, keepdims=True)
    std = x.std(axis=1, keepdims=True)
    out = np.where(std > eps, (x - mean) / np.maximum(std, eps), 0.0)
    return replace(record, signal=out)


def resample(record: SignalRecord, target_fs: float) -> SignalRecord:
    if target_fs == record.fs:
        return record
    ratio = Fraction(target_fs / record.fs).limit_denominator(1000)
    out = sps.resample_poly(record.signal.astype(np.float64), ratio.numerator, ratio.denominator, axis=1)
    return replace(record, signal=out, fs=float(target_fs))


def preprocess(record: SignalRecord, target_fs: float | None = None) -> SignalRecord:
    if target_fs is not None:
        record = resample(record, target_fs)
    return zscore_normalize(bandpass_filter(record))


def mask_to_lead(record: SignalRecord, lead_index: int = 0) -> LeadView:
    if not 0 <= lead_index < N_LEADS:
        raise ValueError(f"lead_index must be in [0, 11], got {lead_index}")
    return LeadView(record.id, record.signal[lead_index:lead_index + 1].copy(), lead_index)


# -- splitting --------------------------------------------------------------------


def split_dataset(records: Sequence[SignalRecord], spec: SplitSpec) -> Split:
    """Partition into labeled-train, unlabeled-train, validation and test sets.

    Validation and test sizes are floored; the remainder goes to training.
    Unlabeled records are copies with labels stripped.
    """
    n = len(records)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    if n < 10:
        raise ValueError(f"need at least 10 records to split, got {n}")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_val = int(math.floor(n * spec.val_frac))
    n_test = int(math.floor(n * spec.test_frac))
    n_train = n - n_val - n_test
    train_idx = order[:n_train]
    val_idx = order[n_train:n_train + n_val]
    test_idx = order[n_train + n_val:]
    n_lab = n_train if spec.labeled_frac >= 1 else int(math.floor(n_train * spec.labeled_frac))
    labeled = [records[i] for i in train_idx[:n_lab]]
    unlabeled = [replace(records[i], labels=None, is_labeled=False) for i in train_idx[n_lab:]]
    return Split(labeled, unlabeled, [records[i] for i in val_idx], [records[i] for i in test_idx])


# -- synthetic corpus -------------------------------------------------------------


@dataclass
class ClassPattern:
    name: str
    leads: list[int]
    window: tuple[float, float]
    kind: str = "bump"
    amplitude: float = 0.3
    lead_gains: list[float] | None = None  # per entry of ``leads``; default 1

    def __post_init__(self):
        self.window = tuple(self.window)
        if not self.leads:
            raise ValueError(f"class {self.name}: must affect at least one lead")
        if any(not 0 <= l < N_LEADS for l in self.leads):
            raise ValueError(f"class {self.name}: lead index out of range")
        if self.lead_gains is not None and (
            len(self.lead_gains) != len(self.leads) or any(g <= 0 for g in self.lead_gains)
        ):
            raise ValueError(f"class {self.name}: lead_gains needs one positive gain per lead")
        lo, hi = self.window
        if not 0 <= lo < hi <= 1:
            raise ValueError(f"class {self.name}: window must satisfy 0 <= start < end <= 1")
        if self.kind not in ("bump", "shift"):
            raise ValueError(f"class {self.name}: unknown pattern kind {self.kind!r}")

    def window_samples(self, length: int) -> tuple[int, int]:
        return int(round(self.window[0] * length)), int(round(self.window[1] * length))

    def gains(self) -> list[float]:
        return list(self.lead_gains) if self.lead_gains is not None else [1.0] * len(self.leads)


def default_pattern_table(lead0_gain: float = 0.5) -> list[ClassPattern]:
    """Six classes; four show an attenuated copy in lead 0, two never touch it."""
    g = lead0_gain
    return [
        ClassPattern("LAD", [0, 4, 5], (0.10, 0.20), "bump", 0.35, [g, 1.0, 1.0]),
        ClassPattern("TAb", [0, 4, 10, 11], (0.30, 0.40), "shift", 0.30, [g, 1.0, 1.0, 1.0]),
        ClassPattern("IAVB", [0, 1, 2, 7], (0.55, 0.65), "bump", 0.35, [g, 1.0, 1.0, 1.0]),
        ClassPattern("QAb", [0, 3, 8, 9], (0.80, 0.90), "shift", 0.30, [g, 1.0, 1.0, 1.0]),
        ClassPattern("PVC", [6, 7], (0.20, 0.30), "bump", 0.40),
        ClassPattern("STE", [1, 2, 5], (0.65, 0.75), "shift", 0.35),
    ]


@dataclass
class SynthConfig:
    n_records: int = 1000
    n_classes: int = 6
    length: int = 512
    fs: float = 100.0
    class_prevalence: list[float] = field(default_factory=lambda: [0.3] * 6)
    pattern_table: list[ClassPattern] = field(default_factory=default_pattern_table)
    heart_rate_range: tuple[float, float] = (55.0, 100.0)
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.pattern_table = [p if isinstance(p, ClassPattern) else ClassPattern(**p) for p in self.pattern_table]
        self.heart_rate_range = tuple(self.heart_rate_range)
        self.validate()

    def validate(self) -> None:
        if self.n_records < 0 or self.n_classes <= 0 or self.length <= 0:
            raise ValueError("n_records must be >= 0; n_classes and length positive")
        if self.fs <= 2 * 47:
            raise ValueError("fs must exceed 94 Hz")
        if len(self.class_prevalence) != self.n_classes or len(self.pattern_table) != self.n_classes:
            raise ValueError("class_prevalence and pattern_table need one entry per class")
        if any(not 0 < p < 1 for p in self.class_prevalence):
            raise ValueError("class prevalences must lie in (0, 1)")
        if not any(0 not in p.leads for p in self.pattern_table):
            raise ValueError("at least one class must leave lead 0 untouched")
        lo, hi = self.heart_rate_range
        if not 0 < lo <= hi:
            raise ValueError("invalid heart_rate_range")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @property
    def class_names(self) -> list[str]:
        return [p.name for p in self.pattern_table]

    def lead0_invisible(self) -> list[int]:
        return [k for k, p in enumerate(self.pattern_table) if 0 not in p.leads]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SynthConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "SynthConfig":
        path = Path(path)
        if path.suffix == ".toml":
            from .config import tomllib

            d = tomllib.loads(path.read_text())
            d = d.get("synth", d)
        else:
            d = json.loads(path.read_text())
        return cls.from_dict(d)


# Lead axes as unit vectors in (left, inferior, anterior) body coordinates.
def _lead_axes() -> np.ndarray:
    frontal = np.deg2rad([0, 60, 120, -150, -30, 90])
    limb = np.stack([np.cos(frontal), np.sin(frontal), np.zeros(6)], axis=1)
    horizontal = np.deg2rad([-115, -95, -75, -55, -30, 0])
    chest = np.stack([np.cos(horizontal), 0.15 * np.ones(6), -np.sin(horizontal)], axis=1)
    chest /= np.linalg.norm(chest, axis=1, keepdims=True)
    return np.concatenate([limb, chest], axis=0)


LEAD_AXES = _lead_axes()

# (offset from beat onset [s], width [s], dipole vector [mV]) for P, Q, R, S, T.
_WAVES = (
    (0.00, 0.025, (0.10, 0.12, 0.03)),
    (0.13, 0.010, (-0.05, -0.05, 0.10)),
    (0.16, 0.012, (0.80, 0.90, -0.40)),
    (0.19, 0.012, (-0.15, -0.25, 0.50)),
    (0.40, 0.045, (0.20, 0.25, -0.10)),
)


def _pattern_shape(kind: str, n: int) -> np.ndarray:
    if kind == "bump":
        return np.hanning(n + 2)[1:-1]
    return sps.windows.tukey(n, alpha=0.4)


def _synth_one(cfg: SynthConfig, index: int) -> SignalRecord:
    rng = np.random.default_rng([cfg.seed, index])
    L, fs = cfg.length, cfg.fs
    t = np.arange(L) / fs
    hr = rng.uniform(*cfg.heart_rate_range)
    rr = 60.0 / hr
    beats = [rng.uniform(-rr, 0.0)]
    while beats[-1] < t[-1] + rr:
        beats.append(beats[-1] + rr * (1 + 0.03 * rng.standard_normal()))
    beats = np.asarray(beats)

    # Per-record morphology jitter: scale and rotate each wave's dipole slightly.
    dipole = np.zeros((3, L))
    for offset, width, vec in _WAVES:
        v = np.asarray(vec) * rng.uniform(0.8, 1.2) + 0.05 * rng.standard_normal(3)
        w = width * rng.uniform(0.9, 1.1)
        centers = beats + offset
        wave = np.exp(-0.5 * ((t[None, :] - centers[:, None]) / w) ** 2).sum(axis=0)
        dipole += v[:, None] * wave[None, :]
    x = LEAD_AXES @ dipole
    wander = 0.1 * np.sin(2 * np.pi * rng.uniform(0.05, 0.4) * t + rng.uniform(0, 2 * np.pi))
    x += wander[None, :] * rng.uniform(0.5, 1.5, size=(N_LEADS, 1))

    labels = (rng.random(cfg.n_classes) < np.asarray(cfg.class_prevalence)).astype(np.int8)
    for k, pattern in enumerate(cfg.pattern_table):
        if not labels[k]:
            continue
        s, e = pattern.window_samples(L)
        if e <= s:
            continue
        shape = _pattern_shape(pattern.kind, e - s) * pattern.amplitude * rng.uniform(0.8, 1.2)
        for lead, gain in zip(pattern.leads, pattern.gains()):
            x[lead, s:e] += gain * shape
    x += cfg.noise_std * rng.standard_normal(x.shape)
    return SignalRecord(f"syn{cfg.seed:04d}-{index:06d}", x, fs, labels, True)


def synth_generate(cfg: SynthConfig) -> list[SignalRecord]:
    """Deterministic synthetic 12-lead corpus; record ``i`` depends only on (seed, i)."""
    cfg.validate()
    return [_synth_one(cfg, i) for i in range(cfg.n_records)]


# -- on-disk format ---------------------------------------------------------------

MANIFEST = "manifest.jsonl"
CLASSES = "classes.json"
_HEADER = struct.Struct("<II")


def save_dataset(records: Sequence[SignalRecord], path, class_names: Sequence[str] | None = None) -> None:
    """Write a directory with a JSON-lines manifest and one raw float32 file per record.

    Each raw file starts with two little-endian uint32 (rows, cols). Class
    names, when given, go to ``classes.json`` next to the manifest.
    """
    root = Path(path)
    (root / "signals").mkdir(parents=True, exist_ok=True)
    if class_names is not None:
        (root / CLASSES).write_text(json.dumps(list(class_names)) + "\n")
    lines = []
    for rec in records:
        rel = f"signals/{rec.id}.f32"
        data = np.ascontiguousarray(rec.signal, dtype="<f4")
        with open(root / rel, "wb") as fh:
            fh.write(_HEADER.pack(*data.shape))
            fh.write(data.tobytes())
        entry = {
            "id": rec.id,
            "fs": rec.fs,
            "labels": None if rec.labels is None else [int(v) for v in rec.labels],
            "path": rel,
        }
        lines.append(json.dumps(entry, sort_keys=True))
    (root / MANIFEST).write_text("".join(line + "\n" for line in lines))


def load_dataset(path) -> list[SignalRecord]:
    root = Path(path)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    records = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            rid, fs, rel = entry["id"], float(entry["fs"]), entry["path"]
            labels = entry.get("labels")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{manifest}:{lineno}: malformed manifest entry ({exc})") from exc
        raw = (root / rel).read_bytes() if (root / rel).exists() else None
        if raw is None:
            raise ValueError(f"record {rid}: missing signal file {rel}")
        if len(raw) < _HEADER.size:
            raise ValueError(f"record {rid}: truncated header in {rel}")
        rows, cols = _HEADER.unpack_from(raw)
        expected = _HEADER.size + 4 * rows * cols
        if len(raw) != expected:
            raise ValueError(f"record {rid}: signal file {rel} has {len(raw)} bytes, expected {expected}")
        sig = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, cols).astype(np.float32)
        try:
            records.append(SignalRecord(rid, sig, fs, None if labels is None else np.asarray(labels), labels is not None))
        except ValueError as exc:
            raise ValueError(f"record {rid}: {exc}") from exc
    return records


def load_class_names(path) -> list[str] | None:
    f = Path(path) / CLASSES
    if not f.exists():
        return None
    names = json.loads(f.read_text())
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise ValueError(f"{f}: expected a JSON list of class names")
    return names


def stack_signals(records: Sequence[SignalRecord], dtype=np.float32) -> np.ndarray:
    if not records:
        return np.zeros((0, N_LEADS, 0), dtype=dtype)
    return np.stack([r.signal for r in records]).astype(dtype)


def stack_labels(records: Sequence[SignalRecord]) -> np.ndarray:
    return np.stack([r.labels for r in records]).astype(np.float32)
