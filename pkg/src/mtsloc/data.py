"""Dataset generation, ingestion, normalization and windowing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, IngestionError

ANOMALY_KINDS = ("additive_sine", "constant_outlier", "additive_offset")


@dataclass(frozen=True)
class SeriesMatrix:
    """A multivariate series: rows are time steps, columns are series."""

    values: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"values must be a non-empty 2-D matrix, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("values contain NaN or Inf")
        names = tuple(str(n) for n in self.names)
        if len(names) != values.shape[1]:
            raise ValueError(f"expected {values.shape[1]} names, got {len(names)}")
        if len(set(names)) != len(names):
            raise ValueError("series names must be unique")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", names)

    @classmethod
    def from_array(cls, values, names: Sequence[str] | None = None) -> "SeriesMatrix":
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if names is None:
            names = [f"s{i}" for i in range(values.shape[1])]
        return cls(values, tuple(names))

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "SeriesMatrix":
        return SeriesMatrix(self.values[start:stop], self.names)


@dataclass(frozen=True)
class AnomalySpec:
    """An anomaly on one series over the inclusive interval [t1, t2].

    ``params`` depends on ``kind``:

    * additive_sine: ``frequency`` and ``amplitude`` of A(t) = amplitude * sin(2*pi*frequency*t)
    * constant_outlier: ``value`` replacing the interval
    * additive_offset: ``offset`` added on the interval

    Missing WVS parameters are filled from the target series' group frequency
    and amplitude (see :func:`generate_wvs`).
    """

    target_series: int
    t1: int
    t2: int
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise ConfigError(f"unknown anomaly kind {self.kind!r}; expected one of {ANOMALY_KINDS}")
        if self.t1 < 0 or self.t2 < self.t1:
            raise ConfigError(f"invalid anomaly interval [{self.t1}, {self.t2}]")
        if self.target_series < 0:
            raise ConfigError(f"negative target series {self.target_series}")

    def to_text(self) -> str:
        params = ":".join(f"{k}={_fmt(v)}" for k, v in sorted(self.params.items()))
        base = f"{self.target_series}:{self.t1}:{self.t2}:{self.kind}"
        return f"{base}:{params}" if params else base

    @classmethod
    def from_text(cls, text: str) -> "AnomalySpec":
        parts = [p.strip() for p in text.strip().split(":")]
        if len(parts) < 4:
            raise ConfigError(f"anomaly spec {text!r} must be series:t1:t2:kind[:key=value...]")
        params = {}
        for item in parts[4:]:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"anomaly parameter {item!r} is not key=value")
            params[key.strip()] = float(value)
        try:
            return cls(int(parts[0]), int(parts[1]), int(parts[2]), parts[3], params)
        except ValueError as exc:
            raise ConfigError(f"bad anomaly spec {text!r}: {exc}") from None


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


@dataclass
class WvsConfig:
    n_series: int = 10
    frequencies: tuple[float, ...] = (1e-5, 1e-4, 1e-3, 1e-2)
    group_sizes: tuple[int, ...] = (1, 3, 3, 3)
    amplitude_range: tuple[float, float] = (2.0, 3.0)
    phase_range: tuple[float, float] = (0.0, math.pi / 2)
    noise_std: float = 1.0
    length: int = 20000
    train_fraction: float = 0.5
    anomaly_specs: tuple[AnomalySpec, ...] = ()
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if len(self.group_sizes) != len(self.frequencies):
            problems.append("group_sizes and frequencies differ in length")
        if sum(self.group_sizes) != self.n_series:
            problems.append(f"group sizes sum to {sum(self.group_sizes)}, expected n_series={self.n_series}")
        for name in ("amplitude_range", "phase_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                problems.append(f"{name} is empty: [{lo}, {hi}]")
        if self.noise_std < 0:
            problems.append("noise_std must be non-negative")
        if not 0 < self.train_fraction < 1:
            problems.append("train_fraction must lie in (0, 1)")
        if self.length < 2:
            problems.append("length must be at least 2")
        test_length = self.length - int(round(self.length * self.train_fraction))
        for spec in self.anomaly_specs:
            if spec.target_series >= self.n_series:
                problems.append(f"anomaly targets series {spec.target_series} >= n_series")
            if spec.t2 >= test_length:
                problems.append(f"anomaly interval end {spec.t2} beyond test length {test_length}")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def train_length(self) -> int:
        return int(round(self.length * self.train_fraction))

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "anomaly_specs":
                text = "; ".join(s.to_text() for s in value)
            elif isinstance(value, (tuple, list)):
                text = ",".join(_fmt(v) for v in value)
            else:
                text = _fmt(value)
            lines.append(f"{f.name}={text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "WvsConfig":
        kwargs = {}
        known = {f.name for f in fields(cls)}
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown WVS key {key!r}")
            raw = raw.strip()
            try:
                if key == "anomaly_specs":
                    kwargs[key] = tuple(AnomalySpec.from_text(s) for s in raw.split(";") if s.strip())
                elif key in ("frequencies", "amplitude_range", "phase_range"):
                    kwargs[key] = tuple(float(v) for v in raw.split(",") if v.strip())
                elif key == "group_sizes":
                    kwargs[key] = tuple(int(v) for v in raw.split(",") if v.strip())
                elif key in ("n_series", "length", "seed"):
                    kwargs[key] = int(raw)
                else:
                    kwargs[key] = float(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "WvsConfig":
        mapping = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected key=value")
            mapping[key.strip()] = value
        return cls.from_mapping(mapping)


@dataclass
class LabeledDataset:
    train: SeriesMatrix
    test: SeriesMatrix
    point_labels: np.ndarray
    dim_labels: np.ndarray
    segments: list[tuple[int, int, tuple[int, ...]]]
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_labels(cls, train, test, dim_labels, meta=None) -> "LabeledDataset":
        dim_labels = np.asarray(dim_labels, dtype=np.int8)
        if dim_labels.shape != test.values.shape:
            raise ValueError(f"label shape {dim_labels.shape} does not match test shape {test.values.shape}")
        point = dim_labels.any(axis=1).astype(np.int8)
        return cls(train, test, point, dim_labels, label_segments(dim_labels), meta or {})


def runs(flags) -> list[tuple[int, int]]:
    """Maximal runs of nonzero entries as inclusive (start, end) pairs."""
    flags = np.asarray(flags).astype(bool).astype(np.int8)
    if flags.size == 0:
        return []
    padded = np.concatenate(([0], flags, [0]))
    edges = np.flatnonzero(np.diff(padded))
    return [(int(s), int(e) - 1) for s, e in zip(edges[::2], edges[1::2])]


def label_segments(dim_labels: np.ndarray) -> list[tuple[int, int, tuple[int, ...]]]:
    """Anomalous segments with the union of their ground-truth dimensions."""
    out = []
    for s, e in runs(dim_labels.any(axis=1)):
        dims = tuple(int(i) for i in np.flatnonzero(dim_labels[s : e + 1].any(axis=0)))
        out.append((s, e, dims))
    return out


def inject_anomalies(x: SeriesMatrix, specs: Sequence[AnomalySpec]) -> tuple[SeriesMatrix, np.ndarray]:
    """Apply anomaly specs to ``x``; returns the new matrix and its 0/1 label matrix.

    Additive kinds add A(t) on the interval; ``constant_outlier`` replaces it.
    ``t`` in A(t) is the absolute row index of ``x``.
    """
    values = x.values.copy()
    labels = np.zeros(values.shape, dtype=np.int8)
    for spec in specs:
        if spec.target_series >= x.d or spec.t2 >= x.length:
            raise ConfigError(f"anomaly {spec.to_text()} outside matrix of shape {values.shape}")
        cells = labels[spec.t1 : spec.t2 + 1, spec.target_series]
        if cells.any():
            raise ConfigError(f"anomaly {spec.to_text()} overlaps an earlier spec")
        cells[:] = 1
        t = np.arange(spec.t1, spec.t2 + 1, dtype=float)
        col = spec.target_series
        p = spec.params
        try:
            if spec.kind == "additive_sine":
                values[spec.t1 : spec.t2 + 1, col] += p.get("amplitude", 1.0) * np.sin(2 * np.pi * p["frequency"] * t)
            elif spec.kind == "additive_offset":
                values[spec.t1 : spec.t2 + 1, col] += p["offset"]
            else:
                values[spec.t1 : spec.t2 + 1, col] = p["value"]
        except KeyError as exc:
            raise ConfigError(f"anomaly {spec.to_text()} is missing parameter {exc}") from None
    return SeriesMatrix(values, x.names), labels


def _resolve_wvs_spec(spec: AnomalySpec, freq: float, amp: float) -> AnomalySpec:
    params = dict(spec.params)
    if spec.kind == "additive_sine":
        params.setdefault("frequency", 10.0 * freq)
        params.setdefault("amplitude", amp)
    elif spec.kind == "constant_outlier":
        params.setdefault("value", 3.0 * amp)
    elif "offset" not in params:
        params["offset"] = 3.0 * amp
    return AnomalySpec(spec.target_series, spec.t1, spec.t2, spec.kind, params)


def generate_wvs(config: WvsConfig) -> LabeledDataset:
    """Generate the waves dataset: grouped noisy sinusoids with anomalies in the test part.

    Each series draws its amplitude and phase once and its noise from an
    independent stream spawned from ``config.seed``.
    """
    config.validate()
    root = np.random.SeedSequence(config.seed)
    streams = [np.random.default_rng(s) for s in root.spawn(config.n_series)]
    group_freq = np.repeat(np.asarray(config.frequencies, dtype=float), config.group_sizes)
    t = np.arange(config.length, dtype=float)
    values = np.empty((config.length, config.n_series))
    amps = np.empty(config.n_series)
    phases = np.empty(config.n_series)
    for i, rng in enumerate(streams):
        amps[i] = rng.uniform(*config.amplitude_range)
        phases[i] = rng.uniform(*config.phase_range)
        noise = rng.normal(0.0, 1.0, config.length) * config.noise_std
        values[:, i] = amps[i] * np.sin(2 * np.pi * group_freq[i] * t + phases[i]) + noise

    names = [f"wave{i}" for i in range(config.n_series)]
    n_train = config.train_length
    train = SeriesMatrix(values[:n_train], names)
    test = SeriesMatrix(values[n_train:], names)
    specs = [_resolve_wvs_spec(s, group_freq[s.target_series], amps[s.target_series]) for s in config.anomaly_specs]
    test, labels = inject_anomalies(test, specs)
    meta = {
        "amplitudes": amps.tolist(),
        "phases": phases.tolist(),
        "frequencies": group_freq.tolist(),
        "resolved_anomalies": [s.to_text() for s in specs],
    }
    return LabeledDataset.from_labels(train, test, labels, meta)


def load_series_csv(path, has_header: bool = False) -> SeriesMatrix:
    """Read a rectangular numeric CSV, one row per time step."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise IngestionError(f"{path}: empty file")
    names = None
    if has_header:
        names = [c.strip() for c in rows[0]]
        rows = rows[1:]
        if not rows:
            raise IngestionError(f"{path}: header but no data rows")
    width = len(names) if names else len(rows[0])
    data = np.empty((len(rows), width))
    offset = 2 if has_header else 1
    for r, row in enumerate(rows):
        if len(row) != width:
            raise IngestionError(f"{path}: row {r + offset} has {len(row)} columns, expected {width}")
        for c, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise IngestionError(f"{path}: non-numeric value {cell!r} at row {r + offset}, column {c + 1}") from None
            if not math.isfinite(v):
                raise IngestionError(f"{path}: non-finite value at row {r + offset}, column {c + 1}")
            data[r, c] = v
    try:
        return SeriesMatrix.from_array(data, names)
    except ValueError as exc:
        raise IngestionError(f"{path}: {exc}") from None


def load_labels_csv(path, shape: tuple[int, int], has_header: bool = False) -> np.ndarray:
    """Read a 0/1 label file: a full T x d matrix or a single column of point labels.

    Point labels are broadcast to every dimension.
    """
    m = load_series_csv(path, has_header).values
    if not np.isin(m, (0.0, 1.0)).all():
        raise IngestionError(f"{path}: labels must be 0 or 1")
    if m.shape[0] != shape[0]:
        raise IngestionError(f"{path}: {m.shape[0]} label rows for {shape[0]} data rows")
    if m.shape[1] == 1 and shape[1] != 1:
        m = np.repeat(m, shape[1], axis=1)
    elif m.shape[1] != shape[1]:
        raise IngestionError(f"{path}: {m.shape[1]} label columns for {shape[1]} series")
    return m.astype(np.int8)


def write_series_csv(path, x: SeriesMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(x.names)
        w.writerows(x.values.tolist())


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    centered_only: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "centered_only": self.centered_only.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]), np.asarray(d["centered_only"], dtype=bool))


STD_FLOOR = 1e-12


def zscore_normalize(x: SeriesMatrix, stats_source: SeriesMatrix | NormStats) -> tuple[SeriesMatrix, NormStats]:
    """Per-series z-score using statistics of ``stats_source`` (population std)."""
    if isinstance(stats_source, NormStats):
        stats = stats_source
    else:
        mean = stats_source.values.mean(axis=0)
        std = stats_source.values.std(axis=0)
        flat = std < STD_FLOOR
        stats = NormStats(mean, np.where(flat, 1.0, std), flat)
    if stats.mean.shape[0] != x.d:
        raise ValueError(f"dimension mismatch: data has {x.d} series, statistics have {stats.mean.shape[0]}")
    return SeriesMatrix((x.values - stats.mean) / stats.std, x.names), stats


def denormalize(x: SeriesMatrix, stats: NormStats) -> SeriesMatrix:
    return SeriesMatrix(x.values * stats.std + stats.mean, x.names)


def window_split(x: SeriesMatrix | np.ndarray, T: int) -> np.ndarray:
    """Non-overlapping windows of length T, shape (n_windows, T, d); the remainder is dropped."""
    values = x.values if isinstance(x, SeriesMatrix) else np.asarray(x, dtype=float)
    if T < 1:
        raise ValueError("window length must be at least 1")
    if T > values.shape[0]:
        raise ValueError(f"window length {T} exceeds series length {values.shape[0]}")
    n = values.shape[0] // T
    return values[: n * T].reshape(n, T, values.shape[1])
