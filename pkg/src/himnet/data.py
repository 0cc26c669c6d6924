"""Dataset ingestion, time indexing, normalization, windowing and synthetic data.

Missing observations follow the benchmark convention and are stored as 0.0.
Day-of-week indices use Monday=0.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError

MAGIC = b"STDS"
DTYPE_FLOAT32 = 0
DAYS_PER_WEEK = 7


@dataclass
class RawDataset:
    values: np.ndarray  # [steps, nodes]
    start_time: datetime
    step_minutes: int = 5
    name: str = "dataset"
    # Set for generated data; lets callers regenerate the noiseless signal.
    synthetic: Optional["SyntheticParams"] = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise DataError(f"values must be a non-empty [steps x nodes] matrix, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            bad = np.argwhere(~np.isfinite(self.values))[0]
            raise DataError(f"non-finite value at row {bad[0]}, column {bad[1]}")
        if self.step_minutes <= 0 or 1440 % self.step_minutes:
            raise ConfigError(f"step_minutes={self.step_minutes} must be positive and divide 1440")

    @property
    def num_steps(self) -> int:
        return self.values.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def steps_per_day(self) -> int:
        return 1440 // self.step_minutes

    def timestamps(self) -> list[datetime]:
        step = timedelta(minutes=self.step_minutes)
        return [self.start_time + i * step for i in range(self.num_steps)]


@dataclass(frozen=True)
class TimeIndices:
    tod: np.ndarray
    dow: np.ndarray
    steps_per_day: int


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise DataError(f"std must be positive, got {self.std}")


@dataclass(frozen=True)
class WindowedSample:
    x: np.ndarray  # [T, N], normalized history
    y: np.ndarray  # [T', N], raw targets
    tod_idx: int
    dow_idx: int


# --------------------------------------------------------------------------
# File formats


def _parse_time(text: str) -> datetime:
    return datetime.fromisoformat(text.strip())


def read_sidecar(path: Path) -> dict[str, str]:
    meta = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta


def sidecar_path(path: Path) -> Path:
    return path.with_suffix(".meta")


def oracle_path(path: Path) -> Path:
    return path.with_suffix(".oracle.json")


def write_matrix(path: str | Path, values: np.ndarray) -> None:
    """Write a 2-D matrix in the STDS binary layout (header + row-major float32)."""
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise DataError(f"matrix-binary holds 2-D data, got shape {values.shape}")
    rows, cols = values.shape
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<III", rows, cols, DTYPE_FLOAT32))
        f.write(values.tobytes())


def read_matrix(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise DataError(f"{path}: missing STDS header")
    rows, cols, code = struct.unpack("<III", raw[4:16])
    if code != DTYPE_FLOAT32:
        raise DataError(f"{path}: unsupported dtype code {code}")
    expected = 16 + 4 * rows * cols
    if len(raw) != expected:
        raise DataError(
            f"{path}: header declares {rows}x{cols} values ({expected} bytes) but file has {len(raw)} bytes"
        )
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(rows, cols).copy()


def save_dataset(ds: RawDataset, path: str | Path) -> list[Path]:
    """Write ``ds`` as matrix-binary plus sidecar (and oracle file for synthetic data)."""
    path = Path(path)
    write_matrix(path, ds.values)
    meta = sidecar_path(path)
    meta.write_text(
        f"start_time = {ds.start_time.isoformat()}\n"
        f"step_minutes = {ds.step_minutes}\n"
        f"name = {ds.name}\n"
    )
    written = [path, meta]
    if ds.synthetic is not None:
        oracle = oracle_path(path)
        oracle.write_text(ds.synthetic.to_json())
        written.append(oracle)
    return written


def _load_binary(path: Path) -> RawDataset:
    values = read_matrix(path)
    meta_file = sidecar_path(path)
    if not meta_file.exists():
        raise DataError(f"{path}: sidecar metadata {meta_file.name} not found")
    meta = read_sidecar(meta_file)
    for key in ("start_time", "step_minutes"):
        if key not in meta:
            raise DataError(f"{meta_file}: missing field {key!r}")
    try:
        start = _parse_time(meta["start_time"])
        step = int(meta["step_minutes"])
    except ValueError as exc:
        raise DataError(f"{meta_file}: {exc}") from None
    synthetic = None
    if oracle_path(path).exists():
        synthetic = SyntheticParams.from_json(oracle_path(path).read_text())
    return RawDataset(values, start, step, meta.get("name", path.stem), synthetic)


def _load_csv(path: Path) -> RawDataset:
    times, rows = [], []
    width = None
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), 1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                stamp = _parse_time(row[0])
            except ValueError:
                if lineno == 1 and not times:
                    continue  # header
                raise DataError(f"{path}: row {lineno}, column 1: bad timestamp {row[0]!r}") from None
            cells = row[1:]
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise DataError(f"{path}: row {lineno} has {len(cells)} readings, expected {width}")
            parsed = []
            for col, cell in enumerate(cells, 2):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: row {lineno}, column {col}: non-numeric value {cell!r}") from None
            times.append(stamp)
            rows.append(parsed)
    if not rows or not width:
        raise DataError(f"{path}: no data rows")
    step = 5
    if len(times) > 1:
        delta = times[1] - times[0]
        step = int(delta.total_seconds() // 60)
        for i in range(1, len(times)):
            if times[i] - times[i - 1] != delta:
                raise DataError(f"{path}: irregular timestamp spacing at data row {i + 1}")
    return RawDataset(np.asarray(rows, dtype=np.float64), times[0], step, path.stem)


def load_dataset(path: str | Path, format: Optional[str] = None) -> RawDataset:
    """Load a dataset; ``format`` is ``"matrix-binary"`` or ``"csv"`` (inferred from suffix if omitted)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "matrix-binary"
    if format == "csv":
        return _load_csv(path)
    if format == "matrix-binary":
        return _load_binary(path)
    raise ConfigError(f"unknown dataset format {format!r}")


# --------------------------------------------------------------------------
# Time indices and normalization


def compute_time_indices(ds: RawDataset) -> TimeIndices:
    if 1440 % ds.step_minutes:
        raise ConfigError(f"step_minutes={ds.step_minutes} does not divide a day")
    per_day = 1440 // ds.step_minutes
    minutes = ds.start_time.hour * 60 + ds.start_time.minute
    tod0 = minutes // ds.step_minutes
    steps = tod0 + np.arange(ds.num_steps)
    tod = steps % per_day
    dow = (ds.start_time.weekday() + steps // per_day) % DAYS_PER_WEEK
    return TimeIndices(tod.astype(np.int64), dow.astype(np.int64), per_day)


def zscore_fit(train_values) -> NormStats:
    values = np.asarray(train_values, dtype=np.float64).ravel()
    if values.size < 2:
        raise DataError("need at least 2 values to fit normalization statistics")
    std = float(values.std())
    if std == 0.0:
        raise DataError("training data is constant; cannot normalize")
    return NormStats(float(values.mean()), std)


def zscore_apply(x, stats: NormStats):
    return (x - stats.mean) / stats.std


def zscore_invert(z, stats: NormStats):
    return z * stats.std + stats.mean


# --------------------------------------------------------------------------
# Windows and splits


class WindowSet:
    """Sliding windows over a dataset, materialized lazily by index.

    Sample ``i`` covers history rows ``[i, i+T)`` and target rows
    ``[i+T, i+T+T')``; its time indices are those of row ``i+T-1``.
    """

    def __init__(self, normalized: np.ndarray, raw: np.ndarray, tod: np.ndarray, dow: np.ndarray,
                 T: int, T_out: int, starts: np.ndarray):
        self.normalized = normalized
        self.raw = raw
        self.tod = tod
        self.dow = dow
        self.T = T
        self.T_out = T_out
        self.starts = starts

    def __len__(self) -> int:
        return len(self.starts)

    def __getitem__(self, i: int) -> WindowedSample:
        s = int(self.starts[i])
        last = s + self.T - 1
        return WindowedSample(
            self.normalized[s:s + self.T],
            self.raw[s + self.T:s + self.T + self.T_out],
            int(self.tod[last]),
            int(self.dow[last]),
        )

    def subset(self, start: int, stop: int) -> "WindowSet":
        return WindowSet(self.normalized, self.raw, self.tod, self.dow, self.T, self.T_out,
                         self.starts[start:stop])

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Return (x [B,T,N], y [B,T',N], tod [B], dow [B]) for positions ``idx``."""
        s = self.starts[np.asarray(idx)]
        hist = s[:, None] + np.arange(self.T)
        fut = s[:, None] + self.T + np.arange(self.T_out)
        last = s + self.T - 1
        return self.normalized[hist], self.raw[fut], self.tod[last], self.dow[last]


@dataclass
class DataSplit:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    stats: NormStats = field(default=None)


def num_windows(num_steps: int, T: int, T_out: int) -> int:
    return num_steps - T - T_out + 1


def make_windows(ds: RawDataset, indices: TimeIndices, stats: NormStats, T: int, T_out: int) -> WindowSet:
    if T < 1 or T_out < 1:
        raise ConfigError(f"window lengths must be positive, got T={T}, T'={T_out}")
    if ds.num_steps < T + T_out:
        raise DataError(f"dataset has {ds.num_steps} steps; need at least T+T'={T + T_out}")
    raw = ds.values.astype(np.float32)
    norm = zscore_apply(ds.values, stats).astype(np.float32)
    starts = np.arange(num_windows(ds.num_steps, T, T_out))
    return WindowSet(norm, raw, indices.tod, indices.dow, T, T_out, starts)


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {tuple(ratios)}")
    n_train = int(math.floor(n * ratios[0] + 1e-9))
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise ConfigError(f"split of {n} samples with ratios {tuple(ratios)} leaves an empty partition "
                          f"({n_train}/{n_val}/{n_test})")
    return n_train, n_val, n_test


def split_dataset(samples: WindowSet, ratios: Sequence[float]) -> DataSplit:
    n_train, n_val, _ = split_sizes(len(samples), ratios)
    return DataSplit(
        samples.subset(0, n_train),
        samples.subset(n_train, n_train + n_val),
        samples.subset(n_train + n_val, len(samples)),
    )


def prepare(ds: RawDataset, T: int, T_out: int, ratios: Sequence[float],
            stats: Optional[NormStats] = None) -> DataSplit:
    """Window, split and normalize ``ds`` with statistics from training history rows only."""
    n = num_windows(ds.num_steps, T, T_out)
    if n < 1:
        raise DataError(f"dataset has {ds.num_steps} steps; need at least T+T'={T + T_out}")
    n_train, _, _ = split_sizes(n, ratios)
    if stats is None:
        stats = zscore_fit(ds.values[:n_train + T - 1])
    windows = make_windows(ds, compute_time_indices(ds), stats, T, T_out)
    split = split_dataset(windows, ratios)
    split.stats = stats
    return split


# --------------------------------------------------------------------------
# Synthetic planted-heterogeneity data


@dataclass
class SyntheticParams:
    """Everything needed to regenerate a synthetic dataset's noiseless signal.

    ``table[c, r, w]`` is the (amplitude, phase, offset) of spatial cluster
    ``c`` during intra-day regime ``r`` on day type ``w`` (0 weekday,
    1 weekend).
    """
    n_nodes: int
    n_days: int
    n_spatial_clusters: int
    n_regimes: int
    noise_std: float
    seed: int
    step_minutes: int
    start_time: str
    cycles_per_day: float
    table: list

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SyntheticParams":
        return cls(**json.loads(text))

    def noiseless(self) -> np.ndarray:
        table = np.asarray(self.table, dtype=np.float64)
        per_day = 1440 // self.step_minutes
        start = _parse_time(self.start_time)
        tod0 = (start.hour * 60 + start.minute) // self.step_minutes
        steps = tod0 + np.arange(self.n_days * per_day)
        tod = steps % per_day
        dow = (start.weekday() + steps // per_day) % DAYS_PER_WEEK
        regime = tod * self.n_regimes // per_day
        weekend = (dow >= 5).astype(np.int64)
        cluster = np.arange(self.n_nodes) % self.n_spatial_clusters
        coef = table[cluster[None, :], regime[:, None], weekend[:, None]]  # [steps, nodes, 3]
        day_frac = tod / per_day
        angle = 2 * np.pi * self.cycles_per_day * day_frac
        return coef[..., 2] + coef[..., 0] * np.sin(angle[:, None] + coef[..., 1])


def synthetic_generate(n_nodes: int, n_days: int, n_spatial_clusters: int, n_regimes: int,
                       noise_std: float, seed: int, step_minutes: int = 5,
                       start_time: datetime = datetime(2024, 1, 1), cycles_per_day: float = 4.0) -> RawDataset:
    """Generate a dataset with planted spatial-cluster and temporal-regime structure.

    Node ``i`` belongs to cluster ``i % n_spatial_clusters``. Every day is cut
    into ``n_regimes`` equal regimes, and each (cluster, regime, weekday/weekend)
    triple gets its own sinusoid. Gaussian noise is added on top.
    """
    if n_spatial_clusters < 2 or n_nodes < n_spatial_clusters:
        raise ConfigError(f"need n_nodes >= n_spatial_clusters >= 2, got {n_nodes}, {n_spatial_clusters}")
    if not 2 <= n_regimes <= 4:
        raise ConfigError(f"n_regimes must be in 2..4, got {n_regimes}")
    if n_days < 1:
        raise ConfigError(f"n_days must be positive, got {n_days}")
    if noise_std < 0:
        raise ConfigError(f"noise_std must be non-negative, got {noise_std}")
    if step_minutes <= 0 or 1440 % step_minutes:
        raise ConfigError(f"step_minutes={step_minutes} must divide 1440")
    rng = np.random.default_rng(seed)
    shape = (n_spatial_clusters, n_regimes, 2)
    amp = rng.uniform(0.5, 2.5, shape)
    phase = rng.uniform(0.0, 2 * np.pi, shape)
    offset = rng.uniform(3.0, 8.0, shape)
    table = np.stack([amp, phase, offset], axis=-1)
    params = SyntheticParams(
        n_nodes=n_nodes, n_days=n_days, n_spatial_clusters=n_spatial_clusters, n_regimes=n_regimes,
        noise_std=float(noise_std), seed=seed, step_minutes=step_minutes,
        start_time=start_time.isoformat(), cycles_per_day=float(cycles_per_day), table=table.tolist(),
    )
    clean = params.noiseless()
    values = clean + noise_std * rng.standard_normal(clean.shape) if noise_std > 0 else clean.copy()
    return RawDataset(values, start_time, step_minutes, f"synthetic-{seed}", params)
