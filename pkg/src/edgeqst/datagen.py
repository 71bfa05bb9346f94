"""Synthetic homodyne data for squeezed thermal states and the .qds dataset format.

Randomness: every example gets its own 64-bit seed ``mix64(global_seed, index)``
(splitmix64 finalizer) which keys a Philox4x64 counter-based generator.  Labels
are drawn first, then quadratures by Box-Muller over the same stream, so any
single example can be regenerated without touching the others.

.qds layout (little-endian)::

    magic  b"QSTD"
    u32    version (1)
    u32    n_examples
    u32    seq_len
    u8     schedule_id
    u8     label_count (3)
    2 x u8 reserved (0)
    then per example: 3 x f64 (r, theta, nbar), seq_len x f32 quadratures
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from edgeqst.gaussian import DbLevels, StateParams, params_from_db, quadrature_variance

MAGIC = b"QSTD"
VERSION = 1
HEADER = struct.Struct("<4sIIIBB2x")
LABELS = struct.Struct("<3d")
MAX_ABS_VALUE = 50.0
SEQ_LEN = 2048

_MASK64 = (1 << 64) - 1


class DatasetFormatError(ValueError):
    pass


def mix64(seed: int, index: int) -> int:
    """splitmix64 avalanche of ``seed + (index + 1) * golden_gamma``."""
    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _stream(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed & _MASK64))


def box_muller(rng: np.random.Generator, n: int) -> np.ndarray:
    """n standard normals from 2*ceil(n/2) uniforms; u1 is taken in (0, 1]."""
    m = (n + 1) // 2
    u = rng.random(2 * m)
    u1 = 1.0 - u[:m]
    u2 = u[m:]
    rad = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * math.pi * u2
    z = np.empty(2 * m)
    z[0::2] = rad * np.cos(ang)
    z[1::2] = rad * np.sin(ang)
    return z[:n]


def phase_schedule(schedule_id: int, seq_len: int = SEQ_LEN, seed: int = 0) -> np.ndarray:
    """LO phases for a sequence: 0 is a linear sweep over [0, pi), 1 is i.i.d. uniform."""
    if schedule_id == 0:
        return math.pi * np.arange(seq_len) / seq_len
    if schedule_id == 1:
        return math.pi * _stream(mix64(seed, 0xFFFF_FFFF)).random(seq_len)
    raise ValueError(f"unknown schedule_id {schedule_id}")


@dataclass(frozen=True)
class GenConfig:
    n_examples: int = 20_000
    seq_len: int = SEQ_LEN
    squeezing_db: tuple[float, float] = (0.0, 10.0)
    excess_db: tuple[float, float] = (0.0, 3.0)
    theta: tuple[float, float] = (0.0, math.pi)
    global_seed: int = 0
    schedule_id: int = 0

    def __post_init__(self):
        if self.n_examples < 0 or self.seq_len < 1:
            raise ValueError("n_examples must be >= 0 and seq_len >= 1")
        lo, hi = self.squeezing_db
        if not 0 <= lo <= hi <= 10:
            raise ValueError(f"squeezing_db range {self.squeezing_db} outside [0, 10]")
        lo, hi = self.excess_db
        if not 0 <= lo <= hi <= 3:
            raise ValueError(f"excess_db range {self.excess_db} outside [0, 3]")
        lo, hi = self.theta
        if not 0 <= lo <= hi <= math.pi:
            raise ValueError(f"theta range {self.theta} outside [0, pi]")
        if self.schedule_id not in (0, 1):
            raise ValueError(f"unknown schedule_id {self.schedule_id}")


@dataclass
class Dataset:
    labels: np.ndarray  # (n, 3) float64: r, theta, nbar
    values: np.ndarray  # (n, seq_len) float32
    schedule_id: int = 0
    seq_len: int = field(init=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1, 3)
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"labels {self.labels.shape} and values {self.values.shape} disagree"
            )
        self.seq_len = self.values.shape[1]

    def __len__(self) -> int:
        return self.labels.shape[0]

    def params(self, i: int) -> StateParams:
        r, theta, nbar = self.labels[i]
        return StateParams(r, theta, nbar)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.labels[idx], self.values[idx], self.schedule_id)


def sample_sequence(p: StateParams, cfg: GenConfig, example_seed: int,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Quadrature record x_k ~ N(0, V(phi_k)) as float32."""
    if rng is None:
        rng = _stream(example_seed)
    phases = phase_schedule(cfg.schedule_id, cfg.seq_len, example_seed)
    std = np.sqrt(quadrature_variance(p, phases))
    x = std * box_muller(rng, cfg.seq_len)
    bad = np.abs(x) > MAX_ABS_VALUE
    while np.any(bad):
        x[bad] = std[bad] * box_muller(rng, int(bad.sum()))
        bad = np.abs(x) > MAX_ABS_VALUE
    return x.astype(np.float32)


def sample_at_phase(p: StateParams, phi: float, n: int, seed: int) -> np.ndarray:
    """n float64 homodyne outcomes at a fixed LO phase."""
    return math.sqrt(quadrature_variance(p, phi)) * box_muller(_stream(seed), n)


def generate_example(cfg: GenConfig, index: int) -> tuple[StateParams, np.ndarray]:
    seed = mix64(cfg.global_seed, index)
    rng = _stream(seed)
    u = rng.random(3)
    s = cfg.squeezing_db[0] + (cfg.squeezing_db[1] - cfg.squeezing_db[0]) * u[0]
    e = cfg.excess_db[0] + (cfg.excess_db[1] - cfg.excess_db[0]) * u[1]
    theta = cfg.theta[0] + (cfg.theta[1] - cfg.theta[0]) * u[2]
    p = params_from_db(DbLevels(s, s + e), theta)
    return p, sample_sequence(p, cfg, seed, rng)


def generate_dataset(cfg: GenConfig, threads: int = 1) -> Dataset:
    """Output is in index order and independent of ``threads``."""
    idx = range(cfg.n_examples)
    if threads > 1 and cfg.n_examples > 1:
        with ThreadPoolExecutor(threads) as pool:
            items = list(pool.map(lambda i: generate_example(cfg, i), idx))
    else:
        items = [generate_example(cfg, i) for i in idx]
    labels = np.array([(p.r, p.theta, p.nbar) for p, _ in items], dtype=np.float64).reshape(-1, 3)
    if items:
        values = np.stack([v for _, v in items])
    else:
        values = np.zeros((0, cfg.seq_len), dtype=np.float32)
    return Dataset(labels, values, cfg.schedule_id)


def dataset_to_bytes(ds: Dataset) -> bytes:
    parts = [HEADER.pack(MAGIC, VERSION, len(ds), ds.seq_len, ds.schedule_id, 3)]
    vals = ds.values.astype("<f4")
    labels = ds.labels.astype("<f8")
    for i in range(len(ds)):
        parts.append(labels[i].tobytes())
        parts.append(vals[i].tobytes())
    return b"".join(parts)


def dataset_from_bytes(buf: bytes) -> Dataset:
    if len(buf) < HEADER.size:
        raise DatasetFormatError(f"truncated file: {len(buf)} bytes, header needs {HEADER.size}")
    magic, version, n, seq_len, schedule_id, label_count = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    if label_count != 3:
        raise DatasetFormatError(f"unsupported label_count {label_count}")
    rec = np.dtype([("labels", "<f8", (3,)), ("values", "<f4", (seq_len,))])
    need = HEADER.size + n * rec.itemsize
    if len(buf) < need:
        raise DatasetFormatError(f"truncated file: {len(buf)} bytes, expected {need}")
    if len(buf) > need:
        raise DatasetFormatError(f"trailing data: {len(buf) - need} extra bytes")
    arr = np.frombuffer(buf, dtype=rec, count=n, offset=HEADER.size)
    values = arr["values"].astype(np.float32).reshape(n, seq_len)
    if not np.all(np.isfinite(values)) or np.any(np.abs(values) > MAX_ABS_VALUE):
        raise DatasetFormatError("quadrature values out of range")
    return Dataset(arr["labels"].astype(np.float64).reshape(n, 3), values, schedule_id)


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def read_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
