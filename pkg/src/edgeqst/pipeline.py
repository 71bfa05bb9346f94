"""End-to-end tomography: engines, reconstruction bundles and fidelity sweeps."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from edgeqst import fock
from edgeqst.gaussian import (
    StateParams,
    db_from_params,
    gaussian_fidelity,
    photon_decomposition,
    wigner_gaussian,
)
from edgeqst.nn import Model, decode_head, forward, normalize_input
from edgeqst.quant import QuantizedModel, qforward_head

log = logging.getLogger(__name__)

MAX_SQUEEZING_DB = 10.0
MAX_NBAR = 1.0


class RegimeWarning(UserWarning):
    """Parameters outside the range where the truncated Fock numerics are certified."""


# ---------------------------------------------------------------- engines


class Engine:
    """Maps quadrature sequences to StateParams.  Subclasses implement ``_head``."""

    tag = "base"
    input_len: int

    def _head(self, seqs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict(self, seqs, batch: int = 256) -> list[StateParams]:
        seqs = np.asarray(seqs)
        if seqs.ndim == 1:
            seqs = seqs[None, :]
        if seqs.shape[-1] != self.input_len:
            raise ValueError(f"sequence length {seqs.shape[-1]} != engine input {self.input_len}")
        out = []
        for i in range(0, len(seqs), batch):
            out.extend(decode_head(h) for h in self._head(seqs[i : i + batch]))
        return out

    def infer_one(self, seq) -> StateParams:
        return self.predict(seq)[0]


class FP32Engine(Engine):
    tag = "fp32"

    def __init__(self, model: Model):
        self.model = model
        self.input_len = model.input_len

    def _head(self, seqs):
        return forward(self.model, normalize_input(seqs, self.model))


class INT8Engine(Engine):
    tag = "int8"

    def __init__(self, qmodel: QuantizedModel):
        self.qmodel = qmodel
        self.input_len = qmodel.input_len

    def _head(self, seqs):
        return qforward_head(self.qmodel, seqs)


class OracleEngine(Engine):
    """Returns the ground-truth label of each known sequence."""

    tag = "oracle"

    def __init__(self, dataset):
        self.input_len = dataset.seq_len
        self._table = {
            dataset.values[i].tobytes(): dataset.params(i) for i in range(len(dataset))
        }

    def predict(self, seqs, batch: int = 256):
        seqs = np.asarray(seqs, dtype=np.float32)
        if seqs.ndim == 1:
            seqs = seqs[None, :]
        return [self._table[s.tobytes()] for s in seqs]


def estimate_params(engine: Engine, seq) -> StateParams:
    return engine.infer_one(seq)


# ---------------------------------------------------------------- reconstruction


def photon_report(p: StateParams) -> tuple[float, float, float]:
    return photon_decomposition(p)


def in_regime(p: StateParams) -> bool:
    return db_from_params(p).squeezing_db <= MAX_SQUEEZING_DB + 1e-9 and p.nbar <= MAX_NBAR


@dataclass
class ReconstructionBundle:
    params: StateParams
    photons: tuple[float, float, float]
    density: np.ndarray | None = None
    trace_deficit: float | None = None
    wigner_x: np.ndarray | None = None
    wigner_p: np.ndarray | None = None
    wigner: np.ndarray | None = None  # indexed [p, x]
    warnings: list[str] = field(default_factory=list)


def reconstruct(p: StateParams, density: bool = True, dim: int = fock.DEFAULT_DIM,
                wigner_range: float | None = None, wigner_step: float = 0.1) -> ReconstructionBundle:
    """Density matrix and/or Wigner grid for the state ``p``.

    The Wigner grid is evaluated from the Fock-basis density matrix when one
    is requested and from the Gaussian closed form otherwise.
    """
    bundle = ReconstructionBundle(p, photon_report(p))
    if not in_regime(p):
        msg = (f"parameters outside certified regime (squeezing_db <= {MAX_SQUEEZING_DB}, "
               f"nbar <= {MAX_NBAR}): {p}")
        bundle.warnings.append(msg)
        warnings.warn(RegimeWarning(msg), stacklevel=2)
    rho = None
    if density:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", fock.TruncationWarning)
            rho = fock.density_from_params(p, dim)
        bundle.warnings.extend(str(w.message) for w in caught)
        bundle.density = rho
        bundle.trace_deficit = fock.trace_deficit(rho)
    if wigner_range is not None:
        n = int(round(2 * wigner_range / wigner_step)) + 1
        xs = np.linspace(-wigner_range, wigner_range, n)
        xx, pp = np.meshgrid(xs, xs)
        if rho is not None:
            w = fock.wigner_fock(rho, xx, pp)
        else:
            w = wigner_gaussian(p, xx, pp)
        bundle.wigner_x, bundle.wigner_p, bundle.wigner = xs, xs.copy(), w
    return bundle


# ---------------------------------------------------------------- fidelity sweep


@dataclass(frozen=True)
class BinStats:
    lo_db: float
    hi_db: float
    count: int
    mean: float | None  # None for an empty bin
    std: float | None


@dataclass
class FidelityReport:
    true: list
    estimated: list
    fidelity: np.ndarray
    squeezing_db: np.ndarray
    bins: list

    @property
    def mean_fidelity(self) -> float:
        return float(np.mean(self.fidelity)) if len(self.fidelity) else float("nan")

    @property
    def std_fidelity(self) -> float:
        return float(np.std(self.fidelity)) if len(self.fidelity) else float("nan")


def bin_index(squeezing_db: np.ndarray, n_bins: int, lo: float = 0.0, hi: float = MAX_SQUEEZING_DB) -> np.ndarray:
    """Equal-width bins over [lo, hi]; values on or beyond the edges go to the edge bins."""
    width = (hi - lo) / n_bins
    idx = np.floor((np.asarray(squeezing_db) - lo) / width).astype(int)
    return np.clip(idx, 0, n_bins - 1)


def predict_parallel(engine: Engine, values, threads: int = 1, chunk: int = 256) -> list[StateParams]:
    """engine.predict over chunks on a thread pool; results stay in input order."""
    chunks = [values[i : i + chunk] for i in range(0, len(values), chunk)]
    if threads <= 1 or len(chunks) <= 1:
        parts = [engine.predict(c) for c in chunks]
    else:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(engine.predict, chunks))
    return [p for part in parts for p in part]


def evaluate_fidelity_sweep(engine: Engine, dataset, bins: int = 10, threads: int = 1) -> FidelityReport:
    """Gaussian fidelity of each estimate against its label, binned by the
    label's squeezing level into ``bins`` equal bins over [0, 10] dB."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    true = [dataset.params(i) for i in range(len(dataset))]
    est = predict_parallel(engine, dataset.values, threads)
    fid = np.array([gaussian_fidelity(t, e) for t, e in zip(true, est)], dtype=float)
    sdb = np.array([db_from_params(t).squeezing_db for t in true], dtype=float)
    idx = bin_index(sdb, bins)
    width = MAX_SQUEEZING_DB / bins
    stats = []
    for b in range(bins):
        sel = fid[idx == b]
        lo, hi = b * width, (b + 1) * width
        if len(sel):
            stats.append(BinStats(lo, hi, len(sel), float(np.mean(sel)), float(np.std(sel))))
        else:
            log.warning("fidelity bin [%g, %g) dB is empty", lo, hi)
            stats.append(BinStats(lo, hi, 0, None, None))
    return FidelityReport(true, est, fid, sdb, stats)
