"""Truncated Fock-basis numerics: squeeze operator, density matrices, fidelity,
Wigner functions and homodyne marginals."""

from __future__ import annotations

import logging
import math
import warnings

import numpy as np

from edgeqst.gaussian import StateParams, db_from_params

log = logging.getLogger(__name__)

DEFAULT_DIM = 128


class TruncationWarning(UserWarning):
    """Raised (as a warning) when a truncated state misses more than ``tol`` of its trace."""

    def __init__(self, deficit: float, dim: int, tol: float = 1e-4):
        self.deficit = deficit
        self.dim = dim
        self.tol = tol
        super().__init__(f"trace deficit {deficit:.3e} exceeds {tol:.0e} at dim={dim}")


def annihilation_matrix(dim: int) -> np.ndarray:
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    return np.diag(np.sqrt(np.arange(1, dim, dtype=float)), k=1).astype(complex)


def expm(a: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a Taylor kernel.

    The matrix is scaled by 2**-s until its 1-norm is <= 1/2, where an
    18-term Taylor series is accurate to well below double-precision
    roundoff, and then squared s times.
    """
    a = np.asarray(a)
    n = a.shape[0]
    norm = np.linalg.norm(a, 1)
    s = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0 else 0
    b = a / (2.0**s)
    ident = np.eye(n, dtype=b.dtype)
    # Horner form of sum_{k<=18} b^k / k!
    terms = 18
    out = ident + b / terms
    for k in range(terms - 1, 0, -1):
        out = ident + (b @ out) / k
    for _ in range(s):
        out = out @ out
    return out


def squeeze_operator(r: float, theta: float, dim: int = DEFAULT_DIM) -> np.ndarray:
    """S(xi) = exp((conj(xi) a^2 - xi a^dag^2)/2) with xi = r exp(2i theta)."""
    if dim < 16:
        raise ValueError(f"squeeze_operator needs dim >= 16, got {dim}")
    if r > 1.5 and dim < 128:
        raise ValueError(f"r={r} > 1.5 needs dim >= 128 (got {dim})")
    if r == 0:
        return np.eye(dim, dtype=complex)
    a = annihilation_matrix(dim)
    a2 = a @ a
    xi = r * np.exp(2j * theta)
    gen = 0.5 * (np.conj(xi) * a2 - xi * a2.conj().T)
    return expm(gen)


def thermal_state(nbar: float, dim: int = DEFAULT_DIM) -> np.ndarray:
    if nbar < 0:
        raise ValueError(f"nbar must be >= 0, got {nbar}")
    if nbar == 0:
        p = np.zeros(dim)
        p[0] = 1.0
    else:
        n = np.arange(dim)
        q = nbar / (nbar + 1.0)
        p = np.exp(n * math.log(q)) / (nbar + 1.0)
    return np.diag(p).astype(complex)


def trace_deficit(rho: np.ndarray) -> float:
    return 1.0 - float(np.real(np.trace(rho)))


def density_from_params(p: StateParams, dim: int = DEFAULT_DIM, tol: float = 1e-4,
                        work_dim: int | None = None) -> np.ndarray:
    """rho = S rho_th S^dag on levels 0..dim-1, not renormalized.

    The state is built in a larger working space (default 2 * dim) and then
    cropped, so population squeezed beyond level dim - 1 shows up as a trace
    deficit instead of being reflected back by the truncated generator.
    Warns with TruncationWarning if the deficit exceeds ``tol``.
    """
    work = max(dim, work_dim if work_dim is not None else 2 * dim)
    s = squeeze_operator(p.r, p.theta, work)
    rho = (s @ thermal_state(p.nbar, work) @ s.conj().T)[:dim, :dim]
    rho = 0.5 * (rho + rho.conj().T)
    deficit = trace_deficit(rho)
    if deficit > tol:
        d = db_from_params(p)
        log.warning(
            "truncation: deficit=%.3e dim=%d squeezing_db=%.2f nbar=%.3f",
            deficit, dim, d.squeezing_db, p.nbar,
        )
        warnings.warn(TruncationWarning(deficit, dim, tol), stacklevel=2)
    return rho


def normalize(rho: np.ndarray) -> np.ndarray:
    """Explicit trace renormalization, for display only."""
    return rho / np.real(np.trace(rho))


def mean_photon(rho: np.ndarray) -> float:
    return float(np.real(np.sum(np.diag(rho) * np.arange(rho.shape[0]))))


def _psd_sqrt(rho: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(rho)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.conj().T


def uhlmann_fidelity(rho: np.ndarray, sigma: np.ndarray) -> float:
    """(Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2 with negative eigenvalues clamped to zero."""
    if rho.shape != sigma.shape:
        raise ValueError(f"dimension mismatch: {rho.shape} vs {sigma.shape}")
    sr = _psd_sqrt(rho)
    m = sr @ sigma @ sr
    m = 0.5 * (m + m.conj().T)
    w = np.clip(np.linalg.eigvalsh(m), 0.0, None)
    f = float(np.sum(np.sqrt(w)) ** 2)
    return min(max(f, 0.0), 1.0)


def _laguerre_functions(k: int, big_b: np.ndarray, m_max: int) -> np.ndarray:
    """Normalized associated Laguerre functions
    sqrt(m!/(m+k)!) B^(k/2) exp(-B/2) L_m^k(B) for m = 0..m_max-1.

    The three-term recurrence runs on already-normalized values, so no
    factorial or power ever overflows.
    """
    out = np.empty((m_max,) + big_b.shape)
    with np.errstate(divide="ignore"):
        log_b = np.where(big_b > 0, np.log(big_b), -np.inf)
    if k == 0:
        g0 = np.exp(-0.5 * big_b)
    else:
        g0 = np.exp(0.5 * k * log_b - 0.5 * big_b - 0.5 * math.lgamma(k + 1))
    out[0] = g0
    if m_max > 1:
        out[1] = (1.0 + k - big_b) * g0 / math.sqrt(1.0 + k)
    for m in range(1, m_max - 1):
        out[m + 1] = (
            (2 * m + 1 + k - big_b) * out[m] - math.sqrt(m * (m + k)) * out[m - 1]
        ) / math.sqrt((m + 1) * (m + 1 + k))
    return out


def wigner_fock(rho: np.ndarray, x, p) -> np.ndarray:
    """Wigner function of ``rho`` at points (x, p) via the Laguerre series.

    x and p broadcast against each other; the result has their broadcast shape.
    """
    x, p = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(p, dtype=float))
    shape = x.shape
    x = x.ravel()
    p = p.ravel()
    dim = rho.shape[0]
    big_b = 2.0 * (x * x + p * p)
    phase = np.exp(1j * np.arctan2(p, x))
    sign = (-1.0) ** np.arange(dim)
    w = np.zeros_like(x)
    for k in range(dim):
        diag = np.diagonal(rho, offset=k)[: dim - k]
        if not np.any(np.abs(diag) > 0):
            continue
        lag = _laguerre_functions(k, big_b, dim - k)
        coeff = diag * sign[: dim - k]
        s = coeff @ lag
        if k == 0:
            w += np.real(s)
        else:
            w += 2.0 * np.real(s * phase**k)
    return (w / math.pi).reshape(shape)


def oscillator_eigenfunctions(x, dim: int) -> np.ndarray:
    """psi_n(x) for n < dim, shape (dim,) + x.shape, by the normalized Hermite recurrence."""
    x = np.asarray(x, dtype=float)
    psi = np.empty((dim,) + x.shape)
    psi[0] = math.pi**-0.25 * np.exp(-0.5 * x * x)
    if dim > 1:
        psi[1] = math.sqrt(2.0) * x * psi[0]
    for n in range(1, dim - 1):
        psi[n + 1] = math.sqrt(2.0 / (n + 1)) * x * psi[n] - math.sqrt(n / (n + 1)) * psi[n - 1]
    return psi


def quadrature_pdf_fock(rho: np.ndarray, phi: float, x):
    """Homodyne distribution p(x | phi) = sum_mn rho_mn e^{i(n-m)phi} psi_m(x) psi_n(x)."""
    dim = rho.shape[0]
    x_arr = np.asarray(x, dtype=float)
    psi = oscillator_eigenfunctions(x_arr.ravel(), dim)
    # fold phi into [0, 2pi) so that pdf(phi) == pdf(phi + 2pi) bit-for-bit
    phi = math.fmod(float(phi), 2.0 * math.pi)
    if phi < 0:
        phi += 2.0 * math.pi
    ph = np.exp(1j * phi * np.arange(dim))
    amp = ph[:, None] * psi  # e^{i n phi} psi_n
    out = np.real(np.einsum("mx,mn,nx->x", amp.conj(), rho, amp))
    out = out.reshape(x_arr.shape)
    return float(out) if out.ndim == 0 else out
