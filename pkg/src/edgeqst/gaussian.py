"""Covariance-matrix description of zero-mean single-mode squeezed thermal states.

Convention: hbar = 1, x = (a + a^dag)/sqrt(2), so the vacuum has covariance
diag(1/2, 1/2).  A state is S(xi) rho_th(nbar) S(xi)^dag with xi = r exp(2i theta);
its minimum-noise quadrature sits at phase theta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StateParams:
    """Squeezing magnitude ``r``, squeezing angle ``theta`` and thermal photon number ``nbar``.

    ``theta`` is folded into [0, pi) on construction because the state is
    invariant under theta -> theta + pi.
    """

    r: float
    theta: float
    nbar: float

    def __post_init__(self):
        if not (math.isfinite(self.r) and math.isfinite(self.theta) and math.isfinite(self.nbar)):
            raise ValueError(f"non-finite state parameters: {self!r}")
        if self.r < 0:
            raise ValueError(f"r must be >= 0, got {self.r}")
        if self.nbar < 0:
            raise ValueError(f"nbar must be >= 0, got {self.nbar}")
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "nbar", float(self.nbar))
        object.__setattr__(self, "theta", canonical_theta(self.theta))

    @classmethod
    def vacuum(cls) -> "StateParams":
        return cls(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class DbLevels:
    squeezing_db: float
    antisqueezing_db: float


def canonical_theta(theta: float) -> float:
    t = math.fmod(float(theta), math.pi)
    if t < 0:
        t += math.pi
    # fmod of a value just below a multiple of pi can round up to pi itself
    if t >= math.pi:
        t = 0.0
    return t


def _principal_variances(p: StateParams) -> tuple[float, float]:
    k = p.nbar + 0.5
    return k * math.exp(-2.0 * p.r), k * math.exp(2.0 * p.r)


def covariance_from_params(p: StateParams) -> np.ndarray:
    vmin, vmax = _principal_variances(p)
    c, s = math.cos(p.theta), math.sin(p.theta)
    rot = np.array([[c, -s], [s, c]])
    v = rot @ np.diag([vmin, vmax]) @ rot.T
    # enforce exact symmetry
    return 0.5 * (v + v.T)


def quadrature_variance(p: StateParams, phi: float | np.ndarray) -> float | np.ndarray:
    """Variance of x cos(phi) + p sin(phi)."""
    vmin, vmax = _principal_variances(p)
    d = np.asarray(phi, dtype=float) - p.theta
    out = vmin * np.cos(d) ** 2 + vmax * np.sin(d) ** 2
    return float(out) if out.ndim == 0 else out


def db_from_params(p: StateParams) -> DbLevels:
    vmin, vmax = _principal_variances(p)
    return DbLevels(-10.0 * math.log10(vmin / 0.5), 10.0 * math.log10(vmax / 0.5))


def params_from_db(d: DbLevels, theta: float = 0.0) -> StateParams:
    if not isinstance(d, DbLevels):
        d = DbLevels(*d)
    s, a = d.squeezing_db, d.antisqueezing_db
    if s < 0:
        raise ValueError(f"squeezing_db must be >= 0, got {s}")
    if a < s:
        raise ValueError(
            f"antisqueezing_db ({a}) < squeezing_db ({s}): unphysical, det V < 1/4"
        )
    vmin = 0.5 * 10.0 ** (-s / 10.0)
    vmax = 0.5 * 10.0 ** (a / 10.0)
    nbar = max(math.sqrt(vmin * vmax) - 0.5, 0.0)
    r = 0.25 * math.log(vmax / vmin)
    return StateParams(r, theta, nbar)


def photon_decomposition(p: StateParams) -> tuple[float, float, float]:
    """Return (total, pure-squeezing, environment) mean photon numbers."""
    n_total = (p.nbar + 0.5) * math.cosh(2.0 * p.r) - 0.5
    n_pure = math.sinh(p.r) ** 2
    return n_total, n_pure, n_total - n_pure


def gaussian_fidelity(a: StateParams, b: StateParams) -> float:
    if a == b:
        return 1.0
    va, vb = covariance_from_params(a), covariance_from_params(b)
    # det V = (nbar + 1/2)^2 exactly; avoid det() roundoff near the pure boundary
    da, db = (a.nbar + 0.5) ** 2, (b.nbar + 0.5) ** 2
    big = da + db + float(va[0, 0] * vb[1, 1] + va[1, 1] * vb[0, 0] - 2.0 * va[0, 1] * vb[0, 1])
    small = 4.0 * (da - 0.25) * (db - 0.25)
    f = 1.0 / (math.sqrt(big + small) - math.sqrt(small))
    return min(max(f, 0.0), 1.0)


def wigner_gaussian(p: StateParams, x, pq):
    """Wigner function at phase-space point(s) (x, pq); broadcasts over arrays."""
    v = covariance_from_params(p)
    vi = np.linalg.inv(v)
    det = (p.nbar + 0.5) ** 2
    x = np.asarray(x, dtype=float)
    pq = np.asarray(pq, dtype=float)
    quad = vi[0, 0] * x * x + 2.0 * vi[0, 1] * x * pq + vi[1, 1] * pq * pq
    out = np.exp(-0.5 * quad) / (2.0 * math.pi * math.sqrt(det))
    return float(out) if out.ndim == 0 else out


def marginal_pdf(p: StateParams, phi: float, x):
    var = quadrature_variance(p, phi)
    x = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * x * x / var) / math.sqrt(2.0 * math.pi * var)
    return float(out) if out.ndim == 0 else out
