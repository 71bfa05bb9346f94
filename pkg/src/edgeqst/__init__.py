"""Machine-learning quantum state tomography for degraded squeezed states,
with an INT8 post-training-quantized inference path."""

from edgeqst.gaussian import (
    DbLevels,
    StateParams,
    covariance_from_params,
    db_from_params,
    gaussian_fidelity,
    marginal_pdf,
    params_from_db,
    photon_decomposition,
    quadrature_variance,
    wigner_gaussian,
)

__version__ = "0.1.0"

__all__ = [
    "DbLevels",
    "StateParams",
    "covariance_from_params",
    "db_from_params",
    "gaussian_fidelity",
    "marginal_pdf",
    "params_from_db",
    "photon_decomposition",
    "quadrature_variance",
    "wigner_gaussian",
]
