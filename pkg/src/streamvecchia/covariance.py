"""Weighted exponential tail-up covariance.

    C(i, j) = weight_ij * sigma2 * exp(-h_ij / lambda) + tau2 * [i == j]

``lambda`` is the e-folding distance (not the "effective range" 3/lambda
convention).  The spatial term vanishes for flow-unconnected pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .distance import site_pair_arrays
from .errors import ConfigurationError, ValidationError
from .sites import as_site_set


@dataclass(frozen=True)
class CovarianceParams:
    sigma2: float
    lam: float
    tau2: float
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if not (self.sigma2 >= 0 and self.lam > 0 and self.tau2 >= 0):
            raise ValidationError(
                f"invalid covariance parameters sigma2={self.sigma2}, lambda={self.lam}, tau2={self.tau2}")
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))

    @property
    def total_variance(self):
        return self.sigma2 + self.tau2

    def with_beta(self, beta):
        return replace(self, beta=np.asarray(beta, dtype=float))

    def to_dict(self):
        return {"sigma2": self.sigma2, "lambda": self.lam, "tau2": self.tau2, "beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["sigma2"]), float(d["lambda"]), float(d["tau2"]), np.asarray(d.get("beta", [])))


def exponential_tailup(h, weight, sigma2, lam):
    with np.errstate(over="ignore", invalid="ignore"):
        return np.where(weight > 0, weight * sigma2 * np.exp(-np.asarray(h) / lam), 0.0)


KERNELS = {"exponential_tailup": exponential_tailup}


def get_kernel(name):
    try:
        return KERNELS[name]
    except KeyError:
        raise ConfigurationError(f"unknown kernel {name!r}; available: {sorted(KERNELS)}") from None


def spatial_cov(h, weight, params, kernel="exponential_tailup"):
    """Spatial part only, vectorised over geometry arrays."""
    return get_kernel(kernel)(h, weight, params.sigma2, params.lam)


def cov_pair(g, params, same_site=False, kernel="exponential_tailup"):
    value = float(spatial_cov(g.h, g.weight, params, kernel)) if g.flow_connected else 0.0
    return value + (params.tau2 if same_site else 0.0)


def cov_block(rows, cols, params, network=None, kernel="exponential_tailup", nugget=True):
    """Dense covariance between two site sets.

    The nugget is added where row and column share a ``site_id`` (pass
    ``nugget=False`` for cross-covariances between distinct processes).
    """
    network = network if network is not None else rows.network
    rows = as_site_set(network, rows)
    cols = as_site_set(network, cols)
    ii, jj = np.meshgrid(np.arange(len(rows)), np.arange(len(cols)), indexing="ij")
    _, h, _, w = site_pair_arrays(network, rows, ii.ravel(), cols, jj.ravel())
    out = spatial_cov(h, w, params, kernel).reshape(len(rows), len(cols))
    if nugget and params.tau2:
        out = out + params.tau2 * (rows.site_ids[:, None] == cols.site_ids[None, :])
    return out
