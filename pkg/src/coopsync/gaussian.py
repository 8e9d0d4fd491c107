"""Two-dimensional Gaussians in information form."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularBelief

# reciprocal condition number below which a precision counts as singular
RCOND_MIN = 1e-12


def equilibrate(p):
    """Symmetric diagonal scaling ``D^-1/2 P D^-1/2``; returns (scaled, d)."""
    d = np.sqrt(np.abs(np.diag(p)))
    d = np.where(d > 0, d, 1.0)
    return p / np.outer(d, d), d


def solve_sym(p, b):
    """Solve ``p x = b`` for symmetric ``p`` after diagonal equilibration."""
    ps, d = equilibrate(p)
    return np.linalg.solve(ps, b / d) / d


def inv_sym(p):
    ps, d = equilibrate(p)
    inv = np.linalg.inv(ps) / np.outer(d, d)
    return 0.5 * (inv + inv.T)


def is_singular(p, rcond=RCOND_MIN) -> bool:
    ps, _ = equilibrate(p)
    if not np.all(np.isfinite(ps)):
        return True
    w = np.linalg.eigvalsh(0.5 * (ps + ps.T))
    return w[0] <= rcond * max(w[-1], 0.0)


@dataclass(frozen=True)
class GaussianNat:
    """Gaussian over ``(lam, nu)`` with precision ``Lambda`` and information ``h = Lambda mu``.

    A zero precision encodes the flat (uninformative) message.
    """

    precision: np.ndarray
    info: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.precision, dtype=float).reshape(2, 2)
        object.__setattr__(self, "precision", 0.5 * (p + p.T))
        object.__setattr__(self, "info", np.asarray(self.info, dtype=float).reshape(2))

    @classmethod
    def uninformative(cls) -> "GaussianNat":
        return cls(np.zeros((2, 2)), np.zeros(2))

    @classmethod
    def from_moments(cls, mean, cov) -> "GaussianNat":
        p = inv_sym(np.asarray(cov, dtype=float))
        return cls(p, p @ np.asarray(mean, dtype=float))

    @property
    def is_uninformative(self) -> bool:
        return not np.any(self.precision) and not np.any(self.info)

    def is_psd(self, tol=1e-12) -> bool:
        w = np.linalg.eigvalsh(self.precision)
        return w[0] >= -tol * max(np.trace(self.precision), 0.0)

    @property
    def mean(self) -> np.ndarray:
        if is_singular(self.precision):
            raise SingularBelief("precision is singular; mean undefined")
        return solve_sym(self.precision, self.info)

    @property
    def cov(self) -> np.ndarray:
        if is_singular(self.precision):
            raise SingularBelief("precision is singular; covariance undefined")
        return inv_sym(self.precision)

    def __mul__(self, other: "GaussianNat") -> "GaussianNat":
        return GaussianNat(self.precision + other.precision, self.info + other.info)

    def blend(self, previous: "GaussianNat", gamma: float) -> "GaussianNat":
        """Damped update ``gamma * self + (1 - gamma) * previous`` in natural parameters."""
        if gamma == 1.0:
            return self
        return GaussianNat(
            gamma * self.precision + (1.0 - gamma) * previous.precision,
            gamma * self.info + (1.0 - gamma) * previous.info,
        )


def product(*gaussians) -> GaussianNat:
    p = np.zeros((2, 2))
    h = np.zeros(2)
    for g in gaussians:
        p = p + g.precision
        h = h + g.info
    return GaussianNat(p, h)
