"""Mean-field Gaussian posteriors over a flat parameter vector."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .diffmath import ContractError, Tape, Var

POINT_MASS_SIGMA = 1e-8
INIT_SIGMA = 0.05


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    """Inverse of softplus for y > 0."""
    y = np.asarray(y, dtype=np.float64)
    # log(expm1(y)) loses precision for large y
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


@dataclass(frozen=True)
class GaussianPrior:
    """Isotropic or diagonal Gaussian prior N(mean, variance)."""

    mean: float | np.ndarray = 0.0
    variance: float | np.ndarray = 1.0

    def __post_init__(self):
        if np.any(np.asarray(self.variance) <= 0):
            raise ContractError(f"prior variance must be positive, got {self.variance}")

    def to_dict(self) -> dict:
        return {"mean": _jsonable(self.mean), "variance": _jsonable(self.variance)}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianPrior":
        mean, var = d.get("mean", 0.0), d.get("variance", 1.0)
        return cls(np.asarray(mean) if isinstance(mean, list) else float(mean),
                   np.asarray(var) if isinstance(var, list) else float(var))


def _jsonable(x):
    x = np.asarray(x)
    return x.tolist() if x.ndim else float(x)


@dataclass
class GaussianPosterior:
    """q(θ) = N(mu, diag(softplus(rho)^2)).

    In frequentist mode the posterior is a point mass: the standard
    deviation is pinned to ``POINT_MASS_SIGMA`` and ``rho`` is never
    optimized.
    """

    mu: np.ndarray
    rho: np.ndarray
    frequentist: bool = False

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.rho = np.asarray(self.rho, dtype=np.float64).reshape(-1)
        if self.mu.shape != self.rho.shape:
            raise ContractError(f"mu {self.mu.shape} and rho {self.rho.shape} differ")

    @property
    def d(self) -> int:
        return self.mu.size

    @property
    def sigma(self) -> np.ndarray:
        if self.frequentist:
            return np.full_like(self.mu, POINT_MASS_SIGMA)
        return softplus(self.rho)

    @classmethod
    def initialize(cls, d: int, rng: np.random.Generator, frequentist: bool = False):
        mu = rng.normal(0.0, INIT_SIGMA, size=d)
        return cls(mu, np.full(d, float(softplus_inv(INIT_SIGMA))), frequentist)

    def draw(self, eps: np.ndarray) -> np.ndarray:
        """Plain numpy reparameterized draws, one row per row of ``eps``."""
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape[-1] != self.d:
            raise ContractError(f"eps has length {eps.shape[-1]}, expected {self.d}")
        return self.mu + self.sigma * eps

    def bind(self, tape: Tape) -> "BoundPosterior":
        mu = tape.var(self.mu)
        rho = None if self.frequentist else tape.var(self.rho)
        return BoundPosterior(mu, rho, self.frequentist)

    def copy(self) -> "GaussianPosterior":
        return GaussianPosterior(self.mu.copy(), self.rho.copy(), self.frequentist)

    def to_dict(self, prior: GaussianPrior | None = None) -> dict:
        out = {"d": self.d, "mu": self.mu.tolist(), "rho": self.rho.tolist(),
               "frequentist": self.frequentist}
        if prior is not None:
            out["prior"] = prior.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianPosterior":
        q = cls(np.asarray(d["mu"]), np.asarray(d["rho"]), bool(d.get("frequentist", False)))
        if q.d != int(d["d"]):
            raise ContractError(f"checkpoint declares d={d['d']} but holds {q.d} entries")
        return q

    def save(self, path: str | Path, prior: GaussianPrior | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(prior), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> tuple["GaussianPosterior", GaussianPrior | None]:
        d = json.loads(Path(path).read_text())
        prior = GaussianPrior.from_dict(d["prior"]) if "prior" in d else None
        return cls.from_dict(d), prior


def point_mass(theta) -> GaussianPosterior:
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(theta)):
        raise ContractError("point_mass needs a finite parameter vector")
    return GaussianPosterior(theta.copy(), np.full_like(theta, softplus_inv(POINT_MASS_SIGMA)), True)


@dataclass
class BoundPosterior:
    """Posterior parameters registered as leaves on a tape."""

    mu: Var
    rho: Var | None
    frequentist: bool = False
    _sigma: Var | None = field(default=None, repr=False)

    @property
    def d(self) -> int:
        return self.mu.shape[0]

    def sigma(self) -> Var | np.ndarray:
        if self.rho is None:
            return np.full(self.d, POINT_MASS_SIGMA)
        if self._sigma is None:
            self._sigma = dm.softplus(self.rho)
        return self._sigma

    @property
    def leaves(self) -> dict[str, Var]:
        out = {"mu": self.mu}
        if self.rho is not None:
            out["rho"] = self.rho
        return out


def sample(q: BoundPosterior, eps) -> Var:
    """θ = mu + σ ⊙ eps; eps may hold one row per ensemble draw."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape[-1:] != (q.d,):
        raise ContractError(f"eps has trailing length {eps.shape[-1:]}, expected {q.d}")
    if q.rho is None:
        return q.mu + q.sigma() * eps
    return q.mu + dm.mul(q.sigma(), eps)


def kl_to_prior(q: BoundPosterior, p: GaussianPrior) -> Var:
    """Closed-form KL(q || p) summed over coordinates."""
    var_p = np.broadcast_to(np.asarray(p.variance, dtype=np.float64), (q.d,))
    mean_p = np.broadcast_to(np.asarray(p.mean, dtype=np.float64), (q.d,))
    if np.any(var_p <= 0):
        raise ContractError("prior variance must be positive")
    sigma = q.sigma()
    if not isinstance(sigma, Var):
        sigma = dm.constant(q.mu.tape, sigma)
    quad = (dm.square(sigma) + dm.square(q.mu - mean_p)) * (0.5 / var_p)
    terms = 0.5 * np.log(var_p) - dm.log(sigma) + quad - 0.5
    return dm.sum(terms)


def kl_value(q: GaussianPosterior, p: GaussianPrior) -> float:
    """Numpy evaluation of the same KL, for logging and tests."""
    var_p = np.broadcast_to(np.asarray(p.variance, dtype=np.float64), (q.d,))
    mean_p = np.broadcast_to(np.asarray(p.mean, dtype=np.float64), (q.d,))
    s = q.sigma
    return float(np.sum(0.5 * np.log(var_p) - np.log(s) + (s**2 + (q.mu - mean_p) ** 2) / (2 * var_p) - 0.5))
