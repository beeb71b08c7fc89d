"""The (m, t) free-energy family.

Training loss for an ensemble of m parameter draws with the t-logarithm::

    L_t(θ_1..θ_m) = - Σ_z log_t( (1/m) Σ_i p(z | θ_i) )

and the free energy adds the weighted KL regularizer ``(m / β) KL(q || p)``.
``m = 1, t = 1`` is ordinary variational Bayes; ``t = 1`` keeps the
log-loss; ``t < 1`` caps each point's loss at ``1 / (1 - t)`` whenever its
probability is at most one.

Mixture probabilities are formed in the log domain (log-sum-exp over the
draw axis), so far-away points keep finite, non-zero gradients.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import ContractError, Var
from .models import GaussianLocationModel, Model, Vae, vae_reconstruction_terms
from .variational import BoundPosterior, GaussianPrior, kl_to_prior, sample

FAMILIES = ("discriminative", "density", "vae")


@dataclass(frozen=True)
class ObjectiveSpec:
    m: int = 1
    t: float = 1.0
    beta: float = 0.01
    family: str = "discriminative"
    frequentist: bool = False

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ContractError(f"m must be an integer >= 1, got {self.m}")
        if not 0.0 <= self.t <= 1.0:
            raise ContractError(f"t must lie in [0, 1], got {self.t}")
        if not self.beta > 0:
            raise ContractError(f"beta must be positive, got {self.beta}")
        if self.family not in FAMILIES:
            raise ContractError(f"family must be one of {FAMILIES}, got {self.family!r}")

    @property
    def kl_weight(self) -> float:
        return 0.0 if self.frequentist else self.m / self.beta

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveSpec":
        return cls(m=int(d.get("m", 1)), t=float(d.get("t", 1.0)), beta=float(d.get("beta", 0.01)),
                   family=str(d.get("family", "discriminative")), frequentist=bool(d.get("frequentist", False)))


def _check_t(t: float) -> None:
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"t must lie in [0, 1], got {t}")


def t_log_loss(p, t: float):
    """-log_t(p) on probability values (clamped at 1e-30)."""
    _check_t(t)
    p = np.maximum(np.asarray(p, dtype=np.float64), dm.LOG_FLOOR)
    if t == 1.0:
        out = -np.log(p)
    else:
        out = -(p ** (1.0 - t) - 1.0) / (1.0 - t)
    return float(out) if out.ndim == 0 else out


def neg_log_t(logp: Var, t: float) -> Var:
    """-log_t applied to probabilities given by their logarithm."""
    _check_t(t)
    if t == 1.0:
        return -logp
    return (dm.exp(logp * (1.0 - t)) - 1.0) * (-1.0 / (1.0 - t))


def mixture_log_prob(logp: Var) -> Var:
    """log((1/m) Σ_i p_i) along the leading draw axis of an (m, n) table."""
    if logp.ndim != 2:
        raise ContractError(f"expected per-draw log-probabilities of shape (m, n), got {logp.shape}")
    return dm.logsumexp(logp, axis=0) - math.log(logp.shape[0])


def mt_loss_from_log(logp: Var, t: float) -> Var:
    """(m, t) training loss from an (m, n) table of log-probabilities."""
    if logp.shape[-1] == 0:
        raise ContractError("empty dataset")
    return dm.sum(neg_log_t(mixture_log_prob(logp), t))


def mt_training_loss(model: Model, thetas: Var, x, y=None, t: float = 1.0) -> Var:
    """(m, t) training loss for parameter draws ``thetas`` of shape (m, d)."""
    if thetas.ndim != 2 or thetas.shape[0] < 1:
        raise ContractError(f"thetas must have shape (m, d) with m >= 1, got {thetas.shape}")
    if np.asarray(x).shape[0] == 0:
        raise ContractError("empty dataset")
    return mt_loss_from_log(model.log_prob(thetas, x, y), t)


def _draws(q: BoundPosterior, eps, m: int) -> Var:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim != 2 or eps.shape[0] != m:
        raise ContractError(f"need {m} eps rows of length {q.d}, got shape {eps.shape}")
    return sample(q, eps)


def free_energy_terms(spec: ObjectiveSpec, q: BoundPosterior, prior: GaussianPrior, model: Model,
                      x, y, eps, scale: float = 1.0) -> tuple[Var, Var, Var | None]:
    """Return ``(objective, training-loss term, KL term)``.

    ``scale`` multiplies the training loss (|D| / batch size when
    minibatching). The KL term is ``None`` in frequentist mode.
    """
    if spec.family == "vae":
        raise ContractError("use vae_mt_terms for the vae family")
    thetas = _draws(q, eps, spec.m)
    loss = mt_training_loss(model, thetas, x, y, spec.t)
    if scale != 1.0:
        loss = loss * scale
    if spec.frequentist:
        return loss, loss, None
    kl = kl_to_prior(q, prior)
    return loss + kl * spec.kl_weight, loss, kl


def free_energy(spec: ObjectiveSpec, q: BoundPosterior, prior: GaussianPrior, model: Model,
                x, y, eps, scale: float = 1.0) -> Var:
    return free_energy_terms(spec, q, prior, model, x, y, eps, scale)[0]


def vae_mt_terms(spec: ObjectiveSpec, vae: Vae, q: BoundPosterior, enc_theta: Var, prior: GaussianPrior,
                 x, eps, eps_latent, scale: float = 1.0) -> tuple[Var, Var, Var | None]:
    """(m, t) objective for a VAE whose decoder carries the posterior.

    Per point: ``-log_t`` of the m-decoder mixture likelihood at one shared
    latent draw, plus the encoder KL to N(0, I).
    """
    if spec.family != "vae":
        raise ContractError(f"vae objective needs family 'vae', got {spec.family!r}")
    thetas = _draws(q, eps, spec.m)
    loglik, enc_kl = vae_reconstruction_terms(vae, enc_theta, thetas, x, eps_latent)
    loss = mt_loss_from_log(loglik, spec.t) + dm.sum(enc_kl)
    if scale != 1.0:
        loss = loss * scale
    if spec.frequentist:
        return loss, loss, None
    kl = kl_to_prior(q, prior)
    return loss + kl * spec.kl_weight, loss, kl


def vae_mt_loss(spec, vae, q, enc_theta, prior, x, eps, eps_latent, scale: float = 1.0) -> Var:
    return vae_mt_terms(spec, vae, q, enc_theta, prior, x, eps, eps_latent, scale)[0]


def tempered_posterior_1d(model: GaussianLocationModel, prior: GaussianPrior, data, beta: float,
                          grid) -> np.ndarray:
    """Quadrature-normalized p(θ) Π p(x|θ)^β on a 1-d grid."""
    grid = np.asarray(grid, dtype=np.float64)
    data = np.asarray(data, dtype=np.float64).reshape(-1)
    mean_p, var_p = float(prior.mean), float(prior.variance)
    log_post = -0.5 * (grid - mean_p) ** 2 / var_p
    if data.size:
        ll = model.log_prob_array(grid[:, None], data)
        log_post = log_post + beta * ll.sum(axis=1)
    dens = np.exp(log_post - log_post.max())
    dens /= np.trapezoid(dens, grid)
    if max(dens[0], dens[-1]) > 1e-6 * dens.max():
        warnings.warn("grid too narrow: tempered posterior has mass at the boundary", RuntimeWarning)
    return dens
