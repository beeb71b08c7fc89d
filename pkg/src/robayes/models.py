"""Likelihood families p(y|x,θ) and p(x|θ) over flat parameter vectors.

Every ``log_prob`` accepts parameters of shape ``(d,)`` or ``(m, d)``; the
leading axis indexes ensemble draws and the result has shape ``(n,)`` or
``(m, n)`` respectively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp as np_logsumexp

from . import diffmath as dm
from .diffmath import ContractError, Tape, Var

LOG_2PI = math.log(2.0 * math.pi)
# keeps encoder variances strictly positive where softplus underflows
ENC_VAR_FLOOR = 1e-6


def _gauss_logpdf_const(variance: float) -> float:
    return -0.5 * (LOG_2PI + math.log(variance))


def _check_theta(theta: Var, d: int) -> None:
    if theta.shape[-1] != d or theta.ndim > 2:
        raise ContractError(f"parameter shape {theta.shape} does not match model size {d}")


class DenseNet:
    """Fully connected ELU network over a flat parameter vector.

    Each layer stores its weight matrix (row-major, ``in x out``) followed
    by its bias.
    """

    def __init__(self, widths: Sequence[int], alpha: float = 1.0):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ContractError(f"need at least input and output widths, got {widths}")
        self.widths = widths
        self.alpha = alpha
        self.slices = []
        offset = 0
        for i, o in zip(widths[:-1], widths[1:]):
            self.slices.append(((offset, offset + i * o), (offset + i * o, offset + i * o + o), (i, o)))
            offset += i * o + o
        self.n_params = offset

    def unflatten(self, theta: Var) -> list[tuple[Var, Var]]:
        lead = theta.shape[:-1]
        layers = []
        for (w0, w1), (b0, b1), (i, o) in self.slices:
            w = dm.reshape(dm.take(theta, (..., slice(w0, w1))), lead + (i, o))
            b = dm.take(theta, (..., slice(b0, b1)))
            layers.append((w, b))
        return layers

    def unflatten_array(self, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        theta = np.asarray(theta)
        lead = theta.shape[:-1]
        return [
            (theta[..., w0:w1].reshape(lead + (i, o)), theta[..., b0:b1].copy())
            for (w0, w1), (b0, b1), (i, o) in self.slices
        ]

    def flatten(self, layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        parts = []
        for w, b in layers:
            lead = w.shape[:-2]
            parts.append(np.asarray(w).reshape(lead + (-1,)))
            parts.append(np.asarray(b))
        return np.concatenate(parts, axis=-1)

    def forward(self, theta: Var, x) -> Var:
        h = x
        layers = self.unflatten(theta)
        for k, (w, b) in enumerate(layers):
            h = dm.affine(h, w, b)
            if k < len(layers) - 1:
                h = dm.elu(h, self.alpha)
        return h


class Model:
    """Common surface of the likelihood families."""

    family = "density"
    n_params: int

    def log_prob(self, theta: Var, x, y=None) -> Var:
        raise NotImplementedError

    def log_prob_array(self, thetas, x, y=None) -> np.ndarray:
        """Numpy evaluation of ``log_prob`` (no gradients kept)."""
        tape = Tape()
        return np.array(self.log_prob(tape.var(thetas), x, y).value)

    def spec(self) -> dict:
        raise NotImplementedError


class GaussianLocationModel(Model):
    """p(x|θ) = N(x | θ, variance), one scalar parameter."""

    family = "density"
    n_params = 1

    def __init__(self, variance: float = 0.25):
        if variance <= 0:
            raise ContractError(f"variance must be positive, got {variance}")
        self.variance = float(variance)

    def log_prob(self, theta: Var, x, y=None) -> Var:
        _check_theta(theta, 1)
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        col = dm.reshape(theta, theta.shape[:-1] + (1, 1))
        centers = dm.reshape(dm.matmul(col, np.ones((1, x.size))), theta.shape[:-1] + (x.size,))
        resid = x - centers
        return _gauss_logpdf_const(self.variance) - dm.square(resid) * (0.5 / self.variance)

    def density(self, thetas, grid) -> np.ndarray:
        """Per-draw densities on a grid, shape (m, len(grid))."""
        thetas = np.asarray(thetas, dtype=np.float64).reshape(-1, 1)
        grid = np.asarray(grid, dtype=np.float64)
        return np.exp(_gauss_logpdf_const(self.variance) - (grid - thetas) ** 2 / (2 * self.variance))

    def spec(self) -> dict:
        return {"family": "gaussian-location", "layer_widths": [], "fixed_variance": self.variance,
                "latent_dim": None}


class MlpClassifier(Model):
    """Categorical p(y|x,θ) from an ELU network's normalized exponentials."""

    family = "discriminative"

    def __init__(self, layer_widths: Sequence[int] = (16, 30, 30, 8)):
        self.net = DenseNet(layer_widths)
        self.n_params = self.net.n_params
        self.n_classes = self.net.widths[-1]

    def log_prob(self, theta: Var, x, y=None) -> Var:
        _check_theta(theta, self.n_params)
        if y is None:
            raise ContractError("classifier log_prob needs labels")
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y).astype(np.int64).reshape(-1)
        logits = self.net.forward(theta, x)
        picked = dm.take(logits, (..., np.arange(y.size), y))
        return picked - dm.logsumexp(logits, axis=-1)

    def predict_proba(self, thetas, x) -> np.ndarray:
        """Class probabilities, shape (m, n, K) for thetas of shape (m, d)."""
        tape = Tape()
        logits = self.net.forward(tape.var(np.atleast_2d(thetas)), np.asarray(x, dtype=np.float64)).value
        logits = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=-1, keepdims=True)

    def spec(self) -> dict:
        return {"family": "mlp-classifier", "layer_widths": self.net.widths, "fixed_variance": None,
                "latent_dim": None}


class MlpRegressor(Model):
    """p(y|x,θ) = N(y | f_θ(x), variance·I) with an ELU network mean."""

    family = "discriminative"

    def __init__(self, layer_widths: Sequence[int] = (8, 50, 50, 2), variance: float = 0.01):
        if variance <= 0:
            raise ContractError(f"variance must be positive, got {variance}")
        self.net = DenseNet(layer_widths)
        self.n_params = self.net.n_params
        self.variance = float(variance)

    def log_prob(self, theta: Var, x, y=None) -> Var:
        _check_theta(theta, self.n_params)
        if y is None:
            raise ContractError("regressor log_prob needs targets")
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).reshape(x.shape[0], -1)
        resid = y - self.net.forward(theta, x)
        per_dim = _gauss_logpdf_const(self.variance) - dm.square(resid) * (0.5 / self.variance)
        return dm.sum(per_dim, axis=-1)

    def mean(self, thetas, x) -> np.ndarray:
        tape = Tape()
        return np.array(self.net.forward(tape.var(np.atleast_2d(thetas)), np.asarray(x, dtype=np.float64)).value)

    def spec(self) -> dict:
        return {"family": "mlp-regressor", "layer_widths": self.net.widths, "fixed_variance": self.variance,
                "latent_dim": None}


class Vae:
    """Gaussian VAE with a point-estimated encoder and a decoder that may be
    treated in a Bayesian way.

    Encoder: x -> (mean, variance) of a diagonal Gaussian over ``latent_dim``
    coordinates, variance through softplus plus a 1e-6 floor. Decoder:
    h -> mean of N(x | mean, variance·I). Latent prior N(0, I).
    """

    family = "vae"

    def __init__(self, input_dim: int = 128, hidden: Sequence[int] = (10,), latent_dim: int = 5,
                 variance: float = 0.1, decoder_hidden: Sequence[int] | None = None):
        if variance <= 0:
            raise ContractError(f"variance must be positive, got {variance}")
        self.input_dim = int(input_dim)
        self.latent_dim = int(latent_dim)
        self.variance = float(variance)
        hidden = list(hidden)
        dec_hidden = hidden if decoder_hidden is None else list(decoder_hidden)
        self.encoder = DenseNet([self.input_dim, *hidden, 2 * self.latent_dim])
        self.decoder = DenseNet([self.latent_dim, *dec_hidden, self.input_dim])
        self.n_encoder = self.encoder.n_params
        self.n_params = self.decoder.n_params

    def encode(self, enc_theta: Var, x) -> tuple[Var, Var]:
        _check_theta(enc_theta, self.n_encoder)
        out = self.encoder.forward(enc_theta, np.asarray(x, dtype=np.float64))
        L = self.latent_dim
        mean = dm.take(out, (..., slice(0, L)))
        var = dm.softplus(dm.take(out, (..., slice(L, 2 * L)))) + ENC_VAR_FLOOR
        return mean, var

    def decoder_log_prob(self, dec_theta: Var, h, x) -> Var:
        """log N(x | decoder(h), variance·I), shape (m, n) or (n,)."""
        _check_theta(dec_theta, self.n_params)
        x = np.asarray(x, dtype=np.float64)
        resid = x - self.decoder.forward(dec_theta, h)
        per_dim = _gauss_logpdf_const(self.variance) - dm.square(resid) * (0.5 / self.variance)
        return dm.sum(per_dim, axis=-1)

    def decode_array(self, dec_thetas, h) -> np.ndarray:
        tape = Tape()
        return np.array(self.decoder.forward(tape.var(dec_thetas), np.asarray(h, dtype=np.float64)).value)

    def spec(self) -> dict:
        return {"family": "vae", "layer_widths": self.encoder.widths[1:-1], "fixed_variance": self.variance,
                "latent_dim": self.latent_dim, "input_dim": self.input_dim,
                "decoder_hidden": self.decoder.widths[1:-1]}


def vae_reconstruction_terms(vae: Vae, enc_theta: Var, dec_theta: Var, x, eps) -> tuple[Var, Var]:
    """One-draw reconstruction log-likelihood and closed-form encoder KL.

    ``eps`` holds standard-normal draws of shape (n, latent_dim); the same
    latent draw is shared by every decoder in ``dec_theta``. Returns
    ``(loglik, enc_kl)`` with shapes (m, n) or (n,), and (n,).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != vae.input_dim:
        raise ContractError(f"expected inputs of shape (n, {vae.input_dim}), got {x.shape}")
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (x.shape[0], vae.latent_dim):
        raise ContractError(f"latent eps shape {eps.shape} != {(x.shape[0], vae.latent_dim)}")
    mean, var = vae.encode(enc_theta, x)
    h = mean + dm.mul(dm.power(var, 0.5), eps)
    loglik = vae.decoder_log_prob(dec_theta, h, x)
    enc_kl = 0.5 * dm.sum(var + dm.square(mean) - 1.0 - dm.log(var), axis=-1)
    return loglik, enc_kl


def predictive_log_prob(model: Model, thetas, x, y=None) -> np.ndarray:
    """log of the m-sample mixture (1/m) Σ p(z | θ_i), one value per point."""
    thetas = np.asarray(thetas, dtype=np.float64)
    if thetas.size == 0:
        raise ContractError("predictive needs at least one parameter draw")
    thetas = np.atleast_2d(thetas)
    lp = model.log_prob_array(thetas, x, y)
    return np_logsumexp(lp, axis=0) - math.log(thetas.shape[0])


def predictive_prob(model: Model, thetas, x, y=None) -> np.ndarray:
    return np.exp(predictive_log_prob(model, thetas, x, y))


def mixture_prob(component_probs) -> float:
    """Arithmetic mean of per-model probabilities."""
    p = np.asarray(component_probs, dtype=np.float64)
    if p.size == 0:
        raise ContractError("empty list of component probabilities")
    return float(p.mean())


def model_from_spec(spec: dict):
    """Build a model from ``{family, layer_widths, fixed_variance, latent_dim}``."""
    family = spec.get("family")
    widths = spec.get("layer_widths") or []
    var = spec.get("fixed_variance")
    if family == "gaussian-location":
        return GaussianLocationModel(0.25 if var is None else var)
    if family == "mlp-classifier":
        return MlpClassifier(widths or (16, 30, 30, 8))
    if family == "mlp-regressor":
        return MlpRegressor(widths or (8, 50, 50, 2), 0.01 if var is None else var)
    if family == "vae":
        return Vae(input_dim=spec.get("input_dim", 128), hidden=widths or (10,),
                   latent_dim=spec.get("latent_dim") or 5, variance=0.1 if var is None else var,
                   decoder_hidden=spec.get("decoder_hidden"))
    raise ContractError(f"unknown model family {family!r}")


@dataclass
class LinearGaussianVae:
    """Closed-form marginal of a linear decoder x = W h + b + noise.

    Used as an oracle: with h ~ N(0, I), x ~ N(b, W Wᵀ + variance·I).
    """

    weight: np.ndarray  # (latent, input) as stored by DenseNet
    bias: np.ndarray
    variance: float

    def log_marginal(self, x) -> np.ndarray:
        from scipy.stats import multivariate_normal

        cov = self.weight.T @ self.weight + self.variance * np.eye(self.bias.size)
        return multivariate_normal(self.bias, cov).logpdf(np.atleast_2d(x))
