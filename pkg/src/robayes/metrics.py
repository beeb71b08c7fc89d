"""Calibration, accuracy and uncertainty metrics for trained predictors."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp
from scipy.stats import rankdata

from .diffmath import LOG_FLOOR, ContractError


@dataclass(frozen=True)
class ReliabilityDiagram:
    edges: np.ndarray
    counts: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray

    @property
    def empty(self) -> np.ndarray:
        return self.counts == 0

    def ece(self) -> float:
        n = self.counts.sum()
        gaps = np.abs(self.confidence - self.accuracy)
        return float(np.sum(self.counts / n * np.where(self.empty, 0.0, gaps)))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count", "accuracy", "confidence"])
            for lo, hi, c, a, f in zip(self.edges[:-1], self.edges[1:], self.counts, self.accuracy,
                                       self.confidence):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c), repr(float(a)), repr(float(f))])


def hard_predictions(probs) -> tuple[np.ndarray, np.ndarray]:
    """Argmax labels (ties to the lowest index) and their confidence."""
    probs = np.asarray(probs, dtype=np.float64)
    yhat = np.argmax(probs, axis=-1)
    return yhat, np.take_along_axis(probs, yhat[..., None], axis=-1)[..., 0]


def reliability_diagram(probs, labels, n_bins: int = 10) -> ReliabilityDiagram:
    """Bin test points by confidence into ``n_bins`` equal-width bins.

    Bin m covers (lo, hi]; a confidence of exactly 0 falls in the first bin.
    Empty bins report zero accuracy and confidence.
    """
    if n_bins < 1:
        raise ContractError("need at least one bin")
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if probs.shape[0] == 0:
        raise ContractError("empty test set")
    yhat, conf = hard_predictions(probs)
    correct = (yhat == labels).astype(np.float64)
    idx = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(counts > 0, np.bincount(idx, weights=correct, minlength=n_bins) / counts, 0.0)
        cnf = np.where(counts > 0, np.bincount(idx, weights=conf, minlength=n_bins) / counts, 0.0)
    return ReliabilityDiagram(np.linspace(0.0, 1.0, n_bins + 1), counts, acc, cnf)


def ece(probs, labels, n_bins: int = 10) -> float:
    """Expected calibration error: count-weighted mean |confidence - accuracy|."""
    return reliability_diagram(probs, labels, n_bins).ece()


def accuracy(probs, labels) -> float:
    yhat, _ = hard_predictions(probs)
    return float(np.mean(yhat == np.asarray(labels).astype(np.int64).reshape(-1)))


def mse(pred_means, targets, squared: bool = False) -> float:
    """Mean Euclidean error between targets and predictive means.

    The default averages the (unsquared) norm; ``squared=True`` averages the
    squared norm instead.
    """
    pred = np.asarray(pred_means, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.float64)
    if pred.shape != tgt.shape:
        raise ContractError(f"prediction shape {pred.shape} != target shape {tgt.shape}")
    if pred.ndim == 1:
        pred, tgt = pred[:, None], tgt[:, None]
    sq = np.sum((pred - tgt) ** 2, axis=-1)
    return float(np.mean(sq if squared else np.sqrt(sq)))


def nll(densities) -> float:
    """Mean negative log of predictive densities (clamped at 1e-30)."""
    d = np.maximum(np.asarray(densities, dtype=np.float64), LOG_FLOOR)
    return float(-np.mean(np.log(d)))


def nll_from_log(log_densities) -> float:
    lg = np.maximum(np.asarray(log_densities, dtype=np.float64), math.log(LOG_FLOOR))
    return float(-np.mean(lg))


def gaussian_kernel(x, y) -> np.ndarray:
    """k(x, x') = N(||x - x'|| | 0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x = x.reshape(len(x), -1)
    y = y.reshape(len(y), -1)
    return np.exp(-0.5 * cdist(x, y, "sqeuclidean")) / math.sqrt(2.0 * math.pi)


def mmd(x, y) -> float:
    """Biased (V-statistic) squared MMD with the Gaussian kernel above."""
    if len(x) < 1 or len(y) < 1:
        raise ContractError("mmd needs non-empty samples")
    kxx = gaussian_kernel(x, x).mean()
    kyy = gaussian_kernel(y, y).mean()
    kxy = gaussian_kernel(x, y).mean()
    return float(max(kxx + kyy - 2.0 * kxy, 0.0))


def auroc(id_scores, ood_scores) -> float:
    """P(ID score > OOD score) with ties counted one half."""
    a = np.asarray(id_scores, dtype=np.float64).reshape(-1)
    b = np.asarray(ood_scores, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ContractError("auroc needs non-empty score lists")
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def model_log_density(vae, dec_thetas, x, n_latent: int, rng: np.random.Generator) -> np.ndarray:
    """log of (1/(mL)) Σ_ij p(x | h_j, θ_i) with h_j ~ N(0, I), one value per x."""
    if n_latent < 1:
        raise ContractError("need at least one latent draw")
    dec_thetas = np.atleast_2d(np.asarray(dec_thetas, dtype=np.float64))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    h = rng.standard_normal((n_latent, vae.latent_dim))
    means = vae.decode_array(dec_thetas, h)  # (m, L, D)
    const = -0.5 * x.shape[1] * math.log(2 * math.pi * vae.variance)
    # squared distances (m, L, n) via the expansion |x|^2 - 2 x.mu + |mu|^2
    sq = (np.sum(x**2, axis=1)[None, None, :] - 2.0 * means @ x.T
          + np.sum(means**2, axis=-1)[..., None])
    logp = const - 0.5 * np.maximum(sq, 0.0) / vae.variance
    m, L = means.shape[:2]
    return logsumexp(logp.reshape(m * L, -1), axis=0) - math.log(m * L)


def model_density_score(vae, dec_thetas, x, n_latent: int, rng: np.random.Generator) -> np.ndarray:
    return np.exp(model_log_density(vae, dec_thetas, x, n_latent, rng))


def generate_samples(vae, dec_thetas, n: int, rng: np.random.Generator, noise: bool = False) -> np.ndarray:
    """Draw ``n`` samples: θ uniformly from the given draws, h ~ N(0, I).

    Returns decoder means unless ``noise`` adds the observation noise.
    """
    dec_thetas = np.atleast_2d(np.asarray(dec_thetas, dtype=np.float64))
    which = rng.integers(0, dec_thetas.shape[0], size=n)
    h = rng.standard_normal((n, vae.latent_dim))
    means = vae.decode_array(dec_thetas, h)  # (m, n, D)
    out = means[which, np.arange(n)]
    if noise:
        out = out + math.sqrt(vae.variance) * rng.standard_normal(out.shape)
    return out
