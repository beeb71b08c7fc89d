"""Adam-driven minimization of any member of the free-energy family."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffmath import ContractError, Tape
from .models import Model, Vae
from .objectives import ObjectiveSpec, free_energy_terms, vae_mt_terms
from .variational import INIT_SIGMA, GaussianPosterior, GaussianPrior


class TrainingError(RuntimeError):
    """Training hit a non-finite objective or gradient.

    ``checkpoint`` holds the last parameters that produced a finite step.
    """

    def __init__(self, message: str, step: int, checkpoint: dict | None = None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    steps: int = 2000
    seed: int = 0
    mc_draws: int = 1
    batch_size: int | None = None
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError(f"learning rate must be positive, got {self.learning_rate}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ContractError(f"steps must be an integer >= 1, got {self.steps}")
        if self.mc_draws < 1:
            raise ContractError("mc_draws must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ContractError("batch_size must be >= 1 or None for full batch")
        self.adam_betas = tuple(self.adam_betas)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: d[k] for k in ("learning_rate", "steps", "seed", "mc_draws", "batch_size",
                                   "adam_betas", "adam_eps") if k in d}
        return cls(**known)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Missing gradients count as zero."""
    b1, b2 = config.adam_betas
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else g
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name!r} at step {t}", t)
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[name] = p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t)


@dataclass
class TrainReport:
    objective: np.ndarray
    loss: np.ndarray
    kl: np.ndarray
    posterior: GaussianPosterior
    prior: GaussianPrior
    spec: ObjectiveSpec
    config: TrainConfig
    encoder: np.ndarray | None = None
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        """JSON-ready summary. Wall-clock time is left out so reruns match bit for bit."""
        return {
            "spec": self.spec.to_dict(),
            "config": asdict(self.config) | {"adam_betas": list(self.config.adam_betas)},
            "steps": int(self.objective.size),
            "final_objective": float(self.objective[-1]),
            "final_loss": float(self.loss[-1]),
            "final_kl": None if self.spec.frequentist else float(self.kl[-1]),
            "posterior": self.posterior.to_dict(self.prior),
            "encoder": None if self.encoder is None else self.encoder.tolist(),
        }

    def write_curves(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "objective", "loss", "kl"])
            for i, (o, l, k) in enumerate(zip(self.objective, self.loss, self.kl)):
                w.writerow([i, repr(float(o)), repr(float(l)), "" if np.isnan(k) else repr(float(k))])


def _arrays(data):
    x = np.asarray(data.features, dtype=np.float64)
    y = getattr(data, "targets", None)
    return x, (None if y is None else np.asarray(y))


def fit(model: Model | Vae, spec: ObjectiveSpec, data, config: TrainConfig,
        prior: GaussianPrior | None = None, posterior: GaussianPosterior | None = None,
        encoder: np.ndarray | None = None) -> TrainReport:
    """Minimize the (m, t) free energy with Adam for a fixed number of steps.

    Each step draws fresh eps for the m ensemble members (one joint draw per
    Monte Carlo replication), differentiates the objective and updates the
    posterior mean and, outside frequentist mode, its scale.
    """
    prior = GaussianPrior() if prior is None else prior
    x, y = _arrays(data)
    n = x.shape[0]
    if n == 0:
        raise ContractError("empty training set")
    is_vae = isinstance(model, Vae)
    if is_vae != (spec.family == "vae"):
        raise ContractError(f"objective family {spec.family!r} does not match model {type(model).__name__}")
    rng = np.random.default_rng(config.seed)
    d = model.n_params
    q = posterior.copy() if posterior is not None else GaussianPosterior.initialize(d, rng, spec.frequentist)
    if q.d != d:
        raise ContractError(f"posterior has {q.d} entries, model needs {d}")
    q.frequentist = spec.frequentist
    params = {"mu": q.mu}
    if not spec.frequentist:
        params["rho"] = q.rho
    if is_vae:
        params["enc"] = (rng.normal(0.0, INIT_SIGMA, size=model.n_encoder) if encoder is None
                         else np.asarray(encoder, dtype=np.float64).copy())

    batch = config.batch_size if config.batch_size and config.batch_size < n else None
    scale = n / batch if batch else 1.0
    state = AdamState()
    objective = np.empty(config.steps)
    loss_log = np.empty(config.steps)
    kl_log = np.full(config.steps, np.nan)
    start = time.perf_counter()

    for step in range(config.steps):
        tape = Tape()
        cur = GaussianPosterior(params["mu"], params.get("rho", q.rho), spec.frequentist)
        bq = cur.bind(tape)
        leaves = dict(bq.leaves)
        enc_v = None
        if is_vae:
            enc_v = tape.var(params["enc"])
            leaves["enc"] = enc_v
        if batch:
            idx = np.sort(rng.choice(n, size=batch, replace=False))
            xb, yb = x[idx], (None if y is None else y[idx])
        else:
            xb, yb = x, y
        total = loss = kl = None
        for _ in range(config.mc_draws):
            eps = rng.standard_normal((spec.m, d))
            if is_vae:
                eps_lat = rng.standard_normal((xb.shape[0], model.latent_dim))
                o, l, k = vae_mt_terms(spec, model, bq, enc_v, prior, xb, eps, eps_lat, scale)
            else:
                o, l, k = free_energy_terms(spec, bq, prior, model, xb, yb, eps, scale)
            total = o if total is None else total + o
            loss = l if loss is None else loss + l
            kl = k
        if config.mc_draws > 1:
            total = total * (1.0 / config.mc_draws)
            loss = loss * (1.0 / config.mc_draws)
        value = float(total.value)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite objective at step {step}", step, _checkpoint(params, prior))
        objective[step] = value
        loss_log[step] = float(loss.value)
        if kl is not None:
            kl_log[step] = float(kl.value)
        names = list(leaves)
        grads = dict(zip(names, tape.gradients(total, [leaves[k] for k in names])))
        try:
            params, state = adam_step(params, grads, state, config)
        except TrainingError as err:
            raise TrainingError(f"{err} (training step {step})", step, _checkpoint(params, prior)) from None

    final = GaussianPosterior(params["mu"], params.get("rho", q.rho), spec.frequentist)
    return TrainReport(objective, loss_log, kl_log, final, prior, spec, config,
                       encoder=params.get("enc"), wall_clock=time.perf_counter() - start)


def _checkpoint(params: dict, prior: GaussianPrior) -> dict:
    out = {k: np.array(v).tolist() for k, v in params.items()}
    out["prior"] = prior.to_dict()
    return out
