"""Synthetic datasets and ε-contamination.

All generators are pure functions of their arguments and the supplied
``numpy.random.Generator``. Contamination keeps row counts and feature
dimensionality and records which rows it touched in ``is_outlier``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np


class ConfigError(ValueError):
    """Invalid experiment or generator configuration."""


@dataclass(frozen=True)
class UnlabeledDataset:
    features: np.ndarray
    is_outlier: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.is_outlier is None:
            object.__setattr__(self, "is_outlier", np.zeros(len(self.features), dtype=bool))
        if len(self.is_outlier) != len(self.features):
            raise ValueError("is_outlier and features disagree on row count")

    @property
    def targets(self):
        return None

    def __len__(self):
        return len(self.features)

    def subset(self, idx) -> "UnlabeledDataset":
        return UnlabeledDataset(self.features[idx], self.is_outlier[idx])


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    targets: np.ndarray
    is_outlier: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.is_outlier is None:
            object.__setattr__(self, "is_outlier", np.zeros(len(self.features), dtype=bool))
        if not len(self.features) == len(self.targets) == len(self.is_outlier):
            raise ValueError("features, targets and is_outlier disagree on row count")

    def __len__(self):
        return len(self.features)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.targets[idx], self.is_outlier[idx])


@dataclass(frozen=True)
class ContaminationSpec:
    epsilon: float = 0.0
    ood: str = "none"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1), got {self.epsilon}")


# ---------------------------------------------------------------------------
# generators


def gen_channel_gain(n: int, rng: np.random.Generator) -> UnlabeledDataset:
    """Scalar gains from 0.7 N(0.5, 0.05) + 0.3 N(0.8, 0.02) (variances)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    first = rng.random(n) < 0.7
    z = rng.standard_normal(n)
    x = np.where(first, 0.5 + np.sqrt(0.05) * z, 0.8 + np.sqrt(0.02) * z)
    return UnlabeledDataset(x)


def channel_gain_density(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)

    def npdf(x, m, v):
        return np.exp(-((x - m) ** 2) / (2 * v)) / np.sqrt(2 * np.pi * v)

    return 0.7 * npdf(x, 0.5, 0.05) + 0.3 * npdf(x, 0.8, 0.02)


def _class_means(classes: int, dim: int, separation: float) -> np.ndarray:
    # fixed layout so train, test and every seed share the same task
    layout = np.random.default_rng(20230115)
    means = layout.standard_normal((classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    return separation * means


def gen_classification(n: int, classes: int, rng: np.random.Generator, dim: int = 16,
                       separation: float = 2.0, noise: float = 1.0) -> LabeledDataset:
    """Class-conditional Gaussian features with uniform class prior."""
    if n < 1:
        raise ValueError("n must be >= 1")
    means = _class_means(classes, dim, separation)
    y = rng.integers(0, classes, size=n)
    x = means[y] + noise * rng.standard_normal((n, dim))
    return LabeledDataset(x, y)


ANCHOR_X = np.linspace(-0.2, 1.2, 8)
ANCHOR_Y = 0.5


def _rssi(pos: np.ndarray, rng: np.random.Generator, shadowing: float, exponent: float) -> np.ndarray:
    d = np.hypot(pos[:, :1] - ANCHOR_X[None, :], pos[:, 1:2] - ANCHOR_Y)
    # log-distance pathloss, scaled to roughly unit range
    signal = -exponent * np.log10(d + 0.05)
    return signal + shadowing * rng.standard_normal(signal.shape)


def gen_localization(n: int, rng: np.random.Generator, shadowing: float = 0.1,
                     exponent: float = 2.0) -> LabeledDataset:
    """Positions uniform in the unit square; features are per-anchor RSSI.

    The eight anchors sit on the horizontal line y = 0.5, so every position
    and its mirror image across that line share a signature. The inverse
    problem is therefore bimodal away from the line.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    pos = rng.random((n, 2))
    return LabeledDataset(_rssi(pos, rng, shadowing, exponent), pos)


SAMPLE_SPACING_NS = 10.0


def gen_multipath(n: int, delay_spread: float, rng: np.random.Generator, length: int = 128,
                  amplitude: float = 0.15) -> UnlabeledDataset:
    """Magnitudes of tapped-delay-line impulse responses.

    Tap k (spaced 10 ns) has a complex Gaussian gain whose power decays as
    exp(-10 k / delay_spread), so the mean energy-decay constant is
    proportional to ``delay_spread`` (in ns).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    k = np.arange(length)
    power = np.exp(-k * SAMPLE_SPACING_NS / delay_spread)
    g = (rng.standard_normal((n, length)) + 1j * rng.standard_normal((n, length))) / np.sqrt(2.0)
    return UnlabeledDataset(amplitude * np.abs(g) * np.sqrt(power))


# ---------------------------------------------------------------------------
# contamination


def _interference(ds, mask, rng, other_class=True, **_):
    """Sum a randomly chosen other sample onto the feature vector.

    With labels and ``other_class`` the interferer comes from a different
    class than the victim.
    """
    n = len(ds)
    if n < 2:
        return ds
    labels = getattr(ds, "targets", None)
    if labels is not None and other_class:
        labels = np.asarray(labels)
        partner = np.empty(n, dtype=np.int64)
        for i in np.flatnonzero(mask):
            pool = np.flatnonzero(labels != labels[i])
            partner[i] = rng.choice(pool) if pool.size else rng.integers(0, n)
    else:
        partner = rng.integers(0, n - 1, size=n)
        partner = partner + (partner >= np.arange(n))
    x = ds.features.copy()
    x[mask] = ds.features[mask] + ds.features[partner[mask]]
    return replace(ds, features=x)


def _uniform_target(ds, mask, rng, low=0.0, high=1.0, **_):
    y = np.array(ds.targets, dtype=np.float64, copy=True)
    y[mask] = rng.uniform(low, high, size=(int(mask.sum()),) + y.shape[1:])
    return replace(ds, targets=y)


def _delay_spread(ds, mask, rng, delay_spread=100.0, factor=3.0, **kw):
    x = ds.features.copy()
    k = int(mask.sum())
    if k:
        x[mask] = gen_multipath(k, factor * delay_spread, rng, length=x.shape[1], **kw).features
    return replace(ds, features=x)


def _fixed_points(ds, mask, rng, value=-1.0, **_):
    x = np.array(ds.features, dtype=np.float64, copy=True)
    x[mask] = value
    return replace(ds, features=x)


OOD_GENERATORS: dict[str, Callable] = {
    "interference": _interference,
    "uniform-target": _uniform_target,
    "delay-spread": _delay_spread,
    "fixed": _fixed_points,
}


def contaminate(dataset, spec: ContaminationSpec, rng: np.random.Generator):
    """Independently replace or perturb each row with probability ε."""
    if spec.ood not in OOD_GENERATORS and not (spec.ood == "none" and spec.epsilon == 0):
        raise ConfigError(f"unknown OOD generator {spec.ood!r}; known: {sorted(OOD_GENERATORS)}")
    mask = rng.random(len(dataset)) < spec.epsilon
    if spec.ood == "none" or not mask.any():
        return replace(dataset, is_outlier=np.zeros(len(dataset), dtype=bool))
    out = OOD_GENERATORS[spec.ood](dataset, mask, rng, **spec.params)
    return replace(out, is_outlier=mask.copy())


def append_points(dataset: UnlabeledDataset, values) -> UnlabeledDataset:
    """Append explicitly placed outliers (flagged) to a 1-d dataset."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    return UnlabeledDataset(np.concatenate([dataset.features, values]),
                            np.concatenate([dataset.is_outlier, np.ones(values.size, dtype=bool)]))


def split(dataset, rng: np.random.Generator, train_fraction: float = 0.5):
    """Random train/test split; the test part is what callers keep clean."""
    n = len(dataset)
    perm = rng.permutation(n)
    k = int(round(train_fraction * n))
    return dataset.subset(np.sort(perm[:k])), dataset.subset(np.sort(perm[k:]))


# ---------------------------------------------------------------------------
# CSV round trip


def to_csv(dataset, path: str | Path) -> None:
    """Write features, then targets, then is_outlier; one header row."""
    x = np.asarray(dataset.features, dtype=np.float64).reshape(len(dataset), -1)
    cols = [f"x{i}" for i in range(x.shape[1])]
    parts = [x]
    if dataset.targets is not None:
        y = np.asarray(dataset.targets).reshape(len(dataset), -1)
        cols += [f"y{i}" for i in range(y.shape[1])]
        parts.append(y)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + ["is_outlier"])
        for row, flag in zip(np.hstack(parts) if len(parts) > 1 else x, dataset.is_outlier):
            w.writerow([repr(float(v)) for v in row] + [int(flag)])


def from_csv(path: str | Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    arr = np.array([[float(v) for v in r] for r in body]).reshape(len(body), len(header))
    xi = [i for i, h in enumerate(header) if h.startswith("x")]
    yi = [i for i, h in enumerate(header) if h.startswith("y")]
    flags = arr[:, header.index("is_outlier")].astype(bool)
    x = arr[:, xi]
    if not yi:
        return UnlabeledDataset(x[:, 0] if x.shape[1] == 1 else x, flags)
    y = arr[:, yi]
    return LabeledDataset(x, y[:, 0] if y.shape[1] == 1 else y, flags)
