"""Synthetic conditional data: Gaussian modes on a few semantic coordinates,
standard-normal nuisance coordinates, and oracle metrics over both."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConditionError, ConfigError, ShapeError
from .numerics import RngStream

__all__ = [
    "MixtureWorld",
    "LabeledBatch",
    "make_world",
    "sample_world",
    "sample_rows",
    "mode_posterior",
    "alignment_score",
    "fidelity_rmse",
    "nearest_mode",
]

LAYOUTS = ("two-mode", "ring")


@dataclass(frozen=True)
class MixtureWorld:
    """``modes[c]`` lists ``(mean, std)`` pairs for condition ``c``; means have
    ``n_semantic`` entries and cover the leading coordinates."""

    dim: int
    n_semantic: int
    modes: tuple
    layout: str = "two-mode"

    def __post_init__(self):
        if not self.dim >= self.n_semantic >= 1:
            raise ConfigError(f"need D >= S >= 1, got D={self.dim}, S={self.n_semantic}")
        frozen = []
        for c, cond_modes in enumerate(self.modes):
            if not cond_modes:
                raise ConfigError(f"condition {c} has no modes")
            fm = []
            for mean, std in cond_modes:
                mean = np.array(mean, dtype=np.float64)
                if mean.shape != (self.n_semantic,):
                    raise ShapeError(f"condition {c}: mode mean has shape {mean.shape}")
                if not std > 0:
                    raise ConfigError(f"condition {c}: mode std must be positive, got {std}")
                mean.flags.writeable = False
                fm.append((mean, float(std)))
            frozen.append(tuple(fm))
        object.__setattr__(self, "modes", tuple(frozen))

    @property
    def n_conditions(self) -> int:
        return len(self.modes)

    @property
    def n_nuisance(self) -> int:
        return self.dim - self.n_semantic

    def check_condition(self, cond) -> int:
        c = int(cond)
        if not 0 <= c < self.n_conditions:
            raise ConditionError(f"condition {cond} outside 0..{self.n_conditions - 1}")
        return c

    def mode_mean(self, cond, full: bool = False) -> np.ndarray:
        """Mean of the first mode of ``cond``; ``full`` pads nuisance zeros."""
        mean = self.modes[self.check_condition(cond)][0][0]
        if not full:
            return mean
        return np.concatenate([mean, np.zeros(self.n_nuisance)])

    def to_dict(self) -> dict:
        return {
            "layout": self.layout,
            "D": self.dim,
            "S": self.n_semantic,
            "modes": [[{"mean": m.tolist(), "std": s} for m, s in cm] for cm in self.modes],
        }


@dataclass(frozen=True)
class LabeledBatch:
    samples: np.ndarray
    condition: int

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise ShapeError(f"a batch needs at least one row, got shape {self.samples.shape}")

    def __len__(self):
        return self.samples.shape[0]


def make_world(layout: str = "two-mode", D: int = 2, separation: float = 4.0,
               std: float = 0.3, K: int = 2) -> MixtureWorld:
    """Two opposite modes on coordinate 0, or ``K`` modes on a circle of
    radius ``separation`` in the first two coordinates."""
    if D < 2:
        raise ConfigError(f"D must be at least 2, got {D}")
    if not std > 0:
        raise ConfigError(f"std must be positive, got {std}")
    if layout == "two-mode":
        if K != 2:
            raise ConfigError(f"two-mode layout requires K=2, got K={K}")
        half = separation / 2.0
        modes = (((np.array([-half]), std),), ((np.array([half]), std),))
        return MixtureWorld(D, 1, modes, layout)
    if layout == "ring":
        if K < 2:
            raise ConfigError(f"ring layout requires K >= 2, got K={K}")
        modes = []
        for k in range(K):
            angle = 2.0 * math.pi * k / K
            mean = np.array([separation * math.cos(angle), separation * math.sin(angle)])
            modes.append(((mean, std),))
        return MixtureWorld(D, 2, tuple(modes), layout)
    raise ConfigError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")


def sample_rows(w: MixtureWorld, conds, rng: RngStream) -> np.ndarray:
    """One sample per entry of ``conds``; row ``i`` only depends on ``conds[:i+1]``
    through the stream prefix, so growing ``n`` keeps earlier rows fixed."""
    conds = np.asarray(conds, dtype=np.int64)
    n = conds.shape[0]
    for c in np.unique(conds):
        w.check_condition(c)
    pick = rng.fork(0).uniform(n)
    sem = rng.fork(1).normal((n, w.n_semantic))
    nui = rng.fork(2).normal((n, w.n_nuisance))
    means = np.empty((n, w.n_semantic))
    stds = np.empty((n, 1))
    for c in np.unique(conds):
        rows = conds == c
        cm = w.modes[c]
        which = np.minimum((pick[rows] * len(cm)).astype(np.int64), len(cm) - 1)
        means[rows] = np.stack([m for m, _ in cm])[which]
        stds[rows, 0] = np.array([sd for _, sd in cm])[which]
    out = np.empty((n, w.dim))
    out[:, :w.n_semantic] = means + stds * sem
    out[:, w.n_semantic:] = nui
    return out


def sample_world(w: MixtureWorld, cond, n: int, rng: RngStream) -> LabeledBatch:
    c = w.check_condition(cond)
    if n < 1:
        raise ConfigError(f"n must be at least 1, got {n}")
    return LabeledBatch(sample_rows(w, np.full(n, c), rng), c)


def _log_density(w: MixtureWorld, xs: np.ndarray) -> np.ndarray:
    """Per-condition log density of the semantic coordinates, shape (n, K)."""
    S = w.n_semantic
    out = np.empty((xs.shape[0], w.n_conditions))
    for c, cm in enumerate(w.modes):
        comps = []
        for mean, std in cm:
            d2 = np.sum((xs - mean) ** 2, axis=1)
            comps.append(-0.5 * d2 / std**2 - S * math.log(std) - 0.5 * S * math.log(2 * math.pi))
        out[:, c] = logsumexp(np.stack(comps, axis=1), axis=1) - math.log(len(cm))
    return out


def mode_posterior(w: MixtureWorld, x) -> np.ndarray:
    """Posterior over conditions under equal priors, from semantic coordinates."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    if x2.shape[1] != w.dim:
        raise ShapeError(f"expected dimension {w.dim}, got {x2.shape[1]}")
    logp = _log_density(w, x2[:, :w.n_semantic])
    post = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    post /= post.sum(axis=1, keepdims=True)
    return post[0] if single else post


def alignment_score(w: MixtureWorld, samples, target) -> float:
    """Mean posterior probability of ``target`` over the batch."""
    t = w.check_condition(target)
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] == 0:
        raise ShapeError("alignment needs a nonempty batch")
    probs = mode_posterior(w, samples)[:, t]
    return math.fsum(probs.tolist()) / len(probs)


def fidelity_rmse(inputs, outputs, w: MixtureWorld) -> float:
    """RMS difference over nuisance coordinates only."""
    a = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    b = np.atleast_2d(np.asarray(outputs, dtype=np.float64))
    if a.shape != b.shape:
        raise ShapeError(f"inputs {a.shape} and outputs {b.shape} differ")
    diff = (b - a)[:, w.n_semantic:]
    if diff.size == 0:
        return 0.0
    return math.sqrt(math.fsum((diff * diff).ravel().tolist()) / diff.size)


def nearest_mode(w: MixtureWorld, samples) -> np.ndarray:
    """Index of the condition owning the closest mode mean, per row."""
    xs = np.atleast_2d(np.asarray(samples, dtype=np.float64))[:, :w.n_semantic]
    best = np.full(xs.shape[0], np.inf)
    idx = np.zeros(xs.shape[0], dtype=np.int64)
    for c, cm in enumerate(w.modes):
        for mean, _ in cm:
            d2 = np.sum((xs - mean) ** 2, axis=1)
            better = d2 < best
            best[better] = d2[better]
            idx[better] = c
    return idx
