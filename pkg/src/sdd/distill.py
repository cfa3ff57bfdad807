"""Distilling a frozen denoiser into a one-pass residual manipulator.

The denoiser's Jacobian is skipped: at the manipulated point ``x_hat`` the
injected gradient is ``w(t) * (eps_theta(x_t, t, c) - eps)`` plus the L2
preservation term, and only the manipulator's own layers are
back-propagated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .diffusion import Denoiser, NoiseSchedule, forward_sample, predict_eps
from .errors import ConfigError, ShapeError, TrainingError
from .hqs import HQSProfile, TimestepSet
from .numerics import (AdamState, Mlp, RngStream, adam_init, adam_step, clip_grads, init_mlp,
                       mlp_forward, mlp_forward_backward)
from .worlds import LabeledBatch, MixtureWorld, sample_world

__all__ = [
    "Manipulator",
    "init_manipulator",
    "manipulate",
    "Selected",
    "Random",
    "Descending",
    "Fixed",
    "LargestHQS",
    "Strategy",
    "strategy_from_tag",
    "DistillConfig",
    "sds_gradient",
    "preservation_gradient",
    "pick_timestep",
    "manipulator_grads",
    "distill_iteration",
    "fit_manipulator",
    "train_manipulator",
    "HISTORY_HEADER",
]

HISTORY_HEADER = ["iter", "t", "sds_norm", "reg_norm", "mean_displacement"]
WEIGHT_RULES = ("unit", "sqrt_alpha_bar")


@dataclass(frozen=True, eq=False)
class Manipulator:
    """``f(y) = y + residual(y)``."""

    residual: Mlp

    def __post_init__(self):
        if self.residual.in_dim != self.residual.out_dim:
            raise ShapeError("residual net must map D to D")

    @property
    def dim(self) -> int:
        return self.residual.in_dim

    @property
    def n_params(self) -> int:
        return self.residual.n_params

    def to_dict(self) -> dict:
        return {"format": "sdd-manip-v1", "residual": self.residual.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "Manipulator":
        if doc.get("format") != "sdd-manip-v1":
            raise ConfigError(f"not an sdd-manip-v1 document (format={doc.get('format')!r})")
        return cls(Mlp.from_dict(doc["residual"]))


def init_manipulator(dim: int, rng: RngStream, hidden: int = 64, n_layers: int = 4,
                     activation: str = "silu") -> Manipulator:
    """Random hidden layers and a zero output layer, so training starts at the identity."""
    if n_layers < 1:
        raise ConfigError("manipulator needs at least one layer")
    sizes = [dim] + [hidden] * (n_layers - 1) + [dim]
    return Manipulator(init_mlp(sizes, rng, activation, zero_last=True))


def manipulate(m: Manipulator, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y + mlp_forward(m.residual, y)


# --------------------------------------------------------------------------
# timestep strategies
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Selected:
    """Uniform over a selected timestep set."""

    timesteps: TimestepSet

    def __post_init__(self):
        if len(self.timesteps) == 0:
            raise ConfigError("selected timestep set is empty")

    @property
    def tag(self) -> str:
        ts = self.timesteps
        return f"selected_xi{ts.param:g}" if ts.origin == "threshold" else f"top{int(ts.param)}"


@dataclass(frozen=True)
class Random:
    """Uniform over all timesteps."""

    tag = "random"


@dataclass(frozen=True)
class Descending:
    """Anneal from T down to 1 over the run."""

    tag = "descending"


@dataclass(frozen=True)
class Fixed:
    t: int

    @property
    def tag(self) -> str:
        return f"fixed_{self.t}"


@dataclass(frozen=True, eq=False)
class LargestHQS:
    """Always the single best-scoring timestep."""

    profile: HQSProfile
    tag = "largest_hqs"


Strategy = Union[Selected, Random, Descending, Fixed, LargestHQS]


def strategy_from_tag(tag: str, profile: HQSProfile | None = None, xi: float | None = None,
                      t: int | None = None) -> Strategy:
    """Build a strategy from its name; HQS-based ones need ``profile``."""
    from .hqs import select_timesteps

    if tag == "random":
        return Random()
    if tag == "descending":
        return Descending()
    if tag == "fixed":
        if t is None:
            raise ConfigError("fixed strategy needs t")
        return Fixed(int(t))
    if tag in ("largest_hqs", "selected"):
        if profile is None:
            raise ConfigError(f"{tag} strategy needs an HQS profile")
        if tag == "largest_hqs":
            return LargestHQS(profile)
        return Selected(select_timesteps(profile, 0.0 if xi is None else xi))
    raise ConfigError(f"unknown strategy {tag!r}")


def pick_timestep(strategy: Strategy, iteration: int, total_iterations: int, T: int,
                  rng: RngStream) -> int:
    if isinstance(strategy, Selected):
        ts = strategy.timesteps.timesteps
        return int(ts[int(rng.integers(0, len(ts), 1)[0])])
    if isinstance(strategy, Random):
        return int(rng.integers(1, T + 1, 1)[0])
    if isinstance(strategy, Descending):
        t = math.ceil(T * (1.0 - iteration / max(total_iterations, 1)))
        return min(max(t, 1), T)
    if isinstance(strategy, Fixed):
        if not 1 <= strategy.t <= T:
            raise ConfigError(f"fixed timestep {strategy.t} outside 1..{T}")
        return strategy.t
    if isinstance(strategy, LargestHQS):
        return strategy.profile.argmax()
    raise ConfigError(f"unknown strategy {strategy!r}")


# --------------------------------------------------------------------------
# gradients and training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DistillConfig:
    iterations: int = 2000
    lr: float = 1e-2
    lambda_reg: float = 0.1
    clip_norm: float | None = 1.0
    batch: int = 64
    sds_weight_rule: str = "unit"
    hidden: int = 64
    n_layers: int = 4

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("distill.iterations must be non-negative")
        if self.batch < 1:
            raise ConfigError("distill.batch must be at least 1")
        if self.lambda_reg < 0:
            raise ConfigError("distill.lambda_reg must be non-negative")
        if self.sds_weight_rule not in WEIGHT_RULES:
            raise ConfigError(f"distill.sds_weight_rule must be one of {WEIGHT_RULES}")


def sds_gradient(d: Denoiser, s: NoiseSchedule, x_hat, t: int, cond, eps,
                 rule: str = "unit") -> np.ndarray:
    """``w(t) * (eps_theta(x_t, t, c) - eps)`` at ``x_hat``, denoiser Jacobian skipped."""
    if rule not in WEIGHT_RULES:
        raise ConfigError(f"unknown weight rule {rule!r}")
    eps = np.asarray(eps, dtype=np.float64)
    x_t = forward_sample(s, x_hat, t, eps)
    g = predict_eps(d, x_t, t, cond) - eps
    if rule == "sqrt_alpha_bar":
        g = math.sqrt(float(s.alpha_bar(t))) * g
    return g


def preservation_gradient(x_hat, y, lam: float) -> np.ndarray:
    """Gradient of ``lam * ||x_hat - y||^2``."""
    return 2.0 * lam * (np.asarray(x_hat, dtype=np.float64) - np.asarray(y, dtype=np.float64))


def manipulator_grads(m: Manipulator, d: Denoiser, s: NoiseSchedule, ys, target, t: int,
                      eps, cfg: DistillConfig) -> tuple[Mlp, dict]:
    """Parameter gradient of the batch-mean surrogate and per-batch metrics."""
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    n = ys.shape[0]
    parts = {}

    def inject(residual_out):
        x_hat = ys + residual_out
        sds = sds_gradient(d, s, x_hat, t, target, eps, cfg.sds_weight_rule)
        reg = preservation_gradient(x_hat, ys, cfg.lambda_reg)
        parts.update(x_hat=x_hat, sds=sds, reg=reg)
        return (sds + reg) / n

    _, grads, _ = mlp_forward_backward(m.residual, ys, inject)
    disp = parts["x_hat"] - ys
    row_norm = lambda a: np.sqrt(np.sum(a * a, axis=1))
    metrics = {
        "t": int(t),
        "sds_norm": float(np.mean(row_norm(parts["sds"]))),
        "reg_norm": float(np.mean(row_norm(parts["reg"]))),
        "mean_displacement": float(np.mean(row_norm(disp))),
        "reg_loss": float(cfg.lambda_reg * np.mean(np.sum(disp * disp, axis=1))),
    }
    return grads, metrics


def distill_iteration(m: Manipulator, d: Denoiser, s: NoiseSchedule, batch, target, t: int,
                      cfg: DistillConfig, opt: AdamState, rng: RngStream
                      ) -> tuple[Manipulator, AdamState, dict]:
    ys = batch.samples if isinstance(batch, LabeledBatch) else np.atleast_2d(batch)
    eps = rng.normal(ys.shape)
    grads, metrics = manipulator_grads(m, d, s, ys, target, t, eps, cfg)
    grad_norm = clip_grads(grads, math.inf)[1]
    if not math.isfinite(grad_norm) or not math.isfinite(metrics["mean_displacement"]):
        raise TrainingError("non-finite manipulator gradient")
    residual, opt = adam_step(m.residual, grads, opt, cfg.lr, clip_norm=cfg.clip_norm)
    metrics["grad_norm"] = grad_norm
    return Manipulator(residual), opt, metrics


def fit_manipulator(draw: Callable, dim: int, d: Denoiser, s: NoiseSchedule, target,
                    strategy: Strategy, cfg: DistillConfig, rng: RngStream
                    ) -> tuple[Manipulator, list]:
    """Train on batches from ``draw(rng, n)``; returns the manipulator and per-step metrics."""
    m = init_manipulator(dim, rng.fork(0), cfg.hidden, cfg.n_layers)
    opt = adam_init(m.residual)
    history = []
    for it in range(cfg.iterations):
        r = rng.fork(1, it)
        ys = draw(r.fork(0), cfg.batch)
        t = pick_timestep(strategy, it, cfg.iterations, s.T, r.fork(1))
        try:
            m, opt, metrics = distill_iteration(m, d, s, ys, target, t, cfg, opt, r.fork(2))
        except (TrainingError, FloatingPointError) as exc:
            raise TrainingError(f"distillation diverged at iteration {it}: {exc}", it) from exc
        metrics["iter"] = it
        history.append(metrics)
    return m, history


def train_manipulator(w: MixtureWorld, d: Denoiser, s: NoiseSchedule, source, target,
                      strategy: Strategy, cfg: DistillConfig, rng: RngStream
                      ) -> tuple[Manipulator, list]:
    """Fresh source batches every iteration, timesteps from ``strategy``."""
    w.check_condition(source)
    w.check_condition(target)

    def draw(r, n):
        return sample_world(w, source, n, r).samples

    return fit_manipulator(draw, w.dim, d, s, target, strategy, cfg, rng)
