"""Noise schedule, forward process, conditional noise predictor and ancestral
sampling.  Timesteps are 1-based: ``t`` runs over ``1..T`` and
``alpha_bar(0) == 1``."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConditionError, ConfigError, ShapeError, TimestepError, TrainingError
from .numerics import Mlp, RngStream, adam_update, init_mlp, mlp_forward, mlp_forward_backward
from .worlds import MixtureWorld, sample_rows

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "forward_sample",
    "Denoiser",
    "DenoiserConfig",
    "DenoiserGrads",
    "init_denoiser",
    "predict_eps",
    "elbo_step",
    "train_denoiser",
    "fit_denoiser",
    "PosteriorStats",
    "posterior_stats",
    "ancestral",
    "reverse_sample",
]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_min: float
    beta_max: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def check_t(self, t, allow_zero: bool = False):
        lo = 0 if allow_zero else 1
        ts = np.asarray(t)
        if ts.size == 0 or np.any(ts < lo) or np.any(ts > self.T) or np.any(ts != np.floor(ts)):
            raise TimestepError(f"timestep {t} outside {lo}..{self.T}")
        return ts.astype(np.int64)

    def beta(self, t):
        return self.betas[self.check_t(t) - 1]

    def alpha(self, t):
        return self.alphas[self.check_t(t) - 1]

    def alpha_bar(self, t):
        ts = self.check_t(t, allow_zero=True)
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[ts]

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_min": self.beta_min, "beta_max": self.beta_max}


def make_schedule(T: int = 100, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp from ``beta_min`` at t=1 to ``beta_max`` at t=T."""
    if T < 2:
        raise ConfigError(f"T must be at least 2, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    betas = np.linspace(beta_min, beta_max, T)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for a in (betas, alphas, alpha_bars):
        a.flags.writeable = False
    return NoiseSchedule(int(T), float(beta_min), float(beta_max), betas, alphas, alpha_bars)


def _col(v, n_rows):
    """Per-row scalar broadcastable against an (n, D) array."""
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(-1, 1) if v.ndim == 1 and n_rows is not None else v


def forward_sample(s: NoiseSchedule, x0, t, eps) -> np.ndarray:
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``; ``t`` may be per-row."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and eps {eps.shape} differ")
    ab = _col(s.alpha_bar(s.check_t(t)), x0.shape[0] if x0.ndim == 2 else None)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# --------------------------------------------------------------------------
# denoiser
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DenoiserConfig:
    hidden: int = 64
    n_hidden: int = 3
    frequencies: int = 8
    cond_dim: int = 8
    iterations: int = 5000
    batch: int = 128
    lr: float = 1e-3
    activation: str = "silu"

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("denoiser.iterations must be non-negative")
        if self.batch < 1:
            raise ConfigError("denoiser.batch must be at least 1")
        if self.frequencies < 1 or self.cond_dim < 1 or self.hidden < 1:
            raise ConfigError("denoiser sizes must be positive")


@dataclass(frozen=True, eq=False)
class Denoiser:
    """Noise predictor over ``[x_t, sin/cos(t * freqs), cond_table[c]]``."""

    trunk: Mlp
    cond_table: np.ndarray
    frequencies: int
    schedule: NoiseSchedule
    loss_curve: tuple = field(default=(), repr=False)

    def __post_init__(self):
        table = np.array(self.cond_table, dtype=np.float64)
        if table.ndim != 2:
            raise ShapeError("cond_table must be 2-D")
        table.flags.writeable = False
        object.__setattr__(self, "cond_table", table)
        expected = self.trunk.out_dim + 2 * self.frequencies + table.shape[1]
        if self.trunk.in_dim != expected:
            raise ShapeError(f"trunk takes {self.trunk.in_dim} inputs, embeddings need {expected}")

    @property
    def dim(self) -> int:
        return self.trunk.out_dim

    @property
    def n_conditions(self) -> int:
        return self.cond_table.shape[0]

    @property
    def cond_dim(self) -> int:
        return self.cond_table.shape[1]

    def omegas(self) -> np.ndarray:
        T = self.schedule.T
        k = np.arange(self.frequencies)
        return (math.pi / (2.0 * T)) * float(T) ** (k / max(self.frequencies - 1, 1))

    def time_embedding(self, t) -> np.ndarray:
        ph = np.asarray(t, dtype=np.float64)[..., None] * self.omegas()
        return np.concatenate([np.sin(ph), np.cos(ph)], axis=-1)

    def check_condition(self, cond):
        c = np.asarray(cond)
        if np.any(c < 0) or np.any(c >= self.n_conditions) or np.any(c != np.floor(c)):
            raise ConditionError(f"condition {cond} unknown to a table of {self.n_conditions}")
        return c.astype(np.int64)

    def trunk_input(self, x_t, t, cond) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=np.float64)
        single = x_t.ndim == 1
        x2 = x_t.reshape(1, -1) if single else x_t
        if x2.shape[1] != self.dim:
            raise ShapeError(f"x_t has dimension {x2.shape[1]}, denoiser expects {self.dim}")
        n = x2.shape[0]
        ts = np.broadcast_to(self.schedule.check_t(t), (n,))
        cs = np.broadcast_to(self.check_condition(cond), (n,))
        return np.concatenate([x2, self.time_embedding(ts), self.cond_table[cs]], axis=1)

    def to_dict(self) -> dict:
        return {
            "format": "sdd-denoiser-v1",
            "schedule": self.schedule.to_dict(),
            "trunk": self.trunk.to_dict(),
            "cond_table": self.cond_table.tolist(),
            "t_embed": {"frequencies": self.frequencies},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Denoiser":
        if doc.get("format") != "sdd-denoiser-v1":
            raise ConfigError(f"not an sdd-denoiser-v1 document (format={doc.get('format')!r})")
        sch = doc["schedule"]
        return cls(Mlp.from_dict(doc["trunk"]), np.array(doc["cond_table"], dtype=np.float64),
                   int(doc["t_embed"]["frequencies"]),
                   make_schedule(sch["T"], sch["beta_min"], sch["beta_max"]))


@dataclass(frozen=True)
class DenoiserGrads:
    trunk: Mlp
    cond_table: np.ndarray


def init_denoiser(dim: int, n_conditions: int, s: NoiseSchedule, cfg: DenoiserConfig,
                  rng: RngStream, zero: bool = False) -> Denoiser:
    sizes = [dim + 2 * cfg.frequencies + cfg.cond_dim] + [cfg.hidden] * cfg.n_hidden + [dim]
    trunk = init_mlp(sizes, rng.fork(0), cfg.activation)
    if zero:
        trunk = trunk.map(np.zeros_like)
    table = rng.fork(1).normal((n_conditions, cfg.cond_dim))
    return Denoiser(trunk, table, cfg.frequencies, s)


def predict_eps(d: Denoiser, x_t, t, cond) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.float64)
    out = mlp_forward(d.trunk, d.trunk_input(x_t, t, cond))
    return out[0] if x_t.ndim == 1 else out


def elbo_step(d: Denoiser, s: NoiseSchedule, x0, t, cond, eps) -> tuple[float, DenoiserGrads]:
    """Squared residual ``||eps - eps_theta(x_t, t, c)||^2`` and its parameter gradient.

    For a batch the loss and gradients are means over rows.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    single = x0.ndim == 1
    x_t = forward_sample(s, x0, t, eps)
    inp = d.trunk_input(x_t, t, cond)
    n = inp.shape[0]
    eps2 = eps.reshape(n, -1)
    resid = None

    def out_grad(out):
        nonlocal resid
        resid = out - eps2
        return 2.0 * resid / n

    _, trunk_g, in_g = mlp_forward_backward(d.trunk, inp, out_grad)
    row_loss = np.sum(resid * resid, axis=1)
    loss = float(row_loss[0]) if single else math.fsum(row_loss.tolist()) / n
    cs = np.broadcast_to(d.check_condition(cond), (n,))
    table_g = np.zeros_like(d.cond_table)
    np.add.at(table_g, cs, in_g[:, d.dim + 2 * d.frequencies:])
    return loss, DenoiserGrads(trunk_g, table_g)


def fit_denoiser(draw: Callable, dim: int, n_conditions: int, s: NoiseSchedule,
                 cfg: DenoiserConfig, rng: RngStream) -> Denoiser:
    """Train on minibatches from ``draw(rng, batch) -> (x0, conds)``."""
    d = init_denoiser(dim, n_conditions, s, cfg, rng.fork(0))
    params = [a for _, a in d.trunk.tensors()] + [d.cond_table]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    losses = []
    for it in range(cfg.iterations):
        r = rng.fork(1, it)
        x0, conds = draw(r.fork(0), cfg.batch)
        t = r.fork(1).integers(1, s.T + 1, cfg.batch)
        eps = r.fork(2).normal((cfg.batch, dim))
        loss, g = elbo_step(d, s, x0, t, conds, eps)
        if not math.isfinite(loss):
            raise TrainingError(f"denoiser loss became non-finite at iteration {it}", it)
        grads = [a for _, a in g.trunk.tensors()] + [g.cond_table]
        params, m, v = adam_update(params, grads, m, v, it + 1, cfg.lr)
        it_params = iter(params[:-1])
        trunk = Mlp(tuple((next(it_params), next(it_params)) for _ in d.trunk.layers),
                    d.trunk.activation)
        d = Denoiser(trunk, params[-1], d.frequencies, s)
        losses.append(loss)
    return Denoiser(d.trunk, d.cond_table, d.frequencies, s, tuple(losses))


def train_denoiser(world: MixtureWorld, s: NoiseSchedule, cfg: DenoiserConfig,
                   rng: RngStream) -> Denoiser:
    """Fit on fresh world draws: uniform condition, uniform t, fresh noise each step."""
    if world.n_conditions < 1:
        raise ConfigError("world has no conditions")

    def draw(r, n):
        conds = r.fork(0).integers(0, world.n_conditions, n)
        return sample_rows(world, conds, r.fork(1)), conds

    return fit_denoiser(draw, world.dim, world.n_conditions, s, cfg, rng)


# --------------------------------------------------------------------------
# reverse process
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PosteriorStats:
    mean: np.ndarray
    variance: float


def posterior_stats(s: NoiseSchedule, x_t, eps_hat, t: int) -> PosteriorStats:
    t = int(s.check_t(t))
    beta = s.betas[t - 1]
    ab = s.alpha_bars[t - 1]
    ab_prev = 1.0 if t == 1 else s.alpha_bars[t - 2]
    x_t = np.asarray(x_t, dtype=np.float64)
    mean = (x_t - beta / math.sqrt(1.0 - ab) * np.asarray(eps_hat)) / math.sqrt(s.alphas[t - 1])
    var = (1.0 - ab_prev) / (1.0 - ab) * beta
    return PosteriorStats(mean, float(var))


def ancestral(eps_fn: Callable, s: NoiseSchedule, x_start, t_start: int,
              rng: RngStream) -> np.ndarray:
    """Run ``x_{t-1} ~ N(mu_t, beta_tilde_t)`` from ``t_start`` down to 0.

    ``eps_fn(x_t, t)`` supplies the noise estimate.
    """
    x = np.asarray(x_start, dtype=np.float64)
    for t in range(int(t_start), 0, -1):
        st = posterior_stats(s, x, eps_fn(x, t), t)
        x = st.mean
        if t > 1:
            x = x + math.sqrt(st.variance) * rng.fork(t).normal(x.shape)
    return x


def reverse_sample(d: Denoiser, s: NoiseSchedule, cond, rng: RngStream,
                   n: int | None = None) -> np.ndarray:
    """Ancestral sample(s) for ``cond``; ``n=None`` returns one vector."""
    d.check_condition(cond)
    shape = d.dim if n is None else (n, d.dim)
    x_T = rng.fork(0).normal(shape)
    return ancestral(lambda x, t: predict_eps(d, x, t, cond), s, x_T, s.T, rng.fork(1))
