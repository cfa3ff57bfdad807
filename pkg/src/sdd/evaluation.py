"""Baselines and comparisons: noise-then-denoise editing, a Gaussian Frechet
distance, the timestep-strategy ablation and the amortized cost model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffusion import Denoiser, NoiseSchedule, ancestral, forward_sample, predict_eps
from .distill import DistillConfig, Strategy, manipulate, train_manipulator
from .errors import ConfigError, DomainError, ShapeError
from .numerics import RngStream
from .serialization import write_csv
from .worlds import MixtureWorld, alignment_score, fidelity_rmse, sample_world

__all__ = [
    "frechet_gaussian",
    "noise_denoise_edit",
    "TradeoffPoint",
    "tradeoff_curve",
    "CostParams",
    "cost_diffusion",
    "cost_sdd",
    "break_even_m",
    "AblationRow",
    "AblationReport",
    "run_ablation",
    "TRADEOFF_HEADER",
    "ABLATION_HEADER",
]

TRADEOFF_HEADER = ["alpha", "alignment", "fidelity_rmse", "frechet"]
ABLATION_HEADER = ["strategy", "seed", "alignment", "fidelity_rmse", "frechet", "iterations"]
COV_JITTER = 1e-8


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_gaussian(a, b) -> float:
    """Frechet distance between Gaussians fitted to two sample sets.

    ``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``, with the trace of
    the square root taken as ``tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))`` so only
    symmetric eigendecompositions are needed.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    D = a.shape[1]
    if a.shape[0] < D + 1 or b.shape[0] < D + 1:
        raise ShapeError(f"need at least D+1={D + 1} rows per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    jitter = COV_JITTER * np.eye(D)
    cov_a = np.cov(a, rowvar=False).reshape(D, D) + jitter
    cov_b = np.cov(b, rowvar=False).reshape(D, D) + jitter
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = float(np.sum(np.sqrt(np.clip(vals, 0.0, None))))
    diff = mu_a - mu_b
    dist = float(diff @ diff) + float(np.trace(cov_a) + np.trace(cov_b)) - 2.0 * tr_sqrt
    return max(dist, 0.0)


def noise_denoise_edit(d: Denoiser, s: NoiseSchedule, y, target, alpha: float,
                       rng: RngStream) -> np.ndarray:
    """Noise ``y`` to ``t* = round(alpha * T)`` then denoise toward ``target``."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    y = np.asarray(y, dtype=np.float64)
    t_star = min(max(int(math.floor(alpha * s.T + 0.5)), 0), s.T)
    if t_star == 0:
        return y.copy()
    d.check_condition(target)
    x = forward_sample(s, y, t_star, rng.fork(0).normal(y.shape))
    return ancestral(lambda x_, t: predict_eps(d, x_, t, target), s, x, t_star, rng.fork(1))


@dataclass(frozen=True)
class TradeoffPoint:
    alpha: float
    alignment: float
    fidelity_rmse: float
    frechet: float


def tradeoff_curve(d: Denoiser, s: NoiseSchedule, w: MixtureWorld, source, target,
                   alphas, n: int, rng: RngStream) -> list[TradeoffPoint]:
    """Edit one source batch at each noise level.

    Every level reuses the same noise stream, so neighbouring levels differ
    only through ``alpha``.
    """
    alphas = list(alphas)
    if not alphas:
        raise ConfigError("alpha list is empty")
    src = sample_world(w, source, n, rng.fork(0)).samples
    ref = sample_world(w, target, n, rng.fork(1)).samples
    points = []
    for alpha in alphas:
        out = noise_denoise_edit(d, s, src, target, float(alpha), rng.fork(2))
        points.append(TradeoffPoint(float(alpha), alignment_score(w, out, target),
                                    fidelity_rmse(src, out, w), frechet_gaussian(out, ref)))
    return points


def write_tradeoff_csv(path, points):
    return write_csv(path, TRADEOFF_HEADER,
                     [(p.alpha, p.alignment, p.fidelity_rmse, p.frechet) for p in points])


# --------------------------------------------------------------------------
# cost model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CostParams:
    """``m`` images per prompt, ``n`` prompts, per-unit times in any common unit."""

    m: float
    n: float
    tau_diff_infer: float
    tau_sdd_train: float
    tau_sdd_infer: float

    def __post_init__(self):
        for name in ("m", "n", "tau_diff_infer", "tau_sdd_train", "tau_sdd_infer"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


def cost_diffusion(p: CostParams) -> float:
    """Per-image diffusion editing: every image pays a full inference."""
    return p.m * p.n * p.tau_diff_infer


def cost_sdd(p: CostParams) -> float:
    """One manipulator per prompt, then one cheap pass per image."""
    return p.n * p.tau_sdd_train + p.n * p.m * p.tau_sdd_infer


def break_even_m(p: CostParams) -> float:
    """Images per prompt beyond which distillation is cheaper."""
    gap = p.tau_diff_infer - p.tau_sdd_infer
    if not gap > 0:
        raise DomainError("SDD never cheaper per image: tau_diff_infer must exceed tau_sdd_infer")
    return p.tau_sdd_train / gap


# --------------------------------------------------------------------------
# ablation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    strategy: str
    seed: int
    alignment: float
    fidelity_rmse: float
    frechet: float
    iterations: int

    def values(self):
        return (self.strategy, self.seed, self.alignment, self.fidelity_rmse,
                self.frechet, self.iterations)


@dataclass(frozen=True)
class AblationReport:
    rows: tuple

    def by_strategy(self) -> dict:
        out: dict = {}
        for r in self.rows:
            out.setdefault(r.strategy, []).append(r)
        return out

    def mean(self, strategy: str, field: str = "alignment") -> float:
        vals = [getattr(r, field) for r in self.rows if r.strategy == strategy]
        if not vals:
            raise KeyError(strategy)
        return math.fsum(vals) / len(vals)

    def to_csv(self, path):
        return write_csv(path, ABLATION_HEADER, [r.values() for r in self.rows])


def _ablation_cell(w, d, s, source, target, strategy, seed, cfg, n_eval):
    root = RngStream(seed)
    m, _ = train_manipulator(w, d, s, source, target, strategy, cfg, root.fork(1))
    held = sample_world(w, source, n_eval, root.fork(2)).samples
    ref = sample_world(w, target, n_eval, root.fork(3)).samples
    out = manipulate(m, held)
    return AblationRow(strategy.tag, int(seed), alignment_score(w, out, target),
                       fidelity_rmse(held, out, w), frechet_gaussian(out, ref), cfg.iterations)


def run_ablation(w: MixtureWorld, d: Denoiser, s: NoiseSchedule, source, target,
                 strategies: list, seeds: list, cfg: DistillConfig, n_eval: int = 500,
                 n_jobs: int = 1) -> AblationReport:
    """One manipulator per (strategy, seed) with identical settings otherwise."""
    if not strategies or not seeds:
        raise ConfigError("ablation needs at least one strategy and one seed")
    tags = [st.tag for st in strategies]
    if len(set(tags)) != len(tags):
        raise ConfigError(f"duplicate strategy tags in {tags}")
    cells = [(st, int(seed)) for st in strategies for seed in seeds]
    if n_jobs == 1:
        rows = [_ablation_cell(w, d, s, source, target, st, seed, cfg, n_eval) for st, seed in cells]
    else:
        from joblib import Parallel, delayed

        rows = Parallel(n_jobs=n_jobs)(
            delayed(_ablation_cell)(w, d, s, source, target, st, seed, cfg, n_eval)
            for st, seed in cells)
    return AblationReport(tuple(sorted(rows, key=lambda r: (r.strategy, r.seed))))
