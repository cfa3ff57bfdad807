"""Timestep scoring from input-gradient maps of the denoising loss.

Each gradient map is turned into a softmax confidence map whose entropy, and
the map's L1 norm, are averaged over source samples and noise draws.  Both
curves are min-max normalized across timesteps and combined as
``N_norm - H_norm``; high scores mark timesteps whose guidance is strong and
concentrated.

Scalar reductions use ``math.fsum`` (correctly rounded, order independent) so
profiles are reproducible bit for bit however the work is batched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffusion import Denoiser, NoiseSchedule, forward_sample
from .errors import ConfigError, DomainError, SelectionError, ShapeError
from .numerics import RngStream, mlp_forward_backward
from .serialization import read_csv, write_csv
from .worlds import MixtureWorld, sample_world

__all__ = [
    "GradientMap",
    "HQSProfile",
    "TimestepSet",
    "input_gradient",
    "input_gradients",
    "confidence_map",
    "step_entropy",
    "step_l1",
    "minmax_normalize",
    "hqs_profile",
    "profile_from_samples",
    "select_timesteps",
    "top_k",
    "profile_from_stats",
    "PROFILE_HEADER",
]

PROFILE_HEADER = ["t", "H", "N", "H_norm", "N_norm", "hqs"]


@dataclass(frozen=True)
class GradientMap:
    d: np.ndarray
    t: int
    cond: int


def input_gradients(d: Denoiser, s: NoiseSchedule, ys, t, cond, eps) -> np.ndarray:
    """Rows of ``grad_y ||eps - eps_theta(sqrt(abar) y + sqrt(1-abar) eps, t, c)||^2``.

    The full chain is differentiated, denoiser input-Jacobian included.
    """
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    if ys.shape != eps.shape:
        raise ShapeError(f"samples {ys.shape} and noise {eps.shape} differ")
    x_t = forward_sample(s, ys, t, eps)
    inp = d.trunk_input(x_t, t, cond)
    _, _, in_g = mlp_forward_backward(d.trunk, inp, lambda out: 2.0 * (out - eps))
    scale = np.sqrt(s.alpha_bar(t))
    scale = scale.reshape(-1, 1) if np.ndim(scale) == 1 else scale
    return scale * in_g[:, :d.dim]


def input_gradient(d: Denoiser, s: NoiseSchedule, y, t: int, cond, eps) -> GradientMap:
    g = input_gradients(d, s, np.asarray(y)[None, :], t, cond, np.asarray(eps)[None, :])
    return GradientMap(g[0], int(t), int(cond))


def _vec(g) -> np.ndarray:
    return np.asarray(g.d if isinstance(g, GradientMap) else g, dtype=np.float64).ravel()


def confidence_map(g) -> np.ndarray:
    """Softmax over the signed gradient entries."""
    v = _vec(g)
    e = np.exp(v - np.max(v))
    return e / math.fsum(e.tolist())


def step_entropy(p) -> float:
    """Natural-log entropy with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64).ravel()
    if np.any(p < 0):
        raise DomainError("probability vector has negative entries")
    total = math.fsum(p.tolist())
    if abs(total - 1.0) > 1e-9:
        raise DomainError(f"probability vector sums to {total!r}, not 1")
    pos = p[p > 0]
    return -math.fsum((pos * np.log(pos)).tolist())


def step_l1(g) -> float:
    return math.fsum(np.abs(_vec(g)).tolist())


def minmax_normalize(v) -> np.ndarray:
    """Map to [0, 1]; a constant input carries no ranking and maps to zeros."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or not np.all(np.isfinite(v)):
        raise DomainError("min-max normalization needs finite, nonempty input")
    lo, hi = np.min(v), np.max(v)
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


@dataclass(frozen=True, eq=False)
class HQSProfile:
    cond: int
    H: np.ndarray
    N: np.ndarray
    H_norm: np.ndarray
    N_norm: np.ndarray
    hqs: np.ndarray
    sample_count: int = 0
    eps_count: int = 0
    normalize_per_sample: bool = False

    @property
    def T(self) -> int:
        return len(self.hqs)

    def rows(self):
        for i in range(self.T):
            yield (i + 1, float(self.H[i]), float(self.N[i]), float(self.H_norm[i]),
                   float(self.N_norm[i]), float(self.hqs[i]))

    def argmax(self) -> int:
        """Best timestep; ties go to the smaller t."""
        return int(np.argmax(self.hqs)) + 1

    def to_csv(self, path):
        return write_csv(path, PROFILE_HEADER, self.rows())

    @classmethod
    def from_csv(cls, path, cond: int = -1) -> "HQSProfile":
        header, rows = read_csv(path)
        if header != PROFILE_HEADER:
            raise ConfigError(f"{path}: expected header {','.join(PROFILE_HEADER)}")
        cols = np.array([[float(c) for c in r[1:]] for r in rows])
        if [int(r[0]) for r in rows] != list(range(1, len(rows) + 1)):
            raise ConfigError(f"{path}: timesteps must run 1..T in order")
        return cls(cond, *(cols[:, k].copy() for k in range(5)))

    def equals(self, other: "HQSProfile") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("H", "N", "H_norm", "N_norm", "hqs"))


def _mean(values) -> float:
    return math.fsum(values) / len(values)


def _cells_for_t(d, s, samples, target, n_eps, rng, t, gradient_scale):
    n = samples.shape[0]
    eps = np.stack([rng.fork(t, i, j).normal(d.dim) for i in range(n) for j in range(n_eps)])
    ys = np.repeat(samples, n_eps, axis=0)
    grads = input_gradients(d, s, ys, t, target, eps)
    if gradient_scale != 1.0:
        grads = grads * gradient_scale
    H = np.empty((n, n_eps))
    N = np.empty((n, n_eps))
    for k, g in enumerate(grads):
        i, j = divmod(k, n_eps)
        H[i, j] = step_entropy(confidence_map(g))
        N[i, j] = step_l1(g)
    return H, N


def profile_from_samples(d: Denoiser, s: NoiseSchedule, samples, target: int, n_eps: int,
                         rng: RngStream, normalize_per_sample: bool = False,
                         gradient_scale: float = 1.0, n_jobs: int = 1) -> HQSProfile:
    """Score every timestep on the given source samples.

    Noise for cell ``(t, i, j)`` comes from ``rng.fork(t, i, j)``, so cells are
    independent and ``n_jobs`` does not change the result.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] < 1 or n_eps < 1:
        raise ConfigError("need at least one sample and one noise draw")
    if not gradient_scale > 0:
        raise ConfigError("gradient_scale must be positive")
    ts = range(1, s.T + 1)
    if n_jobs == 1:
        cells = [_cells_for_t(d, s, samples, target, n_eps, rng, t, gradient_scale) for t in ts]
    else:
        from joblib import Parallel, delayed

        cells = Parallel(n_jobs=n_jobs)(
            delayed(_cells_for_t)(d, s, samples, target, n_eps, rng, t, gradient_scale) for t in ts)
    Hc = np.stack([c[0] for c in cells])  # (T, n, n_eps)
    Nc = np.stack([c[1] for c in cells])
    T, n = Hc.shape[0], Hc.shape[1]
    H = np.array([_mean(Hc[t].ravel().tolist()) for t in range(T)])
    N = np.array([_mean(Nc[t].ravel().tolist()) for t in range(T)])
    if normalize_per_sample:
        Hs = np.array([[_mean(Hc[t, i].tolist()) for t in range(T)] for i in range(n)])
        Ns = np.array([[_mean(Nc[t, i].tolist()) for t in range(T)] for i in range(n)])
        Hn = np.stack([minmax_normalize(row) for row in Hs])
        Nn = np.stack([minmax_normalize(row) for row in Ns])
        H_norm = np.array([_mean(Hn[:, t].tolist()) for t in range(T)])
        N_norm = np.array([_mean(Nn[:, t].tolist()) for t in range(T)])
        return HQSProfile(int(target), H, N, H_norm, N_norm, N_norm - H_norm, n, n_eps, True)
    return profile_from_stats(target, H, N, n, n_eps)


def profile_from_stats(cond: int, H, N, sample_count: int = 0, eps_count: int = 0) -> HQSProfile:
    """Normalize mean entropy and L1 across t and take ``N_norm - H_norm``."""
    H = np.asarray(H, dtype=np.float64)
    N = np.asarray(N, dtype=np.float64)
    if H.shape != N.shape or H.ndim != 1:
        raise ShapeError(f"H {H.shape} and N {N.shape} must be matching 1-D arrays")
    H_norm = minmax_normalize(H)
    N_norm = minmax_normalize(N)
    return HQSProfile(int(cond), H, N, H_norm, N_norm, N_norm - H_norm, sample_count, eps_count)


def hqs_profile(d: Denoiser, s: NoiseSchedule, w: MixtureWorld, source: int, target: int,
                n_samples: int = 64, n_eps: int = 8, rng: RngStream | None = None,
                normalize_per_sample: bool = False, gradient_scale: float = 1.0,
                n_jobs: int = 1) -> HQSProfile:
    """Profile for editing ``source`` samples toward ``target``; gradients are
    always conditioned on the target."""
    if n_samples < 1 or n_eps < 1:
        raise ConfigError("n_samples and n_eps must be at least 1")
    rng = RngStream(0) if rng is None else rng
    w.check_condition(target)
    samples = sample_world(w, source, n_samples, rng.fork(0)).samples
    return profile_from_samples(d, s, samples, target, n_eps, rng.fork(1),
                                normalize_per_sample, gradient_scale, n_jobs)


@dataclass(frozen=True)
class TimestepSet:
    timesteps: tuple
    param: float
    origin: str

    def __len__(self):
        return len(self.timesteps)

    def __contains__(self, t):
        return t in self.timesteps


def select_timesteps(p: HQSProfile, xi: float = 0.0) -> TimestepSet:
    """Timesteps whose score is strictly above ``xi``."""
    chosen = tuple(i + 1 for i, h in enumerate(p.hqs) if h > xi)
    if not chosen:
        raise SelectionError(f"no timestep has HQS above xi={xi} (max {np.max(p.hqs):.6g}); "
                             "lower xi or use top_k")
    return TimestepSet(chosen, float(xi), "threshold")


def top_k(p: HQSProfile, k: int) -> TimestepSet:
    """The ``k`` best timesteps, ties broken toward smaller t."""
    if not 1 <= k <= p.T:
        raise ConfigError(f"k must be in 1..{p.T}, got {k}")
    order = sorted(range(p.T), key=lambda i: (-p.hqs[i], i))[:k]
    return TimestepSet(tuple(sorted(i + 1 for i in order)), int(k), "top-k")
