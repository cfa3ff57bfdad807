"""scikit-learn style wrappers around the functional core.

``DiffusionTeacher`` fits a conditional denoiser on labelled rows,
``HQSSelector`` scores timesteps for a source batch, and ``SelectiveDistiller``
is a transformer whose ``transform`` applies the learned one-pass edit.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .diffusion import (Denoiser, DenoiserConfig, elbo_step, fit_denoiser, make_schedule,
                        predict_eps, reverse_sample)
from .distill import DistillConfig, Selected, fit_manipulator, manipulate, strategy_from_tag
from .errors import ConditionError, ConfigError
from .hqs import profile_from_samples, select_timesteps, top_k
from .numerics import RngStream


def _rng(random_state) -> RngStream:
    if isinstance(random_state, RngStream):
        return random_state
    if random_state is None:
        return RngStream(0)
    if isinstance(random_state, (int, np.integer)):
        return RngStream(int(random_state))
    raise ConfigError("random_state must be an int, None or an RngStream")


def _resolve_denoiser(denoiser) -> Denoiser:
    if isinstance(denoiser, DiffusionTeacher):
        check_is_fitted(denoiser, "denoiser_")
        return denoiser.denoiser_
    if isinstance(denoiser, Denoiser):
        return denoiser
    raise ConfigError("denoiser must be a Denoiser or a fitted DiffusionTeacher")


class DiffusionTeacher(BaseEstimator):
    """Conditional DDPM noise predictor fitted on ``(X, y)`` with class labels ``y``."""

    def __init__(self, T=100, beta_min=1e-4, beta_max=0.02, hidden=64, n_hidden=3,
                 frequencies=8, cond_dim=8, iterations=5000, batch_size=128,
                 learning_rate=1e-3, random_state=0):
        self.T = T
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.hidden = hidden
        self.n_hidden = n_hidden
        self.frequencies = frequencies
        self.cond_dim = cond_dim
        self.iterations = iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, codes = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        s = make_schedule(self.T, self.beta_min, self.beta_max)
        cfg = DenoiserConfig(self.hidden, self.n_hidden, self.frequencies, self.cond_dim,
                             self.iterations, self.batch_size, self.learning_rate)
        n = X.shape[0]

        def draw(r, b):
            rows = r.integers(0, n, b)
            return X[rows], codes[rows]

        self.denoiser_ = fit_denoiser(draw, X.shape[1], len(self.classes_), s, cfg,
                                      _rng(self.random_state))
        self.schedule_ = s
        self.loss_curve_ = np.asarray(self.denoiser_.loss_curve)
        return self

    def _code(self, label) -> int:
        hit = np.flatnonzero(self.classes_ == label)
        if hit.size == 0:
            raise ConditionError(f"unknown class {label!r}; known: {list(self.classes_)}")
        return int(hit[0])

    def predict_noise(self, X_t, t, label):
        check_is_fitted(self, "denoiser_")
        X_t = check_array(X_t, dtype=np.float64)
        return predict_eps(self.denoiser_, X_t, t, self._code(label))

    def sample(self, n, label, random_state=None):
        """Ancestral samples for one class."""
        check_is_fitted(self, "denoiser_")
        rng = _rng(self.random_state if random_state is None else random_state).fork(99)
        return reverse_sample(self.denoiser_, self.schedule_, self._code(label), rng, n=n)

    def score(self, X, y):
        """Negative mean denoising loss over random timesteps (higher is better)."""
        check_is_fitted(self, "denoiser_")
        X, y = check_X_y(X, y, dtype=np.float64)
        codes = np.array([self._code(v) for v in y])
        rng = RngStream(0)
        t = rng.fork(0).integers(1, self.T + 1, X.shape[0])
        eps = rng.fork(1).normal(X.shape)
        loss, _ = elbo_step(self.denoiser_, self.schedule_, X, t, codes, eps)
        return -loss


class HQSSelector(BaseEstimator):
    """Scores every timestep for editing rows of ``X`` toward ``target``.

    At most ``max_samples`` rows (a seeded subset) are profiled.  After
    ``fit``: ``profile_``, ``timesteps_`` (threshold ``xi`` or ``k`` best) and
    ``best_timestep_``.  ``get_support`` gives a boolean mask over 1..T.
    """

    def __init__(self, denoiser=None, target=0, n_eps=8, max_samples=64, xi=0.0, k=None,
                 normalize_per_sample=False, random_state=0, n_jobs=1):
        self.denoiser = denoiser
        self.target = target
        self.n_eps = n_eps
        self.max_samples = max_samples
        self.xi = xi
        self.k = k
        self.normalize_per_sample = normalize_per_sample
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        d = _resolve_denoiser(self.denoiser)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != d.dim:
            raise ConfigError(f"X has {X.shape[1]} features, denoiser expects {d.dim}")
        self.n_features_in_ = X.shape[1]
        target = _target_code(self.denoiser, self.target)
        rng = _rng(self.random_state)
        if self.max_samples is not None and X.shape[0] > self.max_samples:
            keep = np.argsort(rng.fork(0).uniform(X.shape[0]), kind="stable")[:self.max_samples]
            X = X[np.sort(keep)]
        self.profile_ = profile_from_samples(d, d.schedule, X, target, self.n_eps, rng.fork(1),
                                             self.normalize_per_sample, n_jobs=self.n_jobs)
        if self.k is not None:
            self.timesteps_ = top_k(self.profile_, self.k)
        else:
            self.timesteps_ = select_timesteps(self.profile_, self.xi)
        self.best_timestep_ = self.profile_.argmax()
        return self

    def get_support(self):
        check_is_fitted(self, "profile_")
        mask = np.zeros(self.profile_.T, dtype=bool)
        mask[np.asarray(self.timesteps_.timesteps) - 1] = True
        return mask


def _target_code(denoiser, target) -> int:
    if isinstance(denoiser, DiffusionTeacher):
        return denoiser._code(target)
    return int(target)


class SelectiveDistiller(TransformerMixin, BaseEstimator):
    """Learns a residual edit of source rows toward ``target`` by distillation.

    ``strategy`` is one of ``largest_hqs``, ``selected``, ``random``,
    ``descending`` or ``fixed``; the first two profile ``X`` with
    :class:`HQSSelector` during ``fit``.
    """

    def __init__(self, denoiser=None, target=0, strategy="largest_hqs", xi=0.0, k=None,
                 fixed_t=None, n_eps=8, max_samples=64, iterations=2000, learning_rate=1e-2,
                 lambda_reg=0.1, clip_norm=1.0, batch_size=64, sds_weight_rule="unit", hidden=64,
                 n_layers=4, random_state=0):
        self.denoiser = denoiser
        self.target = target
        self.strategy = strategy
        self.xi = xi
        self.k = k
        self.fixed_t = fixed_t
        self.n_eps = n_eps
        self.max_samples = max_samples
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.lambda_reg = lambda_reg
        self.clip_norm = clip_norm
        self.batch_size = batch_size
        self.sds_weight_rule = sds_weight_rule
        self.hidden = hidden
        self.n_layers = n_layers
        self.random_state = random_state

    def fit(self, X, y=None):
        d = _resolve_denoiser(self.denoiser)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != d.dim:
            raise ConfigError(f"X has {X.shape[1]} features, denoiser expects {d.dim}")
        self.n_features_in_ = X.shape[1]
        rng = _rng(self.random_state)
        target = _target_code(self.denoiser, self.target)
        self.selector_ = None
        profile = None
        if self.strategy in ("largest_hqs", "selected"):
            self.selector_ = HQSSelector(d, target, self.n_eps, self.max_samples, self.xi,
                                         self.k, random_state=rng.fork(2)).fit(X)
            profile = self.selector_.profile_
        if self.strategy == "selected":
            strat = Selected(self.selector_.timesteps_)
        else:
            strat = strategy_from_tag(self.strategy, profile, self.xi, self.fixed_t)
        cfg = DistillConfig(self.iterations, self.learning_rate, self.lambda_reg, self.clip_norm,
                            self.batch_size, self.sds_weight_rule, self.hidden, self.n_layers)
        n = X.shape[0]

        def draw(r, b):
            return X[r.integers(0, n, b)]

        self.manipulator_, history = fit_manipulator(draw, X.shape[1], d, d.schedule, target,
                                                     strat, cfg, rng.fork(1))
        self.strategy_ = strat
        self.history_ = history
        return self

    def transform(self, X):
        check_is_fitted(self, "manipulator_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ConfigError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return manipulate(self.manipulator_, X)
