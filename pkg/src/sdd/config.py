"""Run configuration: one JSON document with a section per pipeline stage."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError

DEFAULT_ALPHAS = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class WorldSpec(_Section):
    layout: Literal["two-mode", "ring"] = "ring"
    D: int = 8
    separation: float = 2.0
    std: float = 0.25
    K: int = 8


class ScheduleSpec(_Section):
    T: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.02


class TaskSpec(_Section):
    source: int = 0
    target: int = 1


class DenoiserSpec(_Section):
    hidden: int = 64
    n_hidden: int = 3
    frequencies: int = 8
    cond_dim: int = 8
    iterations: int = 5000
    batch: int = 128
    lr: float = 1e-3


class HQSSpec(_Section):
    n_samples: int = 64
    n_eps: int = 8
    xi: Optional[float] = None
    k: Optional[int] = None
    normalize_per_sample: bool = False


class DistillSpec(_Section):
    iterations: int = 2000
    lr: float = 1e-2
    lambda_reg: float = 0.1
    clip_norm: Optional[float] = 1.0
    batch: int = 64
    sds_weight_rule: Literal["unit", "sqrt_alpha_bar"] = "unit"
    hidden: int = 64
    n_layers: int = 4
    strategy: Literal["selected", "largest_hqs", "random", "descending", "fixed"] = "largest_hqs"
    fixed_t: Optional[int] = None


class EvalSpec(_Section):
    alphas: list[float] = Field(default_factory=lambda: list(DEFAULT_ALPHAS))
    seeds: list[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5])
    n: int = 500
    strategies: list[Literal["selected", "largest_hqs", "random", "descending", "fixed"]] = Field(
        default_factory=lambda: ["largest_hqs", "selected", "random", "descending"])
    ablation_xi: float = 0.9


class CostSpec(_Section):
    m: float = 100
    n: float = 10
    tau_diff_infer: float = 1000.0
    tau_sdd_train: float = 2400.0
    tau_sdd_infer: float = 0.25


class RunConfig(_Section):
    seed: int = 0
    out_dir: str = "sdd-run"
    n_jobs: int = 1
    world: WorldSpec = WorldSpec()
    schedule: ScheduleSpec = ScheduleSpec()
    task: TaskSpec = TaskSpec()
    denoiser: DenoiserSpec = DenoiserSpec()
    hqs: HQSSpec = HQSSpec()
    distill: DistillSpec = DistillSpec()
    eval: EvalSpec = EvalSpec()
    cost: CostSpec = CostSpec()

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    @property
    def xi(self) -> float | None:
        if self.hqs.k is not None:
            return None
        return 0.0 if self.hqs.xi is None else self.hqs.xi


def _semantic_errors(cfg: RunConfig) -> list[str]:
    errs = []

    def need(cond, key, msg):
        if not cond:
            errs.append(f"{key}: {msg}")

    w = cfg.world
    need(w.D >= 2, "world.D", "must be at least 2")
    need(w.std > 0, "world.std", "must be positive")
    if w.layout == "two-mode":
        need(w.K == 2, "world.K", "two-mode layout requires K=2")
    else:
        need(w.K >= 2, "world.K", "ring layout requires K >= 2")
    s = cfg.schedule
    need(s.T >= 2, "schedule.T", "must be at least 2")
    need(0 < s.beta_min < 1, "schedule.beta_min", "must be in (0, 1)")
    need(0 < s.beta_max < 1, "schedule.beta_max", "must be in (0, 1)")
    need(s.beta_min <= s.beta_max, "schedule.beta_min", "must not exceed schedule.beta_max")
    need(0 <= cfg.task.source < w.K, "task.source", f"must be a condition in 0..{w.K - 1}")
    need(0 <= cfg.task.target < w.K, "task.target", f"must be a condition in 0..{w.K - 1}")
    dn = cfg.denoiser
    for key in ("hidden", "n_hidden", "frequencies", "cond_dim", "batch"):
        need(getattr(dn, key) >= 1, f"denoiser.{key}", "must be at least 1")
    need(dn.iterations >= 0, "denoiser.iterations", "must be non-negative")
    need(dn.lr > 0, "denoiser.lr", "must be positive")
    h = cfg.hqs
    need(h.n_samples >= 1, "hqs.n_samples", "must be at least 1")
    need(h.n_eps >= 1, "hqs.n_eps", "must be at least 1")
    need(h.xi is None or h.k is None, "hqs.xi", "hqs.xi and hqs.k are mutually exclusive")
    if h.k is not None:
        need(1 <= h.k <= s.T, "hqs.k", f"must be in 1..{s.T}")
    d = cfg.distill
    need(d.iterations >= 0, "distill.iterations", "must be non-negative")
    need(d.lr > 0, "distill.lr", "must be positive")
    need(d.lambda_reg >= 0, "distill.lambda_reg", "must be non-negative")
    need(d.batch >= 1, "distill.batch", "must be at least 1")
    need(d.n_layers >= 1, "distill.n_layers", "must be at least 1")
    need(d.clip_norm is None or d.clip_norm > 0, "distill.clip_norm", "must be positive")
    if d.strategy == "fixed" or "fixed" in cfg.eval.strategies:
        need(d.fixed_t is not None and 1 <= d.fixed_t <= s.T, "distill.fixed_t",
             f"fixed strategy needs fixed_t in 1..{s.T}")
    e = cfg.eval
    need(len(e.alphas) > 0, "eval.alphas", "must not be empty")
    need(all(0 <= a <= 1 for a in e.alphas), "eval.alphas", "entries must lie in [0, 1]")
    need(len(e.seeds) > 0, "eval.seeds", "must not be empty")
    need(len(set(e.strategies)) == len(e.strategies) and e.strategies, "eval.strategies",
         "must be a nonempty list without duplicates")
    need(e.n >= w.D + 1, "eval.n", f"must be at least D+1={w.D + 1}")
    c = cfg.cost
    for key in ("m", "n", "tau_diff_infer", "tau_sdd_train", "tau_sdd_infer"):
        need(getattr(c, key) >= 0, f"cost.{key}", "must be non-negative")
    need(cfg.n_jobs >= 1, "n_jobs", "must be at least 1")
    return errs


def config_from_dict(doc: dict, seed: int | None = None, out_dir: str | None = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    doc = dict(doc)
    if seed is not None:
        doc["seed"] = seed
    if out_dir is not None:
        doc["out_dir"] = str(out_dir)
    try:
        cfg = RunConfig.model_validate(doc)
    except ValidationError as exc:
        msgs = []
        for err in exc.errors():
            key = ".".join(str(p) for p in err["loc"])
            if err["type"] == "extra_forbidden":
                msgs.append(f"unknown key {key!r}")
            else:
                msgs.append(f"{key}: {err['msg']}")
        raise ConfigError("; ".join(msgs)) from None
    errs = _semantic_errors(cfg)
    if errs:
        raise ConfigError("; ".join(errs))
    return cfg


def parse_config(path, seed: int | None = None, out_dir: str | None = None) -> RunConfig:
    """Load and validate a config file, filling defaults."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(doc, seed, out_dir)
