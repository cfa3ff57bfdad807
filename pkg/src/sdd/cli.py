"""Command-line front end: ``sdd <command> --config PATH [--seed N] [--out DIR]``.

Each command reads upstream checkpoints from the output directory, writes its
own artifacts there, and finishes with ``report.json`` listing every file it
created.  Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np

from .config import RunConfig, parse_config
from .diffusion import Denoiser, DenoiserConfig, make_schedule, reverse_sample, train_denoiser
from .distill import (HISTORY_HEADER, DistillConfig, Manipulator, manipulate, strategy_from_tag,
                      train_manipulator)
from .errors import ConfigError, SDDError
from .evaluation import (CostParams, break_even_m, cost_diffusion, cost_sdd, frechet_gaussian,
                         run_ablation, tradeoff_curve, write_tradeoff_csv)
from .hqs import HQSProfile, hqs_profile, select_timesteps, top_k
from .numerics import RngStream
from .serialization import read_json, write_csv, write_json
from .worlds import alignment_score, fidelity_rmse, make_world, nearest_mode, sample_world

COMMANDS = ("train-denoiser", "score-hqs", "distill", "tradeoff", "ablation", "cost")

# stream labels under RngStream(seed); one per command so reruns of a single
# command never shift another command's draws
_STREAM = {"train-denoiser": 1, "score-hqs": 2, "distill": 3, "tradeoff": 4}

DENOISER_FILE = "denoiser.json"
PROFILE_FILE = "hqs_profile.csv"
MANIP_FILE = "manipulator.json"
LOCK_FILE = ".sdd.lock"


class MissingArtifact(SDDError):
    pass


@dataclass
class RunReport:
    command: str
    config_hash: str
    seed: int
    elapsed_seconds: float = 0.0
    artifacts: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "elapsed_seconds": self.elapsed_seconds,
            "artifacts": list(self.artifacts),
            "summary": dict(self.summary),
        }


def write_report(report: RunReport, out_dir) -> Path:
    """Atomically replace ``out_dir/report.json``."""
    return write_json(Path(out_dir) / "report.json", report.to_dict())


# --------------------------------------------------------------------------
# builders shared by the commands
# --------------------------------------------------------------------------


def build_world(cfg: RunConfig):
    w = cfg.world
    return make_world(w.layout, w.D, w.separation, w.std, w.K)


def build_schedule(cfg: RunConfig):
    s = cfg.schedule
    return make_schedule(s.T, s.beta_min, s.beta_max)


def denoiser_config(cfg: RunConfig) -> DenoiserConfig:
    return DenoiserConfig(**cfg.denoiser.model_dump())


def distill_config(cfg: RunConfig) -> DistillConfig:
    dc = cfg.distill.model_dump()
    dc.pop("strategy")
    dc.pop("fixed_t")
    return DistillConfig(**dc)


def _load_denoiser(out: Path, cfg: RunConfig) -> Denoiser:
    path = out / DENOISER_FILE
    if not path.is_file():
        raise MissingArtifact(f"no denoiser checkpoint at {path}; run train-denoiser first")
    d = Denoiser.from_dict(read_json(path))
    if d.schedule.to_dict() != build_schedule(cfg).to_dict():
        raise MissingArtifact(f"{path} was trained with a different schedule; "
                              "run train-denoiser first")
    return d


def _load_profile(out: Path, cfg: RunConfig) -> HQSProfile:
    path = out / PROFILE_FILE
    if not path.is_file():
        raise MissingArtifact(f"no HQS profile at {path}; run score-hqs first")
    return HQSProfile.from_csv(path, cfg.task.target)


def _needs_profile(tags) -> bool:
    return any(t in ("selected", "largest_hqs") for t in tags)


def _strategy(tag: str, cfg: RunConfig, profile, xi=None):
    if tag == "selected" and xi is None and cfg.hqs.k is not None:
        from .distill import Selected

        return Selected(top_k(profile, cfg.hqs.k))
    return strategy_from_tag(tag, profile, cfg.xi if xi is None else xi, cfg.distill.fixed_t)


# --------------------------------------------------------------------------
# commands; each returns (artifact paths, summary)
# --------------------------------------------------------------------------


def _train_denoiser(cfg: RunConfig, out: Path, root: RngStream):
    w, s = build_world(cfg), build_schedule(cfg)
    d = train_denoiser(w, s, denoiser_config(cfg), root)
    ckpt = write_json(out / DENOISER_FILE, d.to_dict())
    curve = write_csv(out / "denoiser_loss.csv", ["iter", "loss"], enumerate(d.loss_curve))
    acc = []
    for c in range(w.n_conditions):
        xs = reverse_sample(d, s, c, root.fork(1, c), n=200)
        acc.append(float(np.mean(nearest_mode(w, xs) == c)))
    losses = np.asarray(d.loss_curve)
    k = max(len(losses) // 10, 1)
    summary = {"mode_accuracy": float(np.mean(acc))}
    if len(losses):
        summary.update(first_decile_loss=float(losses[:k].mean()),
                       last_decile_loss=float(losses[-k:].mean()))
    return [ckpt, curve], summary


def _score_hqs(cfg: RunConfig, out: Path, root: RngStream):
    w, s = build_world(cfg), build_schedule(cfg)
    d = _load_denoiser(out, cfg)
    h = cfg.hqs
    p = hqs_profile(d, s, w, cfg.task.source, cfg.task.target, h.n_samples, h.n_eps, root,
                    h.normalize_per_sample, n_jobs=cfg.n_jobs)
    path = p.to_csv(out / PROFILE_FILE)
    ts = top_k(p, h.k) if h.k is not None else select_timesteps(p, cfg.xi)
    sel = write_json(out / "timesteps.json", {"origin": ts.origin, "param": ts.param,
                                              "timesteps": list(ts.timesteps)})
    return [path, sel], {"argmax_t": p.argmax(), "n_selected": len(ts),
                         "max_hqs": float(np.max(p.hqs))}


def _distill(cfg: RunConfig, out: Path, root: RngStream):
    w, s = build_world(cfg), build_schedule(cfg)
    d = _load_denoiser(out, cfg)
    tag = cfg.distill.strategy
    profile = _load_profile(out, cfg) if _needs_profile([tag]) else None
    strategy = _strategy(tag, cfg, profile)
    src, tgt = cfg.task.source, cfg.task.target
    m, history = train_manipulator(w, d, s, src, tgt, strategy, distill_config(cfg), root.fork(0))
    ckpt = write_json(out / MANIP_FILE, m.to_dict())
    hist = write_csv(out / "history.csv", HISTORY_HEADER,
                     [[h[k] for k in HISTORY_HEADER] for h in history])
    held = sample_world(w, src, cfg.eval.n, root.fork(1)).samples
    ref = sample_world(w, tgt, cfg.eval.n, root.fork(2)).samples
    edited = manipulate(m, held)
    summary = {"strategy": strategy.tag,
               "alignment": alignment_score(w, edited, tgt),
               "fidelity_rmse": fidelity_rmse(held, edited, w),
               "frechet": frechet_gaussian(edited, ref)}
    return [ckpt, hist], summary


def _tradeoff(cfg: RunConfig, out: Path, root: RngStream):
    w, s = build_world(cfg), build_schedule(cfg)
    d = _load_denoiser(out, cfg)
    pts = tradeoff_curve(d, s, w, cfg.task.source, cfg.task.target, cfg.eval.alphas,
                         cfg.eval.n, root)
    path = write_tradeoff_csv(out / "tradeoff.csv", pts)
    summary = {"points": len(pts)}
    manip = out / MANIP_FILE
    if manip.is_file():
        m = Manipulator.from_dict(read_json(manip))
        held = sample_world(w, cfg.task.source, cfg.eval.n, root.fork(0)).samples
        edited = manipulate(m, held)
        summary.update(manipulator_alignment=alignment_score(w, edited, cfg.task.target),
                       manipulator_fidelity_rmse=fidelity_rmse(held, edited, w))
    return [path], summary


def _ablation(cfg: RunConfig, out: Path, root: RngStream):
    w, s = build_world(cfg), build_schedule(cfg)
    d = _load_denoiser(out, cfg)
    tags = cfg.eval.strategies
    profile = _load_profile(out, cfg) if _needs_profile(tags) else None
    strategies = [_strategy(t, cfg, profile, cfg.eval.ablation_xi if t == "selected" else None)
                  for t in tags]
    rep = run_ablation(w, d, s, cfg.task.source, cfg.task.target, strategies, cfg.eval.seeds,
                       distill_config(cfg), cfg.eval.n, cfg.n_jobs)
    path = rep.to_csv(out / "ablation.csv")
    means = {st.tag: rep.mean(st.tag) for st in strategies}
    return [path], {"mean_alignment": means}


def _cost(cfg: RunConfig, out: Path, root: RngStream):
    c = cfg.cost
    p = CostParams(c.m, c.n, c.tau_diff_infer, c.tau_sdd_train, c.tau_sdd_infer)
    doc = {"inputs": c.model_dump(), "cost_diffusion": cost_diffusion(p), "cost_sdd": cost_sdd(p)}
    try:
        doc["break_even_m"] = break_even_m(p)
    except SDDError as exc:
        doc["break_even_m"] = None
        doc["note"] = str(exc)
    path = write_json(out / "cost.json", doc)
    return [path], {k: v for k, v in doc.items() if k != "inputs"}


_HANDLERS = {
    "train-denoiser": _train_denoiser,
    "score-hqs": _score_hqs,
    "distill": _distill,
    "tradeoff": _tradeoff,
    "ablation": _ablation,
    "cost": _cost,
}


class _OutDirLock:
    def __init__(self, out: Path):
        self.path = out / LOCK_FILE

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise SDDError(f"{self.path} exists: another command is writing to this "
                           "directory (remove the file if no such command is running)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def run_command(cmd: str, cfg: RunConfig) -> RunReport:
    if cmd not in _HANDLERS:
        raise ConfigError(f"unknown command {cmd!r}; expected one of {', '.join(COMMANDS)}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    stream = RngStream(cfg.seed).fork(_STREAM.get(cmd, 0))
    with _OutDirLock(out):
        paths, summary = _HANDLERS[cmd](cfg, out, stream)
        report = RunReport(cmd, cfg.config_hash(), cfg.seed)
        report.artifacts = [Path(p).name for p in paths] + ["report.json"]
        report.summary = summary
        report.elapsed_seconds = time.perf_counter() - start
        write_report(report, out)
    return report


def _invoke(cmd: str, config: str, seed, out) -> int:
    try:
        cfg = parse_config(config, seed, out)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 1
    try:
        report = run_command(cmd, cfg)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 1
    except (SDDError, ArithmeticError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    click.echo(f"{cmd}: wrote {', '.join(report.artifacts)} to {cfg.out_dir}")
    return 0


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def main():
    """Selective diffusion distillation on synthetic worlds."""


def _register(name: str):
    @main.command(name=name)
    @click.option("--config", "config", required=True, type=click.Path(dir_okay=False),
                  help="JSON run configuration.")
    @click.option("--seed", type=int, default=None, help="Override the config seed.")
    @click.option("--out", type=click.Path(file_okay=False), default=None,
                  help="Override the output directory.")
    def _cmd(config, seed, out):
        sys.exit(_invoke(name, config, seed, out))

    _cmd.__doc__ = f"Run the {name} step."
    return _cmd


for _name in COMMANDS:
    _register(_name)


if __name__ == "__main__":
    main()
