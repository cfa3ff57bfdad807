import json
import threading

import pytest
from click.testing import CliRunner

from sdd.cli import LOCK_FILE, RunReport, main, run_command, write_report
from sdd.config import RunConfig, config_from_dict, parse_config
from sdd.errors import ConfigError, SDDError
from sdd.serialization import read_csv

TINY = {
    "seed": 1,
    "world": {"layout": "two-mode", "D": 2, "K": 2, "separation": 4.0},
    "schedule": {"T": 10, "beta_min": 1e-3, "beta_max": 0.2},
    "denoiser": {"hidden": 8, "n_hidden": 1, "frequencies": 2, "cond_dim": 2, "iterations": 20,
                 "batch": 16},
    "hqs": {"n_samples": 3, "n_eps": 2},
    "distill": {"iterations": 5, "batch": 8, "hidden": 8},
    "eval": {"alphas": [0.0, 0.5], "seeds": [1, 2], "n": 20,
             "strategies": ["largest_hqs", "random"]},
}


def write_cfg(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def cli(tmp_path):
    runner = CliRunner()

    def run(cmd, doc=TINY, out="run", extra=()):
        cfg = write_cfg(tmp_path, doc)
        return runner.invoke(main, [cmd, "--config", str(cfg), "--out", str(tmp_path / out),
                                    *extra])

    return run


# ---- config ---------------------------------------------------------------------


def test_minimal_config_fills_defaults(tmp_path):
    cfg = parse_config(write_cfg(tmp_path, {"seed": 1}))
    assert cfg.seed == 1
    assert cfg.model_dump() == RunConfig(seed=1).model_dump()
    assert cfg.schedule.T == 100 and cfg.world.layout == "ring"


def test_overrides(tmp_path):
    cfg = parse_config(write_cfg(tmp_path, {"seed": 1}), seed=7, out_dir=tmp_path / "o")
    assert cfg.seed == 7 and cfg.out_dir == str(tmp_path / "o")


@pytest.mark.parametrize("doc,key", [
    ({"schedule": {"beta_min": 0.5, "beta_max": 0.1}}, "schedule.beta_min"),
    ({"foo": 1}, "foo"),
    ({"world": {"foo": 1}}, "world.foo"),
    ({"hqs": {"xi": 0.5, "k": 3}}, "hqs.xi"),
    ({"task": {"target": 9}}, "task.target"),
    ({"schedule": {"T": "many"}}, "schedule.T"),
])
def test_validation_names_key(doc, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        config_from_dict(doc)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{seed: 1")
    with pytest.raises(ConfigError):
        parse_config(bad)


def test_config_hash_is_canonical():
    a = config_from_dict({"seed": 3, "n_jobs": 1})
    b = config_from_dict({"n_jobs": 1, "seed": 3})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != config_from_dict({"seed": 4}).config_hash()


# ---- report -----------------------------------------------------------------------


def test_empty_report_is_valid_json(tmp_path):
    path = write_report(RunReport("cost", "abc", 0), tmp_path)
    doc = json.loads(path.read_text())
    assert doc["summary"] == {} and doc["artifacts"] == []


def test_report_rewrite_never_truncated(tmp_path):
    big = {f"k{i}": i for i in range(2000)}
    write_report(RunReport("cost", "h", 0, summary=big), tmp_path)
    stop = threading.Event()
    seen = []

    def reader():
        while not stop.is_set():
            seen.append(json.loads((tmp_path / "report.json").read_text())["seed"])

    th = threading.Thread(target=reader)
    th.start()
    for i in range(50):
        write_report(RunReport("cost", "h", i, summary=big), tmp_path)
    stop.set()
    th.join()
    assert seen and set(seen) <= set(range(50))


# ---- commands ---------------------------------------------------------------------


def test_cost_threshold(cli, tmp_path):
    res = cli("cost", {"seed": 1})
    assert res.exit_code == 0, res.output
    doc = json.loads((tmp_path / "run" / "cost.json").read_text())
    assert abs(doc["break_even_m"] - 2.4006) < 1e-3


def test_score_without_denoiser(cli):
    res = cli("score-hqs")
    assert res.exit_code == 2
    assert "run train-denoiser first" in res.output


def test_distill_without_denoiser(cli):
    res = cli("distill")
    assert res.exit_code == 2 and "run train-denoiser first" in res.output


@pytest.mark.parametrize("doc", [{"foo": 1}, {"schedule": {"beta_min": 0.5, "beta_max": 0.1}}])
def test_bad_config_exit_one(cli, doc):
    res = cli("cost", doc)
    assert res.exit_code == 1 and "config error" in res.output


def test_missing_config_exit_one(tmp_path):
    res = CliRunner().invoke(main, ["cost", "--config", str(tmp_path / "none.json")])
    assert res.exit_code == 1


def test_pipeline_reports_list_created_files(cli, tmp_path):
    out = tmp_path / "run"
    expected = {
        "train-denoiser": {"denoiser.json", "denoiser_loss.csv"},
        "score-hqs": {"hqs_profile.csv", "timesteps.json"},
        "distill": {"manipulator.json", "history.csv"},
        "tradeoff": {"tradeoff.csv"},
        "ablation": {"ablation.csv"},
        "cost": {"cost.json"},
    }
    before = set()
    for cmd, files in expected.items():
        res = cli(cmd)
        assert res.exit_code == 0, res.output
        report = json.loads((out / "report.json").read_text())
        assert report["command"] == cmd
        assert set(report["artifacts"]) == files | {"report.json"}
        now = {p.name for p in out.iterdir()}
        assert now - before <= files | {"report.json"}
        before = now
    assert not (out / LOCK_FILE).exists()
    header, rows = read_csv(out / "ablation.csv")
    assert header[0] == "strategy" and len(rows) == 4


def test_pipeline_deterministic(cli, tmp_path):
    for out in ("a", "b"):
        for cmd in ("train-denoiser", "score-hqs", "distill", "ablation"):
            assert cli(cmd, out=out).exit_code == 0
    for name in ("denoiser_loss.csv", "hqs_profile.csv", "history.csv", "ablation.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_flag_changes_output(cli, tmp_path):
    cli("train-denoiser", out="a")
    cli("train-denoiser", out="b", extra=("--seed", "2"))
    assert (tmp_path / "a" / "denoiser.json").read_bytes() != (
        tmp_path / "b" / "denoiser.json").read_bytes()


def test_lock_blocks_second_writer(tmp_path):
    cfg = config_from_dict({"seed": 1}, out_dir=tmp_path)
    (tmp_path / LOCK_FILE).write_text("123")
    with pytest.raises(SDDError, match="another command"):
        run_command("cost", cfg)
    assert not (tmp_path / "report.json").exists()


def test_unknown_command_rejected(tmp_path):
    with pytest.raises(ConfigError):
        run_command("paint", config_from_dict({}, out_dir=tmp_path))
