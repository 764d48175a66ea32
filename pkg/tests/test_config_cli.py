import json
from pathlib import Path

import pytest

from flowmot.cli import EXIT_CODES, main, trace_path
from flowmot.config import (ConfigError, ExperimentConfig, derive_seeds, format_config,
                            parse_config)

TINY = """\
seed = 5
suite = easy, hard   # two presets
n_seeds = 2
n_train_seeds = 2
scenario.n_frames = 60
flow.n_blocks = 2
flow.hidden = 16
flow.epochs = 2
flow.batch_size = 128
"""


def test_parse_values_and_defaults():
    cfg = parse_config(TINY)
    assert cfg.seed == 5 and cfg.suite == ("easy", "hard")
    assert cfg.flow.n_blocks == 2 and cfg.flow.hidden == 16
    assert cfg.scenario == {"n_frames": 60}
    assert cfg.scenario_config("hard", 3).n_frames == 60
    assert cfg.tracker == ExperimentConfig().tracker


def test_nested_and_optional_keys():
    cfg = parse_config("tracker.gate.center_px = 80\ntracker.normalize = auto\ntracker.two_stage = yes\n")
    assert cfg.tracker.gate.center_px == 80.0
    assert cfg.tracker.normalize is None and cfg.tracker.two_stage is True


def test_unknown_key_names_key_and_line():
    with pytest.raises(ConfigError) as err:
        parse_config("seed = 1\n\nflow.nblocks = 3\n")
    assert err.value.lineno == 3 and err.value.key == "flow.nblocks"
    assert "line 3" in str(err.value) and "flow.nblocks" in str(err.value)


@pytest.mark.parametrize("text", ["seed = x", "seed = 1\nseed = 2", "suite = nowhere",
                                  "bins = 0.5", "scenario.seed = 3", "justtext"])
def test_bad_configs_raise(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_format_round_trip():
    cfg = parse_config(TINY + "tracker.kalman.q_pos = 2.5\nbins = 0:0.5, 0.5:1\n")
    assert parse_config(format_config(cfg)) == cfg


def test_derived_seeds_are_stable_and_distinct():
    a = derive_seeds(5, "eval", 4)
    assert a == derive_seeds(5, "eval", 4)
    assert a[:2] == derive_seeds(5, "eval", 2)
    assert set(a).isdisjoint(derive_seeds(5, "train", 4))
    assert a != derive_seeds(6, "eval", 4)


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def _tree_bytes(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_simulate_is_byte_identical(tiny, tmp_path):
    assert main(["simulate", "--config", str(tiny), "--out", str(tmp_path / "a")]) == 0
    assert main(["simulate", "--config", str(tiny), "--out", str(tmp_path / "b")]) == 0
    a, b = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    assert a == b
    seqs = [p for p in (tmp_path / "a").iterdir() if p.is_dir()]
    assert len(seqs) == 4  # 2 presets x 2 seeds
    assert all((p / "seqinfo.ini").is_file() and (p / "gt" / "gt.txt").is_file() for p in seqs)


def test_simulate_one_directory_per_scenario(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("suite = easy\nn_seeds = 3\nscenario.n_frames = 20\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert len([p for p in (tmp_path / "o").iterdir() if p.is_dir()]) == 3


def test_full_pipeline(tiny, tmp_path):
    train, ev = tmp_path / "train", tmp_path / "eval"
    assert main(["simulate", "--config", str(tiny), "--split", "train", "--out", str(train)]) == 0
    assert main(["simulate", "--config", str(tiny), "--out", str(ev)]) == 0
    ck = tmp_path / "model.pt"
    assert main(["train-flow", "--config", str(tiny), "--data", str(train), "--out", str(ck)]) == 0
    lines = trace_path(ck).read_text().splitlines()
    assert lines[0].startswith("# ") and lines[1] == "epoch\ttrain_nll\tval_nll"
    assert len(lines) - 2 == 2  # one row per epoch

    out = tmp_path / "tracks"
    assert main(["track", "--config", str(tiny), "--data", str(ev), "--out", str(out),
                 "--provider", "flow", "--checkpoint", str(ck), "--cost-log"]) == 0
    assert (out / "run.ini").is_file()
    assert list(out.glob("*_costs.csv"))

    res = tmp_path / "metrics"
    assert main(["evaluate", "--config", str(tiny), "--gt", str(ev), "--pred", str(out),
                 "--out", str(res)]) == 0
    agg = json.loads((res / "aggregate.json").read_text())
    per = [json.loads(p.read_text()) for p in res.glob("*.json") if p.name != "aggregate.json"]
    assert len(per) == 4
    for key in ("n_gt", "n_pred", "idtp", "fn", "fp", "idsw"):
        assert agg["counts"][key] == sum(r["counts"][key] for r in per)


def test_evaluate_ground_truth_against_itself(tiny, tmp_path):
    ev = tmp_path / "eval"
    main(["simulate", "--config", str(tiny), "--out", str(ev)])
    pred = tmp_path / "pred"
    pred.mkdir()
    for d in ev.iterdir():
        if d.is_dir():
            (pred / f"{d.name}.txt").write_bytes((d / "gt" / "gt.txt").read_bytes())
    res = tmp_path / "res"
    assert main(["evaluate", "--gt", str(ev), "--pred", str(pred), "--out", str(res)]) == 0
    agg = json.loads((res / "aggregate.json").read_text())
    assert agg["idf1"] == 1.0 and agg["id_switches"] == 0


def _err(capsys):
    return capsys.readouterr().err.strip().splitlines()


def test_missing_checkpoint_is_named_error(tiny, tmp_path, capsys):
    ev = tmp_path / "eval"
    main(["simulate", "--config", str(tiny), "--out", str(ev)])
    code = main(["track", "--data", str(ev), "--out", str(tmp_path / "t"), "--provider", "flow"])
    assert code == EXIT_CODES["checkpoint"]
    code = main(["track", "--data", str(ev), "--out", str(tmp_path / "t"), "--provider", "flow",
                 "--checkpoint", str(tmp_path / "nope.pt")])
    assert code == EXIT_CODES["checkpoint"]
    lines = _err(capsys)
    assert lines[-1].startswith("flowmot: error[checkpoint]:") and "nope.pt" in lines[-1]


def test_missing_sequence_is_named_error(tiny, tmp_path, capsys):
    ev = tmp_path / "eval"
    main(["simulate", "--config", str(tiny), "--out", str(ev)])
    out = tmp_path / "t"
    main(["track", "--data", str(ev), "--out", str(out), "--provider", "iou"])
    victim = sorted(out.glob("*.txt"))[0]
    victim.unlink()
    code = main(["evaluate", "--gt", str(ev), "--pred", str(out), "--out", str(tmp_path / "r")])
    assert code == EXIT_CODES["missing"]
    assert victim.stem in _err(capsys)[-1]


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("seed = 1\nwhat = 2\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CODES["config"]
    assert _err(capsys)[-1] == "flowmot: error[config]: line 2: unknown key 'what'"


def test_usage_error_exit_code(capsys):
    assert main(["track"]) == EXIT_CODES["usage"]
    assert main(["nosuchverb"]) == EXIT_CODES["usage"]
    assert _err(capsys)[-1].startswith("flowmot: error[usage]:")


def test_missing_data_directory(tmp_path):
    assert main(["train-flow", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "m.pt")]) \
        == EXIT_CODES["missing"]
