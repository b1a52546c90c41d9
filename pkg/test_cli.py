"""Command-line surface: exit codes, stderr error objects and overrides."""
import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from src import main as cli
from src.utils.errors import DataError

TINY_CONFIG = Path(__file__).parent / "config" / "tiny_pipeline.json"


def run(workdir, *argv):
    return cli.main(["--workdir", str(workdir), "--config", str(TINY_CONFIG), *argv])


def stderr_object(capsys):
    lines = [line for line in capsys.readouterr().err.splitlines() if line.strip()]
    return json.loads(lines[-1])


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    for name in ("CONDEEPMOD_THREADS", "CONDEEPMOD_LOG_LEVEL", "CONDEEPMOD_REGISTRY_URL"):
        monkeypatch.delenv(name, raising=False)


def test_missing_inputs_exit_with_usage(tmp_path, capsys):
    assert run(tmp_path / "work", "build-graph") == cli.EXIT_USAGE
    error = stderr_object(capsys)
    assert error["error"] == "usage_error"
    assert error["stage"] == "build-graph"
    assert "pretrain" in error["message"]


def test_invalid_override_exits_with_usage(tmp_path, capsys):
    assert run(tmp_path / "work", "--set", "graph.theta=5", "synth") == cli.EXIT_USAGE
    error = stderr_object(capsys)
    assert error["error"] == "config_error"
    assert error["details"]["errors"][0]["path"] == "graph.theta"


def test_unknown_log_level(tmp_path, capsys):
    assert run(tmp_path / "work", "--log-level", "chatty", "synth") == cli.EXIT_USAGE
    assert stderr_object(capsys)["error"] == "usage_error"


def test_invalid_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("CONDEEPMOD_THREADS", "zero")
    assert run(tmp_path / "work", "synth") == cli.EXIT_USAGE
    assert stderr_object(capsys)["error"] == "config_error"


def test_stage_error_exits_with_failure(tmp_path, capsys, mocker):
    def failing(ctx, args):
        raise DataError("speaker 3 has no utterances", {"speaker_id": 3})

    mocker.patch.dict(cli.STAGES, {"eval": failing})
    assert run(tmp_path / "work", "eval") == cli.EXIT_FAILURE
    error = stderr_object(capsys)
    assert error == {
        "error": "data_error",
        "message": "speaker 3 has no utterances",
        "details": {"speaker_id": 3},
        "stage": "eval",
    }


def test_unexpected_error_is_reported_as_internal(tmp_path, capsys, mocker):
    mocker.patch.dict(cli.STAGES, {"separate": mocker.Mock(side_effect=RuntimeError("boom"))})
    assert run(tmp_path / "work", "separate") == cli.EXIT_FAILURE
    error = stderr_object(capsys)
    assert error["error"] == "internal"
    assert error["message"] == "boom"


def test_stage_receives_overridden_config(tmp_path, mocker):
    handler = mocker.Mock(return_value={})
    mocker.patch.dict(cli.STAGES, {"train-head": handler})
    assert run(tmp_path / "work", "--set", "graph.theta=0.4", "train-head", "--kind", "gcn", "--mode", "amortized") == cli.EXIT_OK
    ctx = handler.call_args.args[0]
    assert ctx.config.graph.theta == 0.4
    assert ctx.config.head.kind == "gcn"
    assert ctx.config.head.mode == "amortized"
    assert ctx.registry_url.endswith("registry.sqlite")


def test_collect_overrides_puts_shortcuts_last():
    args = cli.build_parser().parse_args(["--set", "seed=1", "synth", "--speakers", "6", "--seed", "3"])
    assert cli.collect_overrides(args) == ["seed=1", "corpus.n_speakers=6", "seed=3"]


def test_unknown_command_is_rejected():
    with pytest.raises(SystemExit) as excinfo:
        cli.build_parser().parse_args(["separate-everything"])
    assert excinfo.value.code == cli.EXIT_USAGE


def test_synth_is_deterministic(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert run(first, "synth") == cli.EXIT_OK
    assert run(second, "synth") == cli.EXIT_OK
    for relative in ("corpus/speakers.json", "corpus/00/000.wav", "mix/mix0000/mixture.wav", "mix/train0001/s1.wav"):
        assert (first / relative).read_bytes() == (second / relative).read_bytes(), relative
    meta = json.loads((first / "mix/mix0001/meta.json").read_text())
    assert meta["mix_id"] == "mix0001"
    assert meta["overlapped_frame_fraction"] == 0.0


def test_synth_seed_changes_corpus(tmp_path):
    assert run(tmp_path / "a", "synth") == cli.EXIT_OK
    assert run(tmp_path / "b", "synth", "--seed", "8") == cli.EXIT_OK
    assert (tmp_path / "a/mix/mix0000/mixture.wav").read_bytes() != (tmp_path / "b/mix/mix0000/mixture.wav").read_bytes()
