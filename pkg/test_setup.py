"""Smoke test: run every stage on the tiny config and check the artifacts."""
import json
import sys
import tempfile
from pathlib import Path

import pandas as pd
import pytest

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from config.settings import config_hash, load_pipeline_config
from src import main as cli
from src.db.models import CheckpointScore, SeparationRun, default_registry_url, get_session_maker, init_db
from src.dsp.audio import read_wav
from src.dsp.corpus import read_mixture
from src.pipeline.stages import EVAL_COLUMNS, mix_index, parallel_map

TINY_CONFIG = Path(__file__).parent / "config" / "tiny_pipeline.json"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("smoke")


def run_stage(workdir, *argv):
    return cli.main(["--workdir", str(workdir), "--config", str(TINY_CONFIG), *argv])


def test_synth(workdir):
    """Corpus, test mixtures and training mixtures."""
    print("\n1. Synthesizing corpus...")
    assert run_stage(workdir, "synth") == cli.EXIT_OK
    assert len(list((workdir / "corpus").glob("*/*.wav"))) == 4
    assert sorted(p.name for p in (workdir / "mix").iterdir()) == ["mix0000", "mix0001", "train0000", "train0001"]
    print("   ✓ Corpus ready")


def test_pretrain(workdir):
    """Contrastive pretraining plus fine-tuning on training-mixture sources."""
    print("\n2. Pretraining encoder...")
    assert run_stage(workdir, "pretrain", "--fine-tune") == cli.EXIT_OK
    assert (workdir / "models" / "encoder.cdm").exists()
    assert (workdir / "models" / "encoder_ft.cdm").exists()
    trace = pd.read_csv(workdir / "models" / "loss_trace.csv")
    assert list(trace.columns) == ["step", "loss", "lr"]
    assert len(trace) == 20
    print(f"   ✓ Encoder trained, final loss {trace['loss'].iloc[-1]:.3f}")


def test_resume_keeps_trace(workdir):
    print("\n3. Resuming from a checkpoint...")
    checkpoint = workdir / "models" / "checkpoints" / "pretrain_000010.cdm"
    assert run_stage(workdir, "pretrain", "--fine-tune", "--resume", str(checkpoint)) == cli.EXIT_OK
    trace = pd.read_csv(workdir / "models" / "loss_trace.csv")
    assert trace["step"].tolist() == list(range(20))
    print("   ✓ Resume working")


def test_build_graph(workdir):
    print("\n4. Building graphs...")
    assert run_stage(workdir, "build-graph") == cli.EXIT_OK
    report = json.loads((workdir / "graphs" / "mix0000.json").read_text())
    assert report["m"] >= 1
    assert report["partition"] == "oracle"
    assert (workdir / "graphs" / "mix0000.cdg").exists()
    print(f"   ✓ Graph built: n={report['n']} m={report['m']}")


def test_train_head(workdir):
    print("\n5. Training heads...")
    assert run_stage(workdir, "train-head") == cli.EXIT_OK
    head = json.loads((workdir / "heads" / "mix0001.json").read_text())
    assert head["k_eff"] >= 1
    assert head["kind"] == "mlp"
    assert len(head["assignments"]) == report_nodes(workdir, "mix0001")
    print(f"   ✓ Head trained: k_eff={head['k_eff']} Q={head['Q']:.2f}")


def report_nodes(workdir, mix_id):
    return json.loads((workdir / "graphs" / f"{mix_id}.json").read_text())["n"]


def test_separate(workdir):
    print("\n6. Separating...")
    assert run_stage(workdir, "separate") == cli.EXIT_OK
    head = json.loads((workdir / "heads" / "mix0000.json").read_text())
    estimates = sorted((workdir / "out" / "mix0000").glob("est*.wav"))
    assert len(estimates) == head["k_eff"]
    mixture = read_mixture(workdir / "mix" / "mix0000").mixture
    assert all(len(read_wav(path)) == len(mixture) for path in estimates)
    print(f"   ✓ {len(estimates)} estimates written")


def test_eval(workdir):
    print("\n7. Evaluating...")
    assert run_stage(workdir, "eval") == cli.EXIT_OK
    table = pd.read_csv(workdir / "reports" / "eval.csv")
    assert list(table.columns) == EVAL_COLUMNS
    assert table["mix_id"].tolist() == ["mix0000", "mix0001"]
    assert table["purity"].between(0.5, 1.0).all()
    summary = json.loads((workdir / "reports" / "eval_summary.json").read_text())
    assert [group["group"] for group in summary["groups"]] == ["2spk", "all"]
    assert summary["oracle_mask_si_snri"] > 0.0
    print(f"   ✓ Mean SI-SNRi {table['si_snri'].mean():.2f} dB")


def test_registry(workdir):
    print("\n8. Checking run registry...")
    session = get_session_maker(init_db(default_registry_url(workdir)))()
    try:
        runs = session.query(SeparationRun).all()
        assert sorted(run.mix_id for run in runs) == ["mix0000", "mix0001"]
        assert all(run.run_seed == 7 for run in runs)
        expected_hash = config_hash(load_pipeline_config(TINY_CONFIG))
        assert all(run.run_metadata["config_hash"] == expected_hash for run in runs)
        assert all(run.run_metadata["seed"] == 7 for run in runs)
    finally:
        session.close()
    print("   ✓ Registry working")


def test_reports(workdir):
    print("\n9. Running reports...")
    for stage in ("trend-report", "compare-heads", "theta-sweep", "frame-sweep"):
        assert run_stage(workdir, stage) == cli.EXIT_OK, stage
    trend = json.loads((workdir / "reports" / "trend.json").read_text())
    assert [row["step"] for row in trend["rows"]] == [10, 20]
    sweep = pd.read_csv(workdir / "reports" / "theta_sweep.csv")
    assert sorted(sweep["theta"].unique()) == [0.3, 0.6]
    frames = json.loads((workdir / "reports" / "frame_sweep.json").read_text())
    assert [row["frame_len"] for row in frames["rows"]] == [64, 128]
    compare = json.loads((workdir / "reports" / "compare_heads.json").read_text())
    assert isinstance(compare["direction_holds"], bool)

    session = get_session_maker(init_db(default_registry_url(workdir)))()
    try:
        assert session.query(CheckpointScore).count() == 2
    finally:
        session.close()
    print("   ✓ Reports written")


def test_amortized_head(workdir):
    print("\n10. Training amortized head...")
    assert run_stage(workdir, "train-head", "--mode", "amortized") == cli.EXIT_OK
    assert (workdir / "heads" / "amortized.cdm").exists()
    head = json.loads((workdir / "heads" / "mix0000.json").read_text())
    assert head["mode"] == "amortized"
    print("   ✓ Amortized head working")


def test_worker_pool():
    print("\n11. Checking worker pool...")
    assert parallel_map(mix_index, ["mix0003", "mix0001", "train0002"], 2) == [3, 1, 2]
    print("   ✓ Worker pool preserves order")


def main():
    """Run all smoke checks in order."""
    print("=" * 60)
    print("CONDEEPMOD SETUP TEST")
    print("=" * 60)

    with tempfile.TemporaryDirectory() as tmp:
        workdir = Path(tmp)
        steps = [
            lambda: test_synth(workdir),
            lambda: test_pretrain(workdir),
            lambda: test_resume_keeps_trace(workdir),
            lambda: test_build_graph(workdir),
            lambda: test_train_head(workdir),
            lambda: test_separate(workdir),
            lambda: test_eval(workdir),
            lambda: test_registry(workdir),
            lambda: test_reports(workdir),
            lambda: test_amortized_head(workdir),
            test_worker_pool,
        ]
        results = []
        for step in steps:
            try:
                step()
                results.append(True)
            except AssertionError as e:
                print(f"   ✗ Failed: {e}")
                results.append(False)
                break

    print("\n" + "=" * 60)
    print(f"RESULTS: {sum(results)}/{len(steps)} checks passed")
    print("=" * 60)

    if all(results) and len(results) == len(steps):
        print("\n✓ All checks passed! The pipeline is ready to use.")
        return 0
    print("\n✗ Some checks failed. Check the log under <workdir>/logs.")
    return 1


if __name__ == "__main__":
    sys.exit(main())
