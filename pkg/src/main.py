"""Command-line entry point for the separation pipeline."""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from dotenv import load_dotenv
from pydantic import ValidationError

# Add repository root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from config.settings import RuntimeSettings, load_pipeline_config
from src.db.models import default_registry_url
from src.pipeline.reports import run_compare_heads, run_frame_sweep, run_theta_sweep, run_trend_report
from src.pipeline.stages import (
    StageContext,
    run_build_graph,
    run_eval,
    run_pretrain,
    run_separate,
    run_synth,
    run_train_head,
)
from src.pipeline.workspace import Workspace
from src.utils.errors import ConDeepModError, ConfigError, UsageError
from src.utils.logger import setup_logger

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

PIPELINE_ORDER = ["synth", "pretrain", "build-graph", "train-head", "separate", "eval"]


def _pretrain(ctx: StageContext, args: argparse.Namespace) -> Dict[str, Any]:
    return run_pretrain(ctx, fine_tune_encoder=getattr(args, "fine_tune", False), resume=getattr(args, "resume", None))


def _pipeline(ctx: StageContext, args: argparse.Namespace) -> Dict[str, Any]:
    return {stage: STAGES[stage](ctx, args) for stage in PIPELINE_ORDER}


STAGES: Dict[str, Callable[[StageContext, argparse.Namespace], Dict[str, Any]]] = {
    "synth": lambda ctx, args: run_synth(ctx),
    "pretrain": _pretrain,
    "build-graph": lambda ctx, args: run_build_graph(ctx),
    "train-head": lambda ctx, args: run_train_head(ctx),
    "separate": lambda ctx, args: run_separate(ctx),
    "eval": lambda ctx, args: run_eval(ctx),
    "trend-report": lambda ctx, args: run_trend_report(ctx),
    "compare-heads": lambda ctx, args: run_compare_heads(ctx),
    "theta-sweep": lambda ctx, args: run_theta_sweep(ctx),
    "frame-sweep": lambda ctx, args: run_frame_sweep(ctx),
    "pipeline": _pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="condeepmod",
        description="Unsupervised speech separation by contrastive frame embeddings and modularity clustering",
    )
    parser.add_argument("--workdir", type=Path, default=Path("work"), help="Root directory for every artifact")
    parser.add_argument("--config", type=Path, default=None, help="Pipeline config JSON (default: config/default_pipeline.json)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one config value, e.g. --set graph.theta=0.3 (repeatable)")
    parser.add_argument("--log-level", default=None, help="Overrides CONDEEPMOD_LOG_LEVEL")

    commands = parser.add_subparsers(dest="command", required=True)
    synth = commands.add_parser("synth", help="Synthesize the speaker corpus and mixtures")
    synth.add_argument("--speakers", type=int, default=None, help="Number of synthetic speakers")
    synth.add_argument("--seed", type=int, default=None, help="Root seed")

    pretrain = commands.add_parser("pretrain", help="Contrastive pretraining of the frame encoder")
    pretrain.add_argument("--fine-tune", action="store_true", help="Also fine-tune on training-mixture sources")
    pretrain.add_argument("--resume", type=Path, default=None, help="Checkpoint to resume from")

    commands.add_parser("build-graph", help="Embed mixture frames and build similarity graphs")

    head = commands.add_parser("train-head", help="Train the modularity assignment head")
    head.add_argument("--mode", choices=["per_mixture", "amortized"], default=None)
    head.add_argument("--kind", choices=["mlp", "gcn"], default=None)

    commands.add_parser("separate", help="Mask mixtures into source estimates")
    commands.add_parser("eval", help="Score estimates against the reference sources")
    commands.add_parser("trend-report", help="Loss vs conductance vs modularity over checkpoints")
    commands.add_parser("compare-heads", help="MLP head against GCN head on held-out mixtures")
    commands.add_parser("theta-sweep", help="Graph quality across similarity thresholds")
    commands.add_parser("frame-sweep", help="Graph quality across frame lengths")
    commands.add_parser("pipeline", help="Run synth through eval in order")
    return parser


def collect_overrides(args: argparse.Namespace) -> List[str]:
    """--set values plus the subcommand shortcuts, shortcuts last so they win."""
    overrides = list(args.overrides)
    if getattr(args, "speakers", None) is not None:
        overrides.append(f"corpus.n_speakers={args.speakers}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "mode", None) is not None:
        overrides.append(f"head.mode={json.dumps(args.mode)}")
    if getattr(args, "kind", None) is not None:
        overrides.append(f"head.kind={json.dumps(args.kind)}")
    return overrides


def report_error(payload: Dict[str, Any]) -> None:
    """One JSON object on stderr."""
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    sys.stderr.flush()


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    stage = args.command

    try:
        settings = RuntimeSettings()
    except ValidationError as error:
        report_error(ConfigError("invalid CONDEEPMOD_* environment", {"reason": str(error)}).to_dict(stage))
        return EXIT_USAGE

    level = (args.log_level or settings.log_level).upper()
    if not isinstance(logging.getLevelName(level), int):
        report_error(UsageError(f"unknown log level '{level}'", {"log_level": level}).to_dict(stage))
        return EXIT_USAGE

    workdir = Path(args.workdir)
    logger = setup_logger(level=level, log_dir=workdir / "logs")

    try:
        config = load_pipeline_config(args.config, collect_overrides(args))
        ctx = StageContext(
            config=config,
            workspace=Workspace(workdir),
            threads=settings.threads,
            registry_url=settings.registry_url or default_registry_url(workdir),
        )
        logger.info(f"Stage {stage} starting: workdir={workdir} seed={config.seed} threads={settings.threads}")
        summary = STAGES[stage](ctx, args)
        logger.info(f"Stage {stage} finished: {json.dumps(summary, sort_keys=True, default=str)}")
    except (UsageError, ConfigError) as error:
        logger.error(f"{stage}: {error.message}")
        report_error(error.to_dict(stage))
        return EXIT_USAGE
    except ConDeepModError as error:
        logger.error(f"{stage} failed: {error.message}")
        report_error(error.to_dict(stage))
        return EXIT_FAILURE
    except Exception as e:
        logger.error(f"Fatal error in {stage}: {e}", exc_info=True)
        report_error({"error": "internal", "stage": stage, "message": str(e), "details": {}})
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
