"""Experiment reports: loss/graph-quality trend, head comparison and sweeps."""
from functools import partial
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from config.settings import PipelineConfig, build_config, config_to_dict
from src.autodiff.checkpoint import load_checkpoint
from src.db.models import CheckpointScore, record_rows
from src.dsp.audio import frame
from src.dsp.corpus import oracle_frame_labels, read_mixture
from src.evaluation.metrics import cluster_purity
from src.graph.frame_graph import build_graph, partition_scores, theta_sweep
from src.models.contrastive import evaluate_loss, pretrain
from src.models.encoder import encode
from src.models.heads import HeadInput, cluster_frames
from src.pipeline.stages import (
    StageContext,
    load_corpus_frames,
    load_head_input,
    mix_index,
    oracle_partition,
    parallel_map,
    write_table,
)
from src.pipeline.workspace import Workspace, to_jsonable, write_json
from src.utils.errors import DegenerateGraphError, UsageError
from src.utils.logger import get_logger
from src.utils.seeding import STAGE_KEYS, derive_seed

logger = get_logger("reports")


def _spearman(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    if len(x) < 2:
        return None
    value = spearmanr(x, y)[0]
    return None if np.isnan(value) else float(value)


def _mean_or_none(values: List[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def _write_report(workspace: Workspace, name: str, rows: List[Dict[str, Any]], summary: Dict[str, Any]) -> Path:
    write_table(rows, workspace.reports_dir / f"{name}.csv")
    path = workspace.reports_dir / f"{name}.json"
    write_json(path, to_jsonable({**summary, "rows": rows}))
    return path


def _held_out_ids(ctx: StageContext, stage: str) -> List[str]:
    return ctx.workspace.require_mixtures(stage)[: ctx.config.trend.n_mixtures]


def _mlp_scores(config: PipelineConfig, embeddings: np.ndarray, seed: int):
    """MLP-head C and Q on a fresh graph, or None when the graph has no edges."""
    try:
        graph = build_graph(embeddings, config.graph.theta)
    except DegenerateGraphError:
        return None
    head_config = config.head.model_copy(update={"kind": "mlp"})
    cluster = cluster_frames(HeadInput.build(embeddings, graph, "mlp"), head_config, seed)
    return cluster, partition_scores(graph, cluster.partition)


# ---------------------------------------------------------------- trend

def _checkpoint_row(config: PipelineConfig, workspace: Workspace, ids: List[str], frames_by_speaker, path: Path) -> Dict[str, Any]:
    params = load_checkpoint(path, config.pretrain.dtype)
    loss = evaluate_loss(params, frames_by_speaker, config.encoder, config.pretrain, derive_seed(config.seed, STAGE_KEYS["trend"]))
    conductances, modularities = [], []
    for mix_id in ids:
        record = read_mixture(workspace.mixture_dir(mix_id))
        embeddings = encode(config.encoder, params, frame(record.mixture, config.framing.frame_len, config.framing.hop))
        outcome = _mlp_scores(config, embeddings, derive_seed(config.seed, STAGE_KEYS["trend"], mix_index(mix_id)))
        if outcome is None:
            logger.warning(f"{path.name}: {mix_id} graph has no edges, skipped")
            continue
        conductances.append(outcome[1].conductance)
        modularities.append(outcome[1].modularity)
    return {
        "checkpoint": path.name,
        "step": params.step,
        "loss": loss,
        "C": _mean_or_none(conductances),
        "Q": _mean_or_none(modularities),
        "graphs": len(conductances),
    }


def _monotone(values: List[Optional[float]], increasing: bool) -> Optional[bool]:
    present = [v for v in values if v is not None]
    if len(present) < 2:
        return None
    steps = np.diff(present)
    return bool(np.all(steps >= 0) if increasing else np.all(steps <= 0))


def run_trend_report(ctx: StageContext) -> Dict[str, Any]:
    """Loss, mean C and mean Q per pretraining checkpoint, with rank correlations."""
    config, workspace = ctx.config, ctx.workspace
    checkpoints = sorted(workspace.checkpoints_dir.glob("pretrain_*.cdm"))
    if not checkpoints:
        raise UsageError(
            f"trend-report: no checkpoints under {workspace.checkpoints_dir} (run `pretrain` first)",
            {"stage": "trend-report"},
        )
    ids = _held_out_ids(ctx, "trend-report")
    frames_by_speaker = load_corpus_frames(workspace, config.framing.frame_len, config.framing.hop, "trend-report")
    rows = parallel_map(partial(_checkpoint_row, config, workspace, ids, frames_by_speaker), checkpoints, ctx.threads)

    scored = [row for row in rows if row["C"] is not None]
    by_loss = sorted(scored, key=lambda row: -row["loss"])
    summary = {
        "seed": config.seed,
        "mixtures": ids,
        "spearman_loss_C": _spearman([r["loss"] for r in scored], [r["C"] for r in scored]),
        "spearman_loss_Q": _spearman([r["loss"] for r in scored], [r["Q"] for r in scored]),
        # Walking from high to low loss, C should fall and Q should rise.
        "C_monotone": _monotone([r["C"] for r in by_loss], increasing=False),
        "Q_monotone": _monotone([r["Q"] for r in by_loss], increasing=True),
    }
    _write_report(workspace, "trend", rows, summary)
    if ctx.registry_url:
        record_rows(ctx.registry_url, CheckpointScore, [
            {
                "checkpoint": row["checkpoint"],
                "step": row["step"],
                "loss": row["loss"],
                "conductance": row["C"],
                "modularity": row["Q"],
                "run_seed": config.seed,
            }
            for row in rows
        ])
    logger.info(
        f"Trend over {len(rows)} checkpoints: rho(loss, C)={summary['spearman_loss_C']} "
        f"rho(loss, Q)={summary['spearman_loss_Q']}"
    )
    return summary


# ---------------------------------------------------------------- compare-heads

def run_compare_heads(ctx: StageContext) -> Dict[str, Any]:
    """MLP head on embeddings against the GCN head on the same graphs."""
    config, workspace = ctx.config, ctx.workspace
    rows = []
    for mix_id in _held_out_ids(ctx, "compare-heads"):
        seed = derive_seed(config.seed, STAGE_KEYS["head"], mix_index(mix_id))
        row: Dict[str, Any] = {"mix_id": mix_id}
        for kind in ("mlp", "gcn"):
            head_input = load_head_input(config, workspace, mix_id, kind, "compare-heads")
            cluster = cluster_frames(head_input, config.head.model_copy(update={"kind": kind}), seed)
            scores = partition_scores(head_input.graph, cluster.partition)
            row.update({f"C_{kind}": scores.conductance, f"Q_{kind}": scores.modularity, f"k_{kind}": cluster.k_eff})
        rows.append(row)

    table = pd.DataFrame(rows)
    means = {column: float(table[column].mean()) for column in ("C_mlp", "Q_mlp", "C_gcn", "Q_gcn")}
    direction = means["C_mlp"] < means["C_gcn"] and means["Q_mlp"] > means["Q_gcn"]
    summary = {"seed": config.seed, "gcn_features": config.head.gcn_features, **means, "direction_holds": bool(direction)}
    _write_report(workspace, "compare_heads", rows, summary)
    if not direction:
        logger.warning(
            f"MLP head did not beat GCN on both metrics: C {means['C_mlp']:.2f} vs {means['C_gcn']:.2f}, "
            f"Q {means['Q_mlp']:.2f} vs {means['Q_gcn']:.2f}"
        )
    else:
        logger.info(f"MLP head: C={means['C_mlp']:.2f} Q={means['Q_mlp']:.2f}; GCN head: C={means['C_gcn']:.2f} Q={means['Q_gcn']:.2f}")
    return summary


# ---------------------------------------------------------------- theta sweep

def run_theta_sweep(ctx: StageContext) -> Dict[str, Any]:
    """Edge count, C and Q of the oracle partition at each configured threshold."""
    config, workspace = ctx.config, ctx.workspace
    rows = []
    for mix_id in _held_out_ids(ctx, "theta-sweep"):
        embeddings = np.load(workspace.require(workspace.embeddings_path(mix_id), "theta-sweep", "build-graph"))
        partition = oracle_partition(config, read_mixture(workspace.mixture_dir(mix_id)))
        rows.extend({"mix_id": mix_id, **row} for row in theta_sweep(embeddings, config.graph.sweep, partition))

    table = pd.DataFrame(rows)
    by_theta = table.groupby("theta")[["m", "C", "Q"]].mean().reset_index()
    summary = {"seed": config.seed, "by_theta": by_theta.replace({np.nan: None}).to_dict("records")}
    _write_report(workspace, "theta_sweep", rows, summary)
    logger.info(f"Theta sweep over {config.graph.sweep} on {table['mix_id'].nunique()} mixtures")
    return summary


# ---------------------------------------------------------------- frame-length sweep

def sweep_config(config: PipelineConfig, frame_len: int) -> PipelineConfig:
    document = config_to_dict(config)
    document["framing"].update({"frame_len": frame_len, "hop": max(1, frame_len // 4)})
    document["encoder"]["input_len"] = frame_len
    document["pretrain"]["steps"] = config.trend.sweep_pretrain_steps
    return build_config(document)


def _frame_length_row(config: PipelineConfig, workspace: Workspace, ids: List[str], frame_len: int) -> Dict[str, Any]:
    swept = sweep_config(config, frame_len)
    framing = swept.framing
    frames_by_speaker = load_corpus_frames(workspace, framing.frame_len, framing.hop, "frame-sweep")
    result = pretrain(frames_by_speaker, swept.encoder, swept.pretrain, swept.seed)
    conductances, modularities, purities = [], [], []
    for mix_id in ids:
        record = read_mixture(workspace.mixture_dir(mix_id))
        embeddings = encode(swept.encoder, result.params, frame(record.mixture, framing.frame_len, framing.hop))
        outcome = _mlp_scores(swept, embeddings, derive_seed(swept.seed, STAGE_KEYS["trend"], mix_index(mix_id), frame_len))
        if outcome is None:
            continue
        cluster, scores = outcome
        conductances.append(scores.conductance)
        modularities.append(scores.modularity)
        purities.append(cluster_purity(cluster.partition.labels, oracle_frame_labels(record, framing.frame_len, framing.hop)))
    return {
        "frame_len": frame_len,
        "hop": framing.hop,
        "final_loss": result.trace[-1].loss,
        "C": _mean_or_none(conductances),
        "Q": _mean_or_none(modularities),
        "purity": _mean_or_none(purities),
        "graphs": len(conductances),
    }


def run_frame_sweep(ctx: StageContext) -> Dict[str, Any]:
    """Short pretraining per frame length, then graph quality and purity on held-out mixtures."""
    config, workspace = ctx.config, ctx.workspace
    ids = _held_out_ids(ctx, "frame-sweep")
    lengths = config.trend.frame_lengths
    for length in lengths:
        sweep_config(config, length)
    rows = parallel_map(partial(_frame_length_row, config, workspace, ids), lengths, ctx.threads)
    summary = {"seed": config.seed, "steps": config.trend.sweep_pretrain_steps, "mixtures": ids}
    _write_report(workspace, "frame_sweep", rows, summary)
    logger.info(f"Frame sweep over {list(lengths)} done")
    return summary
