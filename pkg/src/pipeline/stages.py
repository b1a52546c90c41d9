"""Pipeline stages: synth, pretrain, build-graph, train-head, separate, eval.

Every stage reads its inputs from and writes its artifacts to a Workspace.
Per-mixture work fans out over a process pool; results are always collected
in mix_id order.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from functools import partial
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from config.settings import PipelineConfig, config_hash
from src.autodiff.checkpoint import load_checkpoint, save_checkpoint
from src.db.models import SeparationRun, record_rows
from src.dsp.audio import FrameMatrix, Waveform, frame, read_wav, write_wav
from src.dsp.corpus import (
    SpeakerSpec,
    activity_mask,
    make_speaker_specs,
    oracle_frame_labels,
    overlapped_frame_fraction,
    read_mixture,
    synth_mixture,
    synth_utterance,
    write_mixture,
)
from src.evaluation.metrics import aggregate_scores, cluster_purity, match_and_score
from src.graph.frame_graph import (
    Partition,
    SimilarityGraph,
    build_graph,
    graph_report,
    load_graph,
    partition_scores,
    save_graph,
)
from src.models.contrastive import fine_tune, pretrain
from src.models.encoder import encode
from src.models.heads import HeadInput, cluster_frames, train_head_amortized
from src.separation.masks import apply_masks, masks_from_partition, oracle_masks
from src.pipeline.workspace import TRAIN_PREFIX, Workspace, read_json, to_jsonable, write_json
from src.utils.errors import DataError, DegenerateGraphError, NumericalError, UsageError
from src.utils.logger import get_logger
from src.utils.seeding import STAGE_KEYS, derive_seed, make_rng

logger = get_logger("pipeline")

SDR_VARIANT = "snr-form: 10*log10(||s||^2 / ||s_hat - s||^2), no distortion filters"
EVAL_COLUMNS = ["mix_id", "k_eff", "si_snri", "sdri", "purity", "C", "Q"]
CONSISTENCY_TOL = 1e-12


@dataclass(frozen=True)
class StageContext:
    config: PipelineConfig
    workspace: Workspace
    threads: int = 1
    registry_url: Optional[str] = None


def parallel_map(fn: Callable, items: Iterable, threads: int) -> List[Any]:
    """Order-preserving map over a process pool capped at `threads` workers."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


def mix_index(mix_id: str) -> int:
    digits = "".join(ch for ch in mix_id if ch.isdigit())
    return int(digits) if digits else 0


def write_table(rows: Sequence[Dict[str, Any]], csv_path: Path, columns: Optional[List[str]] = None) -> pd.DataFrame:
    table = pd.DataFrame(list(rows), columns=columns)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(csv_path, index=False)
    return table


# ---------------------------------------------------------------- synth

def _synth_mixture_job(config: PipelineConfig, workspace: Workspace, specs: List[SpeakerSpec], job) -> Dict[str, Any]:
    mix_id, split_key, index = job
    corpus = config.corpus
    rng = make_rng(config.seed, STAGE_KEYS["synth"], split_key, index)
    count = corpus.sources_per_mixture[index % len(corpus.sources_per_mixture)]
    chosen = rng.choice(len(specs), size=count, replace=False)
    record = synth_mixture(
        [specs[c] for c in chosen],
        corpus.mixture_s,
        corpus.overlap_fraction,
        tuple(corpus.gain_db_range),
        seed=derive_seed(config.seed, STAGE_KEYS["synth"], split_key + 10, index),
        sample_rate=config.framing.sample_rate,
    )
    overlap = overlapped_frame_fraction(record, config.framing.frame_len, config.framing.hop)
    write_mixture(
        workspace.mixture_dir(mix_id),
        record,
        meta={"mix_id": mix_id, "seed": config.seed, "overlapped_frame_fraction": overlap},
    )
    return {"mix_id": mix_id, "n_sources": count, "overlapped_frame_fraction": overlap}


def run_synth(ctx: StageContext) -> Dict[str, Any]:
    """Speaker corpus plus test (`mix*`) and training (`train*`) mixtures."""
    config, workspace = ctx.config, ctx.workspace
    corpus = config.corpus
    rate = config.framing.sample_rate
    specs = make_speaker_specs(corpus.n_speakers, derive_seed(config.seed, STAGE_KEYS["synth"], 0))
    for spec in specs:
        for utterance in range(corpus.utterances_per_speaker):
            waveform = synth_utterance(
                spec,
                corpus.utterance_s,
                derive_seed(config.seed, STAGE_KEYS["synth"], 1, spec.speaker_id, utterance),
                rate,
            )
            write_wav(workspace.corpus_dir / f"{spec.speaker_id:02d}" / f"{utterance:03d}.wav", waveform)
    write_json(workspace.speakers_path, {"seed": config.seed, "speakers": [spec.to_dict() for spec in specs]})
    logger.info(f"Synthesized {len(specs)} speakers x {corpus.utterances_per_speaker} utterances")

    jobs = [(f"mix{i:04d}", 2, i) for i in range(corpus.n_mixtures)]
    jobs += [(f"{TRAIN_PREFIX}{i:04d}", 3, i) for i in range(corpus.n_train_mixtures)]
    summaries = parallel_map(partial(_synth_mixture_job, config, workspace, specs), jobs, ctx.threads)
    logger.info(f"Synthesized {corpus.n_mixtures} test and {corpus.n_train_mixtures} training mixtures")
    return {"speakers": len(specs), "mixtures": summaries}


# ---------------------------------------------------------------- pretrain

def load_corpus_frames(workspace: Workspace, frame_len: int, hop: int, stage: str) -> Dict[int, np.ndarray]:
    workspace.require(workspace.speakers_path, stage, "synth")
    speakers = read_json(workspace.speakers_path)["speakers"]
    frames_by_speaker = {}
    for speaker in speakers:
        speaker_id = int(speaker["speaker_id"])
        paths = sorted((workspace.corpus_dir / f"{speaker_id:02d}").glob("*.wav"))
        if not paths:
            raise DataError(f"{stage}: speaker {speaker_id} has no utterances", {"speaker_id": speaker_id})
        frames_by_speaker[speaker_id] = np.concatenate([frame(read_wav(path), frame_len, hop).frames for path in paths])
    return frames_by_speaker


def load_source_frames(workspace: Workspace, frame_len: int, hop: int) -> Dict[int, np.ndarray]:
    """Frames of isolated training-mixture sources, keeping frames fully inside an active turn."""
    grouped: Dict[int, List[np.ndarray]] = {}
    for mix_id in workspace.mixture_ids(TRAIN_PREFIX):
        record = read_mixture(workspace.mixture_dir(mix_id))
        activity = activity_mask(record)
        for index, (source, speaker_id) in enumerate(zip(record.sources, record.speaker_ids)):
            active = frame(Waveform(activity[index].astype(float), source.sample_rate), frame_len, hop).frames.min(axis=1) > 0
            frames = frame(source, frame_len, hop).frames[active]
            if frames.shape[0]:
                grouped.setdefault(int(speaker_id), []).append(frames)
    return {speaker: np.concatenate(chunks) for speaker, chunks in sorted(grouped.items())}


def _write_loss_trace(path: Path, records, keep_before: Optional[int] = None) -> None:
    rows = [asdict(record) for record in records]
    if keep_before is not None and path.exists():
        previous = pd.read_csv(path)
        rows = previous[previous["step"] < keep_before].to_dict("records") + rows
    write_table(rows, path, ["step", "loss", "lr"])


def run_pretrain(ctx: StageContext, fine_tune_encoder: bool = False, resume: Optional[Path] = None) -> Dict[str, Any]:
    config, workspace = ctx.config, ctx.workspace
    framing, settings = config.framing, config.pretrain
    frames = load_corpus_frames(workspace, framing.frame_len, framing.hop, "pretrain")
    resumed = None
    if resume is not None:
        resumed = load_checkpoint(workspace.require(Path(resume), "pretrain"), settings.dtype)
        logger.info(f"Resuming pretraining from {resume} at step {resumed.step}")
    result = pretrain(frames, config.encoder, settings, config.seed, workspace.checkpoints_dir, resume=resumed)
    save_checkpoint(workspace.encoder_path, result.params)
    _write_loss_trace(workspace.loss_trace_path, result.trace, keep_before=resumed.step if resumed else None)
    summary: Dict[str, Any] = {
        "steps": result.params.step,
        "final_loss": result.trace[-1].loss if result.trace else None,
        "checkpoints": len(result.checkpoints),
    }

    steps = settings.fine_tune_steps
    if fine_tune_encoder and steps == 0:
        steps = max(1, settings.steps // 4)
    if steps > 0:
        source_frames = load_source_frames(workspace, framing.frame_len, framing.hop)
        if len(source_frames) < 2:
            raise UsageError(
                "pretrain: fine-tuning needs training mixtures (set corpus.n_train_mixtures and re-run synth)",
                {"stage": "pretrain"},
            )
        tuned = fine_tune(result.params, source_frames, config.encoder, settings, config.seed, steps)
        save_checkpoint(workspace.finetuned_encoder_path, tuned.params)
        summary["fine_tune_final_loss"] = tuned.trace[-1].loss
    elif workspace.finetuned_encoder_path.exists():
        workspace.finetuned_encoder_path.unlink()
    return summary


# ---------------------------------------------------------------- build-graph

def mixture_frames(config: PipelineConfig, workspace: Workspace, mix_id: str):
    record = read_mixture(workspace.mixture_dir(mix_id))
    return record, frame(record.mixture, config.framing.frame_len, config.framing.hop)


def oracle_partition(config: PipelineConfig, record) -> Partition:
    labels = oracle_frame_labels(record, config.framing.frame_len, config.framing.hop)
    return Partition(labels, len(record.sources))


def _graph_job(config: PipelineConfig, workspace: Workspace, encoder_path: Path, mix_id: str) -> Dict[str, Any]:
    record, fm = mixture_frames(config, workspace, mix_id)
    params = load_checkpoint(encoder_path, config.pretrain.dtype)
    embeddings = encode(config.encoder, params, fm)
    workspace.graphs_dir.mkdir(parents=True, exist_ok=True)
    np.save(workspace.embeddings_path(mix_id), embeddings)
    try:
        graph = build_graph(embeddings, config.graph.theta)
    except DegenerateGraphError as error:
        raise DegenerateGraphError(f"build-graph: {mix_id} has no edges at theta={config.graph.theta}", {"mix_id": mix_id, **error.details}) from error
    save_graph(workspace.graph_path(mix_id), graph)
    report = graph_report(graph, oracle_partition(config, record))
    report.update({"mix_id": mix_id, "seed": config.seed, "partition": "oracle"})
    write_json(workspace.graph_report_path(mix_id), to_jsonable(report))
    return report


def run_build_graph(ctx: StageContext) -> Dict[str, Any]:
    workspace = ctx.workspace
    encoder_path = workspace.require(workspace.inference_encoder_path(), "build-graph", "pretrain")
    ids = workspace.require_mixtures("build-graph")
    reports = parallel_map(partial(_graph_job, ctx.config, workspace, encoder_path), ids, ctx.threads)
    mean_edges = float(np.mean([report["m"] for report in reports]))
    logger.info(f"Built {len(reports)} graphs, mean m={mean_edges:.1f}")
    return {"graphs": len(reports), "mean_m": mean_edges}


# ---------------------------------------------------------------- train-head

def head_features(config: PipelineConfig, workspace: Workspace, mix_id: str, kind: str) -> np.ndarray:
    if kind == "gcn" and config.head.gcn_features == "frames":
        return mixture_frames(config, workspace, mix_id)[1].frames
    return np.load(workspace.embeddings_path(mix_id))


def load_head_input(config: PipelineConfig, workspace: Workspace, mix_id: str, kind: str, stage: str) -> HeadInput:
    graph_path = workspace.require(workspace.graph_path(mix_id), stage, "build-graph")
    workspace.require(workspace.embeddings_path(mix_id), stage, "build-graph")
    graph = load_graph(graph_path)
    return HeadInput.build(head_features(config, workspace, mix_id, kind), graph, kind)


def _head_payload(config: PipelineConfig, mix_id: str, seed: int, graph: SimilarityGraph, cluster) -> Dict[str, Any]:
    scores = partition_scores(graph, cluster.partition)
    return {
        "mix_id": mix_id,
        "seed": seed,
        "kind": config.head.kind,
        "mode": config.head.mode,
        "k_eff": cluster.k_eff,
        "k_hardened": cluster.hardened.k,
        "loss_final": cluster.head.loss_final,
        "steps": cluster.head.steps,
        "C": scores.conductance,
        "Q": scores.modularity,
        "Q_community": scores.community_modularity,
        "assignments": cluster.partition.labels.tolist(),
    }


def _head_job(config: PipelineConfig, workspace: Workspace, mix_id: str) -> Dict[str, Any]:
    head_input = load_head_input(config, workspace, mix_id, config.head.kind, "train-head")
    seed = derive_seed(config.seed, STAGE_KEYS["head"], mix_index(mix_id))
    cluster = cluster_frames(head_input, config.head, seed)
    save_checkpoint(workspace.head_params_path(mix_id), cluster.head.params)
    payload = _head_payload(config, mix_id, seed, head_input.graph, cluster)
    write_json(workspace.head_result_path(mix_id), to_jsonable(payload))
    return payload


def _amortized_inputs(ctx: StageContext, encoder_path: Path) -> List[HeadInput]:
    config, workspace = ctx.config, ctx.workspace
    train_ids = workspace.mixture_ids(TRAIN_PREFIX)
    if not train_ids:
        logger.warning("No training mixtures; amortized head trains on the test graphs")
        return [load_head_input(config, workspace, mix_id, config.head.kind, "train-head") for mix_id in workspace.mixture_ids()]
    params = load_checkpoint(encoder_path, config.pretrain.dtype)
    inputs = []
    for mix_id in train_ids:
        _, fm = mixture_frames(config, workspace, mix_id)
        embeddings = encode(config.encoder, params, fm)
        try:
            graph = build_graph(embeddings, config.graph.theta)
        except DegenerateGraphError:
            logger.warning(f"Skipping training mixture {mix_id}: no edges at theta={config.graph.theta}")
            continue
        use_frames = config.head.kind == "gcn" and config.head.gcn_features == "frames"
        inputs.append(HeadInput.build(fm.frames if use_frames else embeddings, graph, config.head.kind))
    if not inputs:
        raise DataError("train-head: no usable training graphs for the amortized head")
    return inputs


def run_train_head(ctx: StageContext) -> Dict[str, Any]:
    config, workspace = ctx.config, ctx.workspace
    ids = workspace.require_mixtures("train-head")
    if config.head.mode == "per_mixture":
        payloads = parallel_map(partial(_head_job, config, workspace), ids, ctx.threads)
    else:
        encoder_path = workspace.require(workspace.inference_encoder_path(), "train-head", "pretrain")
        seed = derive_seed(config.seed, STAGE_KEYS["head"])
        head = train_head_amortized(_amortized_inputs(ctx, encoder_path), config.head, seed)
        save_checkpoint(workspace.heads_dir / "amortized.cdm", head.params)
        payloads = []
        for mix_id in ids:
            head_input = load_head_input(config, workspace, mix_id, config.head.kind, "train-head")
            cluster = cluster_frames(head_input, config.head, seed, params=head.params)
            payload = _head_payload(config, mix_id, seed, head_input.graph, cluster)
            write_json(workspace.head_result_path(mix_id), to_jsonable(payload))
            payloads.append(payload)
    k_values = [payload["k_eff"] for payload in payloads]
    logger.info(f"Trained {config.head.kind} heads on {len(payloads)} mixtures, k_eff={k_values}")
    return {"mixtures": len(payloads), "mean_Q": float(np.mean([p["Q"] for p in payloads]))}


# ---------------------------------------------------------------- separate

def _separate_job(config: PipelineConfig, workspace: Workspace, mix_id: str) -> Dict[str, Any]:
    result_path = workspace.require(workspace.head_result_path(mix_id), "separate", "train-head")
    head = read_json(result_path)
    record, fm = mixture_frames(config, workspace, mix_id)
    partition = Partition(np.asarray(head["assignments"]), int(head["k_eff"]))
    if partition.n != fm.n_frames:
        raise DataError(f"separate: {mix_id} assignments do not match its frames", {"mix_id": mix_id})
    estimates = apply_masks(record.mixture, fm, masks_from_partition(partition))
    residual = np.max(np.abs(np.sum([e.samples for e in estimates], axis=0) - record.mixture.samples))
    if residual > CONSISTENCY_TOL:
        raise NumericalError(f"separate: {mix_id} estimates do not sum to the mixture", {"residual": float(residual)})
    directory = workspace.estimates_dir(mix_id)
    for stale in directory.glob("est*.wav"):
        stale.unlink()
    for index, estimate in enumerate(estimates):
        write_wav(directory / f"est{index}.wav", estimate)
    return {"mix_id": mix_id, "estimates": len(estimates)}


def run_separate(ctx: StageContext) -> Dict[str, Any]:
    ids = ctx.workspace.require_mixtures("separate")
    results = parallel_map(partial(_separate_job, ctx.config, ctx.workspace), ids, ctx.threads)
    logger.info(f"Wrote estimates for {len(results)} mixtures")
    return {"mixtures": len(results)}


# ---------------------------------------------------------------- eval

def _eval_job(config: PipelineConfig, workspace: Workspace, mix_id: str) -> Dict[str, Any]:
    head = read_json(workspace.require(workspace.head_result_path(mix_id), "eval", "train-head"))
    paths = workspace.estimate_paths(mix_id)
    if not paths:
        raise UsageError(f"eval: no estimates for {mix_id} (run `separate` first)", {"stage": "eval", "mix_id": mix_id})
    record, fm = mixture_frames(config, workspace, mix_id)
    estimates = [read_wav(path) for path in paths]
    score = match_and_score(estimates, record.sources, record.mixture, span=fm.covered_len)
    oracle_labels = oracle_frame_labels(record, fm.frame_len, fm.hop)
    purity = cluster_purity(head["assignments"], oracle_labels)
    upper = apply_masks(record.mixture, fm, oracle_masks(oracle_labels, len(record.sources)))
    oracle_score = match_and_score(upper, record.sources, record.mixture, span=fm.covered_len)
    row = {
        "mix_id": mix_id,
        "n_sources": len(record.sources),
        "k_eff": int(head["k_eff"]),
        "si_snri": score.si_snri_db,
        "sdri": score.sdri_db,
        "purity": purity,
        "C": head["C"],
        "Q": head["Q"],
        "oracle_si_snri": oracle_score.si_snri_db,
    }
    report = {**row, "seed": config.seed, "sdr_variant": SDR_VARIANT, "score": score.to_dict()}
    write_json(workspace.reports_dir / "eval" / f"{mix_id}.json", to_jsonable(report))
    return row


def run_eval(ctx: StageContext) -> Dict[str, Any]:
    config, workspace = ctx.config, ctx.workspace
    ids = workspace.require_mixtures("eval")
    rows = parallel_map(partial(_eval_job, config, workspace), ids, ctx.threads)
    write_table(rows, workspace.reports_dir / "eval.csv", EVAL_COLUMNS)
    summary = aggregate_scores(rows)
    summary.to_csv(workspace.reports_dir / "eval_summary.csv", index=False)
    write_json(
        workspace.reports_dir / "eval_summary.json",
        to_jsonable({
            "seed": config.seed,
            "sdr_variant": SDR_VARIANT,
            "groups": summary.to_dict("records"),
            "oracle_mask_si_snri": float(np.mean([row["oracle_si_snri"] for row in rows])),
        }),
    )
    if ctx.registry_url:
        metadata = {"config_hash": config_hash(config), "seed": config.seed, "sdr_variant": SDR_VARIANT}
        record_rows(ctx.registry_url, SeparationRun, [
            {
                "mix_id": row["mix_id"],
                "run_seed": config.seed,
                "n_sources": row["n_sources"],
                "head_kind": config.head.kind,
                "head_mode": config.head.mode,
                "theta": config.graph.theta,
                "k_eff": row["k_eff"],
                "si_snri": row["si_snri"],
                "sdri": row["sdri"],
                "purity": row["purity"],
                "conductance": row["C"],
                "modularity": row["Q"],
                "run_metadata": metadata,
            }
            for row in rows
        ])
    overall = summary[summary["group"] == "all"].iloc[0]
    logger.info(
        f"Evaluated {len(rows)} mixtures: SI-SNRi={overall['si_snri']:.2f} dB "
        f"SDRi={overall['sdri']:.2f} dB purity={overall['purity']:.3f}"
    )
    return {"mixtures": len(rows), "si_snri": float(overall["si_snri"]), "purity": float(overall["purity"])}
