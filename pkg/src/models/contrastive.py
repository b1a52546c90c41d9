"""Positive-pair sampling, contrastive loss and the pretraining loop."""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from config.settings import EncoderConfig, PretrainConfig
from src.autodiff import ops
from src.autodiff.checkpoint import save_checkpoint
from src.autodiff.optim import CyclicalLrSchedule, ParamStore, adam_step, count_parameters
from src.autodiff.tensor import Tensor
from src.models.encoder import encoder_forward, init_encoder_params
from src.utils.errors import ArgumentError, DataError, DivergenceError, NumericalError
from src.utils.logger import get_logger
from src.utils.seeding import STAGE_KEYS, derive_seed, make_rng

logger = get_logger("contrastive")

# Added to the self-similarity logits so a frame is never its own negative.
SELF_MASK = -1e9

FramesBySpeaker = Mapping[int, np.ndarray]


@dataclass(frozen=True)
class PairBatch:
    """Rows 2j and 2j+1 form the j-th positive pair."""

    frames: np.ndarray
    positives: np.ndarray
    speakers: np.ndarray

    @property
    def n(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class LossRecord:
    step: int
    loss: float
    lr: float


@dataclass
class PretrainResult:
    params: ParamStore
    trace: List[LossRecord] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)


def pair_partner(n: int) -> np.ndarray:
    return np.arange(n) ^ 1


def sample_pairs(frames_by_speaker: FramesBySpeaker, batch_n: int, seed: int) -> PairBatch:
    """Draw batch_n/2 disjoint same-speaker pairs.

    Each pair picks a speaker uniformly among those with at least two unused
    frames, then two of that speaker's unused frames without replacement.
    """
    if batch_n < 2 or batch_n % 2:
        raise ArgumentError("batch_n must be even and at least 2", {"batch_n": batch_n})
    speakers = sorted(frames_by_speaker)
    if len(speakers) < 2:
        raise DataError("pair sampling needs at least two speakers", {"speakers": len(speakers)})
    rng = make_rng(seed)
    unused = {spk: list(range(len(frames_by_speaker[spk]))) for spk in speakers}
    rows, labels = [], []
    for _ in range(batch_n // 2):
        eligible = [spk for spk in speakers if len(unused[spk]) >= 2]
        if not eligible:
            raise DataError(
                "not enough frames left to form a positive pair",
                {"pairs_formed": len(rows) // 2, "batch_n": batch_n},
            )
        speaker = eligible[int(rng.integers(len(eligible)))]
        pool = unused[speaker]
        picks = rng.choice(len(pool), size=2, replace=False)
        for pick in sorted(picks.tolist(), reverse=True):
            rows.append(frames_by_speaker[speaker][pool.pop(pick)])
            labels.append(speaker)
    frames = np.stack(rows)
    return PairBatch(frames=frames, positives=pair_partner(batch_n), speakers=np.asarray(labels))


def contrastive_loss(embeddings: Tensor, positives: Sequence[int], temperature: float) -> Tensor:
    """Mean over anchors of -log softmax of the positive among all other rows."""
    n = embeddings.shape[0]
    if n < 3:
        raise ArgumentError("contrastive loss needs at least one negative per anchor", {"n": n})
    if temperature <= 0:
        raise ArgumentError("temperature must be positive", {"temperature": temperature})
    positives = np.asarray(positives)
    if positives.shape != (n,):
        raise ArgumentError("one positive index per anchor is required", {"n": n})
    logits = ops.scale(ops.matmul(embeddings, ops.transpose(embeddings)), 1.0 / temperature)
    logits = ops.add(logits, np.diag(np.full(n, SELF_MASK)))
    log_probs = ops.log_softmax_rows(logits)
    picked = ops.take(log_probs, np.arange(n), positives)
    return ops.scale(ops.mean(picked), -1.0)


def _training_step(
    encoder_config: EncoderConfig,
    store: ParamStore,
    batch: PairBatch,
    temperature: float,
    lr: float,
    step: int,
) -> float:
    try:
        embeddings = encoder_forward(encoder_config, store, batch.frames)
        loss = contrastive_loss(embeddings, batch.positives, temperature)
    except NumericalError as error:
        raise DivergenceError(f"contrastive loss diverged at step {step}", {"step": step, **error.details}) from error
    loss.backward()
    adam_step(store, lr)
    return loss.item()


def _run_contrastive(
    store: ParamStore,
    frames_by_speaker: FramesBySpeaker,
    encoder_config: EncoderConfig,
    train_config: PretrainConfig,
    seed: int,
    stage: str,
    first_step: int,
    last_step: int,
    checkpoint_dir: Optional[Path],
    tag: str,
) -> PretrainResult:
    schedule = CyclicalLrSchedule(train_config.lr_min, train_config.lr_max, train_config.cycle_steps)
    result = PretrainResult(params=store)
    for step in range(first_step, last_step):
        batch = sample_pairs(frames_by_speaker, train_config.batch_n, derive_seed(seed, STAGE_KEYS[stage], step))
        lr = schedule.lr_at(step)
        loss = _training_step(encoder_config, store, batch, train_config.temperature, lr, step)
        result.trace.append(LossRecord(step=step, loss=loss, lr=lr))
        if (step + 1) % train_config.log_every == 0 or step == first_step:
            logger.info(f"[{tag}] step {step + 1}/{last_step} loss={loss:.4f} lr={lr:.2e}")
        if checkpoint_dir is not None and (step + 1) % train_config.checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"{tag}_{step + 1:06d}.cdm"
            save_checkpoint(path, store)
            result.checkpoints.append(path)
    return result


def pretrain(
    frames_by_speaker: FramesBySpeaker,
    encoder_config: EncoderConfig,
    train_config: PretrainConfig,
    seed: int,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    resume: Optional[ParamStore] = None,
) -> PretrainResult:
    """Contrastive pretraining of the encoder with Adam and a cyclical LR.

    A `resume` store continues from its own step counter; pair batches are
    keyed on (seed, step) so the resumed trace matches an uninterrupted run.
    """
    if len(frames_by_speaker) < 2:
        raise DataError("pretraining needs at least two speakers", {"speakers": len(frames_by_speaker)})
    store = resume if resume is not None else init_encoder_params(
        encoder_config, derive_seed(seed, STAGE_KEYS["pretrain"]), train_config.dtype
    )
    logger.info(f"Pretraining encoder: {count_parameters(store)} parameters, {len(frames_by_speaker)} speakers")
    return _run_contrastive(
        store,
        frames_by_speaker,
        encoder_config,
        train_config,
        seed,
        "pretrain",
        store.step,
        train_config.steps,
        Path(checkpoint_dir) if checkpoint_dir is not None else None,
        "pretrain",
    )


def fine_tune(
    params: ParamStore,
    frames_by_speaker: FramesBySpeaker,
    encoder_config: EncoderConfig,
    train_config: PretrainConfig,
    seed: int,
    steps: Optional[int] = None,
) -> PretrainResult:
    """Continue contrastive training on frames of isolated training-mixture sources."""
    steps = train_config.fine_tune_steps if steps is None else steps
    store = params.copy()
    if steps <= 0:
        return PretrainResult(params=store)
    if len(frames_by_speaker) < 2:
        raise DataError("fine-tuning needs at least two speakers", {"speakers": len(frames_by_speaker)})
    logger.info(f"Fine-tuning encoder for {steps} steps")
    return _run_contrastive(
        store, frames_by_speaker, encoder_config, train_config, seed, "finetune", 0, steps, None, "finetune"
    )


def evaluate_loss(
    params: ParamStore,
    frames_by_speaker: FramesBySpeaker,
    encoder_config: EncoderConfig,
    train_config: PretrainConfig,
    seed: int,
) -> float:
    """Mean contrastive loss over a fixed set of seeded batches, no update."""
    constants = params.detached()
    losses = []
    for index in range(train_config.eval_batches):
        batch = sample_pairs(frames_by_speaker, train_config.batch_n, derive_seed(seed, STAGE_KEYS["eval"], index))
        embeddings = encoder_forward(encoder_config, constants, batch.frames)
        losses.append(contrastive_loss(embeddings, batch.positives, train_config.temperature).item())
    return float(np.mean(losses))


def embedding_separation(embeddings: np.ndarray, labels: Sequence[int]) -> Tuple[float, float]:
    """Mean cosine similarity over same-label pairs and over different-label pairs."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if embeddings.shape[0] != labels.shape[0] or embeddings.shape[0] < 2:
        raise ArgumentError("need one label per embedding row and at least two rows")
    similarity = embeddings @ embeddings.T
    upper = np.triu(np.ones_like(similarity, dtype=bool), k=1)
    same = labels[:, None] == labels[None, :]
    intra = similarity[upper & same]
    inter = similarity[upper & ~same]
    if intra.size == 0 or inter.size == 0:
        raise ArgumentError("need both same-label and different-label pairs")
    return float(intra.mean()), float(inter.mean())


def group_frames(frames: np.ndarray, labels: Sequence[int]) -> Dict[int, np.ndarray]:
    labels = np.asarray(labels)
    return {int(label): frames[labels == label] for label in np.unique(labels)}
