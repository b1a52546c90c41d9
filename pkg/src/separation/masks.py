"""Binary frame masks and masked overlap-add reconstruction."""
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from src.dsp.audio import FrameMatrix, Waveform, coverage_counts, overlap_add
from src.graph.frame_graph import Partition
from src.utils.errors import ShapeError


@dataclass(frozen=True)
class MaskSet:
    """k x n_frames 0/1 matrix whose columns each hold exactly one 1."""

    masks: np.ndarray

    def __post_init__(self):
        masks = np.asarray(self.masks, dtype=np.uint8)
        if masks.ndim != 2 or masks.shape[0] < 1:
            raise ShapeError("mask set must be a non-empty k x n_frames matrix", {"shape": list(masks.shape)})
        if np.any(masks > 1):
            raise ShapeError("masks must be binary")
        if not np.all(masks.sum(axis=0) == 1):
            raise ShapeError("masks must partition the frames")
        object.__setattr__(self, "masks", masks)

    @property
    def k(self) -> int:
        return self.masks.shape[0]

    @property
    def n_frames(self) -> int:
        return self.masks.shape[1]


def masks_from_partition(partition: Partition) -> MaskSet:
    return MaskSet((partition.labels[None, :] == np.arange(partition.k)[:, None]).astype(np.uint8))


def oracle_masks(labels: Sequence[int], k: int = None) -> MaskSet:
    """Masks from ground-truth dominant-source labels."""
    labels = np.asarray(labels, dtype=np.int64)
    k = int(labels.max()) + 1 if k is None else k
    return masks_from_partition(Partition(labels, k))


def apply_masks(mixture: Waveform, fm: FrameMatrix, mask_set: MaskSet) -> List[Waveform]:
    """One estimate per mask, all sharing the unmasked coverage normalization.

    Samples past the last full frame are appended to estimate 0 so the
    estimates always sum to the mixture.
    """
    if fm.source_len != len(mixture):
        raise ShapeError("frame matrix was not cut from this mixture", {"source_len": fm.source_len, "mixture": len(mixture)})
    if mask_set.n_frames != fm.n_frames:
        raise ShapeError("mask length does not match frame count", {"masks": mask_set.n_frames, "frames": fm.n_frames})
    counts = coverage_counts(fm)
    estimates = []
    for mask in mask_set.masks:
        estimate = overlap_add(fm.with_frames(fm.frames * mask[:, None]), counts)
        estimates.append(estimate.samples)
    tail = fm.covered_len
    estimates[0] = estimates[0].copy()
    estimates[0][tail:] += mixture.samples[tail:]
    return [Waveform(samples, mixture.sample_rate) for samples in estimates]
