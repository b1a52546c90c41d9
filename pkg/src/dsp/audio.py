"""Waveform containers, WAV I/O, framing and overlap-add reconstruction."""
from dataclasses import dataclass
from functools import reduce
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy.io import wavfile

from src.utils.errors import EmptyInputError, FormatError, ShapeError, UnsupportedError

PCM16_SCALE = 32768.0


@dataclass(frozen=True)
class Waveform:
    """Mono signal with its sample rate."""

    samples: np.ndarray
    sample_rate: int = 8000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ShapeError("waveform samples must be one-dimensional", {"shape": list(samples.shape)})
        if self.sample_rate <= 0:
            raise ShapeError("sample rate must be positive", {"sample_rate": self.sample_rate})
        if not np.all(np.isfinite(samples)):
            raise ShapeError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate

    def truncated(self, length: int) -> "Waveform":
        return Waveform(self.samples[:length], self.sample_rate)


@dataclass(frozen=True)
class FrameMatrix:
    """Frames cut from a waveform at a fixed hop; each row is one graph node."""

    frames: np.ndarray
    frame_len: int
    hop: int
    source_len: int
    sample_rate: int = 8000

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.frame_len:
            raise ShapeError(
                "frame matrix must be n_frames x frame_len",
                {"shape": list(frames.shape), "frame_len": self.frame_len},
            )
        if not np.all(np.isfinite(frames)):
            raise ShapeError("frame matrix contains non-finite values")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def covered_len(self) -> int:
        """Number of leading samples covered by at least one frame."""
        if self.n_frames == 0:
            return 0
        return (self.n_frames - 1) * self.hop + self.frame_len

    def with_frames(self, frames: np.ndarray) -> "FrameMatrix":
        return FrameMatrix(frames, self.frame_len, self.hop, self.source_len, self.sample_rate)


def expected_frame_count(length: int, frame_len: int, hop: int) -> int:
    if length < frame_len:
        return 0
    return (length - frame_len) // hop + 1


def read_wav(path: Union[str, Path]) -> Waveform:
    """Read a PCM16 mono RIFF/WAVE file into [-1, 1] samples."""
    try:
        sample_rate, data = wavfile.read(str(path))
    except (ValueError, EOFError) as error:
        raise FormatError(f"malformed WAV file: {path}", {"path": str(path), "reason": str(error)}) from error
    if data.ndim != 1:
        raise UnsupportedError(
            "only mono audio is supported", {"path": str(path), "channels": int(data.shape[1])}
        )
    if data.dtype != np.int16:
        raise UnsupportedError(
            "only PCM16 audio is supported", {"path": str(path), "dtype": str(data.dtype)}
        )
    return Waveform(data.astype(np.float64) / PCM16_SCALE, int(sample_rate))


def write_wav(path: Union[str, Path], waveform: Waveform) -> None:
    """Write PCM16 little-endian mono; samples outside [-1, 1) saturate."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.round(waveform.samples * PCM16_SCALE), -32768, 32767).astype("<i2")
    wavfile.write(str(path), waveform.sample_rate, pcm)


def frame(waveform: Waveform, frame_len: int = 256, hop: int = 64) -> FrameMatrix:
    """Cut full frames at `hop`; a trailing partial frame is dropped."""
    if frame_len <= 0 or hop <= 0:
        raise ShapeError("frame_len and hop must be positive", {"frame_len": frame_len, "hop": hop})
    length = len(waveform)
    if length < frame_len:
        raise EmptyInputError(
            "waveform shorter than one frame", {"length": length, "frame_len": frame_len}
        )
    n_frames = expected_frame_count(length, frame_len, hop)
    windows = np.lib.stride_tricks.sliding_window_view(waveform.samples, frame_len)
    frames = np.ascontiguousarray(windows[: (n_frames - 1) * hop + 1 : hop])
    return FrameMatrix(frames, frame_len, hop, length, waveform.sample_rate)


def _frame_positions(fm: FrameMatrix) -> np.ndarray:
    offsets = np.arange(fm.n_frames)[:, None] * fm.hop
    return (offsets + np.arange(fm.frame_len)[None, :]).ravel()


def coverage_counts(fm: FrameMatrix) -> np.ndarray:
    """How many frames cover each source sample (zero on the dropped tail)."""
    return np.bincount(_frame_positions(fm), minlength=fm.source_len)[: fm.source_len]


def overlap_add(fm: FrameMatrix, counts: np.ndarray = None) -> Waveform:
    """Sum overlapping frames and divide by coverage count.

    `counts` may be supplied so several masked reconstructions share one
    normalization; positions with zero coverage come back as zeros.
    """
    if fm.n_frames == 0:
        raise EmptyInputError("cannot overlap-add zero frames")
    if counts is None:
        counts = coverage_counts(fm)
    if counts.shape[0] != fm.source_len:
        raise ShapeError(
            "coverage counts do not match source length",
            {"counts": int(counts.shape[0]), "source_len": fm.source_len},
        )
    summed = np.bincount(_frame_positions(fm), weights=fm.frames.ravel(), minlength=fm.source_len)
    summed = summed[: fm.source_len]
    out = np.zeros(fm.source_len)
    covered = counts > 0
    out[covered] = summed[covered] / counts[covered]
    return Waveform(out, fm.sample_rate)


def mix(sources: Sequence[Waveform]) -> Waveform:
    """Sample-wise sum of equally long sources, no normalization."""
    if not sources:
        raise EmptyInputError("mix needs at least one source")
    lengths = {len(source) for source in sources}
    rates = {source.sample_rate for source in sources}
    if len(lengths) != 1:
        raise ShapeError("sources differ in length", {"lengths": sorted(lengths)})
    if len(rates) != 1:
        raise ShapeError("sources differ in sample rate", {"sample_rates": sorted(rates)})
    summed = reduce(np.add, (source.samples for source in sources))
    return Waveform(summed, sources[0].sample_rate)
