"""Deterministic synthetic speakers, utterances and multi-speaker mixtures.

Speakers are harmonic stacks that differ in fundamental frequency, harmonic
amplitudes and amplitude-modulation (syllable) rate, since pitch and prosody
are the cues that tell talkers apart.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from src.dsp.audio import PCM16_SCALE, Waveform, frame, mix, read_wav, write_wav
from src.utils.errors import ArgumentError, DataError

F0_RANGE = (80.0, 400.0)
MIN_F0_SPACING = 10.0
PEAK_LIMIT = 0.9
TARGET_RMS = 0.1
RAMP_S = 0.002

Interval = Tuple[int, int]


@dataclass(frozen=True)
class SpeakerSpec:
    speaker_id: int
    f0: float
    harmonics: Tuple[Tuple[float, float], ...]
    am_rate: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if not F0_RANGE[0] <= self.f0 <= F0_RANGE[1]:
            raise ArgumentError("f0 outside [80, 400] Hz", {"speaker_id": self.speaker_id, "f0": self.f0})
        if not self.harmonics:
            raise ArgumentError("speaker needs at least one harmonic", {"speaker_id": self.speaker_id})
        if self.am_rate < 0:
            raise ArgumentError("am_rate must be non-negative", {"am_rate": self.am_rate})
        object.__setattr__(
            self, "harmonics", tuple((float(m), float(a)) for m, a in self.harmonics)
        )

    def to_dict(self) -> Dict:
        return {
            "speaker_id": self.speaker_id,
            "f0": self.f0,
            "harmonics": [list(h) for h in self.harmonics],
            "am_rate": self.am_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SpeakerSpec":
        return cls(
            speaker_id=int(data["speaker_id"]),
            f0=float(data["f0"]),
            harmonics=tuple(tuple(h) for h in data["harmonics"]),
            am_rate=float(data["am_rate"]),
            seed=int(data["seed"]),
        )


@dataclass(frozen=True)
class MixtureRecord:
    mixture: Waveform
    sources: Tuple[Waveform, ...]
    activity: Tuple[Tuple[Interval, ...], ...]
    speaker_ids: Tuple[int, ...]
    gains_db: Tuple[float, ...] = field(default=())

    def __post_init__(self):
        if len(self.sources) != len(self.speaker_ids):
            raise DataError("one speaker id per source required")
        if any(len(source) != len(self.mixture) for source in self.sources):
            raise DataError("sources must match the mixture length")


def check_distinct_f0(specs: Sequence[SpeakerSpec]) -> None:
    f0s = sorted(spec.f0 for spec in specs)
    for low, high in zip(f0s, f0s[1:]):
        if high - low < MIN_F0_SPACING:
            raise ArgumentError(
                "speakers must differ in f0 by at least 10 Hz", {"f0_pair": [low, high]}
            )


def make_speaker_specs(n_speakers: int, seed: int) -> List[SpeakerSpec]:
    """Speakers on a jittered F0 grid so neighbours stay >= 10 Hz apart."""
    rng = np.random.default_rng(seed)
    grid = np.arange(F0_RANGE[0] + 2.0, F0_RANGE[1] - 2.0, 2 * MIN_F0_SPACING)
    if n_speakers > grid.shape[0]:
        raise ArgumentError("too many speakers for the F0 range", {"n_speakers": n_speakers})
    f0s = np.sort(rng.choice(grid, size=n_speakers, replace=False))
    f0s = f0s + rng.uniform(-2.0, 2.0, size=n_speakers)
    specs = []
    for speaker_id, f0 in enumerate(f0s):
        n_harmonics = int(rng.integers(4, 9))
        rolloff = rng.uniform(0.5, 1.5)
        amplitudes = rng.uniform(0.3, 1.0, size=n_harmonics) / np.arange(1, n_harmonics + 1) ** rolloff
        harmonics = tuple((float(h + 1), float(a)) for h, a in enumerate(amplitudes))
        specs.append(
            SpeakerSpec(
                speaker_id=speaker_id,
                f0=float(round(f0, 3)),
                harmonics=harmonics,
                am_rate=float(round(rng.uniform(2.0, 7.0), 3)),
                seed=int(rng.integers(0, 2**31 - 1)),
            )
        )
    return specs


def _gain_envelope(rng: np.random.Generator, n_samples: int, sample_rate: int) -> np.ndarray:
    # Strictly positive, so it never adds zero crossings.
    n_knots = max(2, int(np.ceil(n_samples / (0.25 * sample_rate))) + 1)
    knots = rng.uniform(0.6, 1.0, size=n_knots)
    positions = np.linspace(0, n_samples - 1, n_knots)
    return np.interp(np.arange(n_samples), positions, knots)


def synth_utterance(
    spec: SpeakerSpec, duration_s: float, seed: int, sample_rate: int = 8000
) -> Waveform:
    """Harmonic stack at spec.f0 with AM, random phases and a slow gain envelope."""
    if duration_s <= 0:
        raise ArgumentError("duration must be positive", {"duration_s": duration_s})
    rng = np.random.default_rng([spec.seed, int(seed)])
    n_samples = max(1, int(round(duration_s * sample_rate)))
    t = np.arange(n_samples) / sample_rate
    nyquist = sample_rate / 2.0
    phases = rng.uniform(0.0, 2 * np.pi, size=len(spec.harmonics))
    signal = np.zeros(n_samples)
    for (multiple, amplitude), phase in zip(spec.harmonics, phases):
        if multiple * spec.f0 >= nyquist:
            continue
        signal += amplitude * np.sin(2 * np.pi * multiple * spec.f0 * t + phase)
    am_phase = rng.uniform(0.0, 2 * np.pi)
    if spec.am_rate > 0:
        signal *= 1.0 + 0.5 * np.sin(2 * np.pi * spec.am_rate * t + am_phase)
    signal *= _gain_envelope(rng, n_samples, sample_rate)
    peak = np.max(np.abs(signal))
    if peak > 0:
        signal *= PEAK_LIMIT / peak
    return Waveform(signal, sample_rate)


def _activity_layout(
    rng: np.random.Generator, n_sources: int, n_samples: int, overlap_fraction: float
) -> List[Interval]:
    """One contiguous interval per source; neighbours in turn order share an overlap segment."""
    overlap_total = int(round(overlap_fraction * n_samples))
    solo_total = n_samples - overlap_total
    solo = np.floor(rng.dirichlet(np.full(n_sources, 8.0)) * solo_total).astype(int)
    solo[-1] += solo_total - solo.sum()
    overlaps = np.full(n_sources - 1, overlap_total // (n_sources - 1))
    overlaps[-1] += overlap_total - overlaps.sum()

    order = rng.permutation(n_sources)
    intervals: List[Interval] = [(0, 0)] * n_sources
    cursor = 0
    for turn, source in enumerate(order):
        start = cursor - (overlaps[turn - 1] if turn > 0 else 0)
        end = cursor + solo[turn] + (overlaps[turn] if turn < n_sources - 1 else 0)
        intervals[source] = (int(start), int(end))
        cursor = end
    return intervals


def _gate(n_samples: int, interval: Interval, sample_rate: int) -> np.ndarray:
    start, end = interval
    gate = np.zeros(n_samples)
    if end <= start:
        return gate
    gate[start:end] = 1.0
    ramp = min(int(RAMP_S * sample_rate), (end - start) // 2)
    if ramp > 0:
        shape = 0.5 - 0.5 * np.cos(np.pi * (np.arange(ramp) + 0.5) / ramp)
        if start > 0:
            gate[start : start + ramp] = shape
        if end < n_samples:
            gate[end - ramp : end] = shape[::-1]
    return gate


def synth_mixture(
    specs: Sequence[SpeakerSpec],
    duration_s: float,
    overlap_fraction: float = 0.25,
    gain_db_range: Tuple[float, float] = (0.0, 5.0),
    seed: int = 0,
    sample_rate: int = 8000,
) -> MixtureRecord:
    """Sources on randomized turns with the requested overlap, mixed per y = sum x_c."""
    if not 2 <= len(specs) <= 5:
        raise ArgumentError("mixtures take 2 to 5 speakers", {"n_speakers": len(specs)})
    if not 0.0 <= overlap_fraction <= 1.0:
        raise ArgumentError("overlap_fraction outside [0, 1]", {"overlap_fraction": overlap_fraction})
    check_distinct_f0(specs)
    rng = np.random.default_rng(int(seed))
    n_samples = int(round(duration_s * sample_rate))
    intervals = _activity_layout(rng, len(specs), n_samples, overlap_fraction)
    gains_db = rng.uniform(gain_db_range[0], gain_db_range[1], size=len(specs))

    tracks = []
    for spec, interval, gain_db in zip(specs, intervals, gains_db):
        utterance_seed = int(rng.integers(0, 2**31 - 1))
        utterance = synth_utterance(spec, duration_s, utterance_seed, sample_rate)
        track = utterance.samples[:n_samples] * _gate(n_samples, interval, sample_rate)
        rms = np.sqrt(np.mean(track**2))
        if rms > 0:
            track = track * (TARGET_RMS / rms)
        tracks.append(track * 10.0 ** (gain_db / 20.0))

    # Joint rescale keeps the mixture inside PCM16 range without touching relative gains.
    peak = np.max(np.abs(np.sum(tracks, axis=0)))
    if peak > 0.99:
        tracks = [track * (0.99 / peak) for track in tracks]
    # Sources sit on the PCM16 grid so mixture.wav is exactly the sum of the s<c>.wav files.
    tracks = [np.round(track * PCM16_SCALE) / PCM16_SCALE for track in tracks]

    sources = tuple(Waveform(track, sample_rate) for track in tracks)
    return MixtureRecord(
        mixture=mix(sources),
        sources=sources,
        activity=tuple((interval,) for interval in intervals),
        speaker_ids=tuple(spec.speaker_id for spec in specs),
        gains_db=tuple(float(g) for g in gains_db),
    )


def activity_mask(record: MixtureRecord) -> np.ndarray:
    """(n_sources, n_samples) boolean activity."""
    n_samples = len(record.mixture)
    mask = np.zeros((len(record.sources), n_samples), dtype=bool)
    for index, intervals in enumerate(record.activity):
        for start, end in intervals:
            mask[index, start:end] = True
    return mask


def overlapped_frame_fraction(record: MixtureRecord, frame_len: int = 256, hop: int = 64) -> float:
    """Fraction of frames holding a sample where two or more sources are active."""
    multi = (activity_mask(record).sum(axis=0) >= 2).astype(float)
    frames = frame(Waveform(multi, record.mixture.sample_rate), frame_len, hop).frames
    return float(np.mean(frames.max(axis=1) > 0))


def oracle_frame_labels(record: MixtureRecord, frame_len: int = 256, hop: int = 64) -> np.ndarray:
    """Index of the source with the most energy in each frame."""
    energies = np.stack(
        [np.sum(frame(source, frame_len, hop).frames ** 2, axis=1) for source in record.sources]
    )
    return np.argmax(energies, axis=0)


def write_mixture(directory: Union[str, Path], record: MixtureRecord, meta: Dict = None) -> None:
    """mixture.wav, s<c>.wav and meta.json under one mixture directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_wav(directory / "mixture.wav", record.mixture)
    for index, source in enumerate(record.sources):
        write_wav(directory / f"s{index}.wav", source)
    payload = {
        "speaker_ids": list(record.speaker_ids),
        "gains_db": list(record.gains_db),
        "activity": [[list(interval) for interval in intervals] for intervals in record.activity],
    }
    payload.update(meta or {})
    (directory / "meta.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def read_mixture(directory: Union[str, Path]) -> MixtureRecord:
    """Read back a mixture directory; sources are re-read from their PCM16 files."""
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise DataError(f"missing mixture metadata: {meta_path}", {"path": str(meta_path)})
    meta = json.loads(meta_path.read_text())
    mixture = read_wav(directory / "mixture.wav")
    sources = tuple(read_wav(directory / f"s{index}.wav") for index in range(len(meta["speaker_ids"])))
    return MixtureRecord(
        mixture=mixture,
        sources=sources,
        activity=tuple(tuple(tuple(interval) for interval in intervals) for intervals in meta["activity"]),
        speaker_ids=tuple(meta["speaker_ids"]),
        gains_db=tuple(meta.get("gains_db", ())),
    )
