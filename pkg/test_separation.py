"""Frame masks, masked reconstruction and separation metrics."""
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from src.dsp.audio import Waveform, frame
from src.dsp.corpus import make_speaker_specs, oracle_frame_labels, synth_mixture
from src.evaluation.metrics import (
    DB_CLAMP,
    aggregate_scores,
    cluster_purity,
    match_and_score,
    sdr,
    si_snr,
)
from src.graph.frame_graph import Partition
from src.separation.masks import MaskSet, apply_masks, masks_from_partition, oracle_masks
from src.utils.errors import ArgumentError, ShapeError

REFERENCE = np.array([1.0, 1.0, 1.0, 1.0])
ORTHOGONAL_NOISE = np.array([0.1, -0.1, 0.1, -0.1])


# ---------------------------------------------------------------- masks

def test_masks_from_partition():
    masks = masks_from_partition(Partition.from_labels([0, 1, 0])).masks
    np.testing.assert_array_equal(masks, [[1, 0, 1], [0, 1, 0]])


def test_mask_set_must_partition_frames():
    with pytest.raises(ShapeError):
        MaskSet(np.array([[1, 1], [1, 0]]))
    with pytest.raises(ShapeError):
        MaskSet(np.array([[2, 0]]))
    with pytest.raises(ShapeError):
        MaskSet(np.zeros((0, 3)))


def test_oracle_masks_pad_to_source_count():
    mask_set = oracle_masks([0, 0, 0], k=2)
    assert mask_set.k == 2
    assert not mask_set.masks[1].any()


def test_single_mask_returns_mixture():
    mixture = Waveform(np.random.default_rng(0).standard_normal(1000))
    fm = frame(mixture, 256, 64)
    (estimate,) = apply_masks(mixture, fm, MaskSet(np.ones((1, fm.n_frames))))
    np.testing.assert_allclose(estimate.samples, mixture.samples, atol=1e-12)


def test_estimates_sum_to_mixture():
    rng = np.random.default_rng(1)
    mixture = Waveform(rng.standard_normal(2000))
    fm = frame(mixture, 256, 64)
    mask_set = masks_from_partition(Partition(rng.integers(0, 3, size=fm.n_frames), 3))
    estimates = apply_masks(mixture, fm, mask_set)
    assert len(estimates) == 3
    residual = np.sum([e.samples for e in estimates], axis=0) - mixture.samples
    assert np.max(np.abs(residual)) <= 1e-12


def test_apply_masks_shape_checks():
    mixture = Waveform(np.zeros(1000))
    fm = frame(mixture, 256, 64)
    with pytest.raises(ShapeError):
        apply_masks(mixture, fm, MaskSet(np.ones((1, fm.n_frames - 1))))
    with pytest.raises(ShapeError):
        apply_masks(Waveform(np.zeros(999)), fm, MaskSet(np.ones((1, fm.n_frames))))


def test_oracle_masks_separate_non_overlapping_speakers():
    specs = make_speaker_specs(2, seed=3)
    record = synth_mixture(specs, 4.0, overlap_fraction=0.0, seed=5)
    fm = frame(record.mixture, 256, 64)
    estimates = apply_masks(record.mixture, fm, oracle_masks(oracle_frame_labels(record), 2))
    score = match_and_score(estimates, record.sources, record.mixture, span=fm.covered_len)
    assert all(row["si_snr"] >= 20.0 for row in score.per_source)
    assert score.si_snri_db > 0.0


# ---------------------------------------------------------------- SI-SNR / SDR

def test_perfect_estimate_is_clamped():
    assert si_snr(REFERENCE, REFERENCE) == DB_CLAMP
    assert sdr(REFERENCE, REFERENCE) == DB_CLAMP


def test_orthogonal_noise_at_twenty_db():
    assert si_snr(REFERENCE + ORTHOGONAL_NOISE, REFERENCE) == pytest.approx(20.0)
    assert sdr(REFERENCE + ORTHOGONAL_NOISE, REFERENCE) == pytest.approx(20.0)


def test_silent_estimate():
    assert sdr(np.zeros(4), REFERENCE) == pytest.approx(0.0)
    assert si_snr(np.zeros(4), REFERENCE) == -DB_CLAMP


def test_si_snr_ignores_scale_but_sdr_does_not():
    estimate = REFERENCE + ORTHOGONAL_NOISE
    assert si_snr(3.0 * estimate, REFERENCE) == pytest.approx(si_snr(estimate, REFERENCE))
    assert sdr(3.0 * estimate, REFERENCE) < sdr(estimate, REFERENCE)


def test_metric_input_errors():
    with pytest.raises(ArgumentError):
        si_snr(REFERENCE, np.zeros(4))
    with pytest.raises(ShapeError):
        sdr(REFERENCE, np.ones(5))


# ---------------------------------------------------------------- permutation matching

def _two_sources():
    rng = np.random.default_rng(2)
    return rng.standard_normal(500), rng.standard_normal(500)


def test_swapped_estimates_are_matched():
    first, second = _two_sources()
    score = match_and_score([second, first], [first, second], first + second)
    assert score.permutation == (1, 0)
    assert score.si_snr_db == DB_CLAMP
    assert score.to_dict()["permutation"] == [1, 0]


@pytest.mark.parametrize("seed", range(5))
def test_scores_ignore_estimate_order(seed):
    rng = np.random.default_rng(seed)
    references = [rng.standard_normal(400) for _ in range(3)]
    mixture = np.sum(references, axis=0)
    estimates = [ref + 0.3 * rng.standard_normal(400) for ref in references]
    order = rng.permutation(3)
    base = match_and_score(estimates, references, mixture)
    shuffled = match_and_score([estimates[i] for i in order], references, mixture)
    assert shuffled.si_snri_db == base.si_snri_db
    assert shuffled.sdri_db == base.sdri_db
    assert [order[p] for p in shuffled.permutation] == list(base.permutation)


def test_mixture_as_estimate_has_zero_improvement():
    first, second = _two_sources()
    mixture = first + second
    score = match_and_score([mixture, mixture], [first, second], mixture)
    assert score.si_snri_db == pytest.approx(0.0, abs=1e-12)
    assert score.sdri_db == pytest.approx(0.0, abs=1e-12)


def test_missing_estimate_is_padded_with_silence():
    first, second = _two_sources()
    score = match_and_score([first], [first, second], first + second)
    assert len(score.permutation) == 2
    assert score.per_source[score.permutation.index(0)]["si_snr"] == DB_CLAMP


def test_source_count_limits():
    first, _ = _two_sources()
    with pytest.raises(ArgumentError):
        match_and_score([first] * 6, [first], first)
    with pytest.raises(ArgumentError):
        match_and_score([], [first], first)


# ---------------------------------------------------------------- purity and aggregation

def test_purity_fixtures():
    assert cluster_purity([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert cluster_purity([0, 0, 0, 0], [0, 0, 1, 1]) == 0.5
    assert cluster_purity([0, 0, 1, 1], [0, 0, 0, 1]) == 0.75


def test_purity_errors():
    with pytest.raises(ShapeError):
        cluster_purity([0, 1], [0])
    with pytest.raises(ArgumentError):
        cluster_purity([], [])


def test_aggregate_by_speaker_count():
    rows = [
        {"n_sources": 2, "si_snri": 4.0, "sdri": 3.0, "purity": 0.9, "C": 10.0, "Q": 30.0},
        {"n_sources": 2, "si_snri": 6.0, "sdri": 5.0, "purity": 0.7, "C": 20.0, "Q": 40.0},
        {"n_sources": 3, "si_snri": 1.0, "sdri": 1.0, "purity": 0.5, "C": 30.0, "Q": 20.0},
    ]
    table = aggregate_scores(rows).set_index("group")
    assert list(table.index) == ["2spk", "3spk", "all"]
    assert table.loc["2spk", "si_snri"] == pytest.approx(5.0)
    assert table.loc["2spk", "count"] == 2
    assert table.loc["all", "count"] == 3
    assert table.loc["all", "Q"] == pytest.approx(30.0)


def test_aggregate_of_nothing_is_empty():
    assert aggregate_scores([]).empty
