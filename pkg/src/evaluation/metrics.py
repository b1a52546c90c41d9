"""SI-SNR / SDR with permutation matching, and cluster purity."""
import itertools
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.utils.errors import ArgumentError, ShapeError

DB_CLAMP = 60.0
MAX_SOURCES = 5


def _as_signal(value) -> np.ndarray:
    samples = getattr(value, "samples", value)
    return np.asarray(samples, dtype=np.float64)


def _check_pair(estimate: np.ndarray, reference: np.ndarray) -> None:
    if estimate.shape != reference.shape or estimate.ndim != 1:
        raise ShapeError("estimate and reference lengths differ", {"estimate": list(estimate.shape), "reference": list(reference.shape)})
    if not np.any(reference):
        raise ArgumentError("reference signal is all zeros")


def _ratio_db(signal_power: float, error_power: float) -> float:
    if signal_power <= 0.0:
        return -DB_CLAMP
    if error_power <= 0.0:
        return DB_CLAMP
    return float(np.clip(10.0 * np.log10(signal_power / error_power), -DB_CLAMP, DB_CLAMP))


def si_snr(estimate, reference) -> float:
    """Scale-invariant SNR in dB, clamped to +/-60."""
    estimate, reference = _as_signal(estimate), _as_signal(reference)
    _check_pair(estimate, reference)
    target = (np.dot(estimate, reference) / np.dot(reference, reference)) * reference
    residual = estimate - target
    return _ratio_db(float(np.dot(target, target)), float(np.dot(residual, residual)))


def sdr(estimate, reference) -> float:
    """Plain SNR-form SDR, ||s||^2 / ||s_hat - s||^2 in dB, clamped to +/-60."""
    estimate, reference = _as_signal(estimate), _as_signal(reference)
    _check_pair(estimate, reference)
    error = estimate - reference
    return _ratio_db(float(np.dot(reference, reference)), float(np.dot(error, error)))


@dataclass
class SeparationScore:
    si_snr_db: float
    si_snri_db: float
    sdr_db: float
    sdri_db: float
    permutation: Tuple[int, ...]
    per_source: List[Dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["permutation"] = list(self.permutation)
        return payload


def match_and_score(estimates: Sequence, references: Sequence, mixture, span: Optional[int] = None) -> SeparationScore:
    """Best estimate-to-reference assignment by mean SI-SNR over the real references.

    `permutation[r]` is the estimate index matched to reference r. The side
    with fewer tracks is padded with silence. `span` limits scoring to the
    leading samples (the span covered by frames).
    """
    estimates = [_as_signal(e) for e in estimates]
    references = [_as_signal(r) for r in references]
    mixture = _as_signal(mixture)
    if not 1 <= len(estimates) <= MAX_SOURCES or not 1 <= len(references) <= MAX_SOURCES:
        raise ArgumentError(
            "between 1 and 5 estimates and references are supported",
            {"estimates": len(estimates), "references": len(references)},
        )
    if span is not None:
        estimates = [e[:span] for e in estimates]
        references = [r[:span] for r in references]
        mixture = mixture[:span]
    k = max(len(estimates), len(references))
    silence = np.zeros_like(mixture)
    padded = estimates + [silence] * (k - len(estimates))
    n_refs = len(references)

    si_table = np.array([[si_snr(padded[e], references[r]) for e in range(k)] for r in range(n_refs)])
    best_perm, best_mean = None, -np.inf
    for perm in itertools.permutations(range(k)):
        mean = float(np.mean([si_table[r, perm[r]] for r in range(n_refs)]))
        if mean > best_mean:
            best_perm, best_mean = perm, mean

    per_source = []
    for r in range(n_refs):
        estimate = padded[best_perm[r]]
        si, base_si = si_table[r, best_perm[r]], si_snr(mixture, references[r])
        sd, base_sd = sdr(estimate, references[r]), sdr(mixture, references[r])
        per_source.append({
            "reference": r,
            "estimate": int(best_perm[r]),
            "si_snr": si,
            "si_snri": si - base_si,
            "sdr": sd,
            "sdri": sd - base_sd,
        })
    frame = pd.DataFrame(per_source)
    return SeparationScore(
        si_snr_db=float(frame["si_snr"].mean()),
        si_snri_db=float(frame["si_snri"].mean()),
        sdr_db=float(frame["sdr"].mean()),
        sdri_db=float(frame["sdri"].mean()),
        permutation=tuple(int(p) for p in best_perm[:n_refs]),
        per_source=per_source,
    )


def cluster_purity(labels: Sequence[int], oracle_labels: Sequence[int]) -> float:
    """Sum over clusters of the majority oracle-label count, divided by n."""
    labels = np.asarray(labels, dtype=np.int64)
    oracle_labels = np.asarray(oracle_labels, dtype=np.int64)
    if labels.shape != oracle_labels.shape:
        raise ShapeError("label vectors differ in length", {"labels": labels.size, "oracle": oracle_labels.size})
    if labels.size == 0:
        raise ArgumentError("purity of an empty labelling is undefined")
    table = pd.crosstab(labels, oracle_labels)
    return float(table.max(axis=1).sum() / labels.size)


SCORE_COLUMNS = ["si_snri", "sdri", "purity", "C", "Q"]


def aggregate_scores(rows: Sequence[Mapping[str, Any]]) -> pd.DataFrame:
    """Mean scores per source count plus an `all` row."""
    frame = pd.DataFrame(list(rows))
    if frame.empty:
        return pd.DataFrame(columns=["group", "count", *SCORE_COLUMNS])
    columns = [column for column in SCORE_COLUMNS if column in frame]
    grouped = frame.groupby("n_sources")[columns].mean()
    grouped.insert(0, "count", frame.groupby("n_sources").size())
    grouped.index = [f"{int(count)}spk" for count in grouped.index]
    overall = frame[columns].mean().to_frame().T
    overall.insert(0, "count", len(frame))
    overall.index = ["all"]
    result = pd.concat([grouped, overall])
    result.index.name = "group"
    return result.reset_index()
