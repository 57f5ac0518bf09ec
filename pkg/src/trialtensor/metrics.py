"""Rank statistics, repeated-split evaluation and phase-stratified tests.

AUROC uses the midrank formula, which equals the probability that a random
positive outscores a random negative with ties counted half. The
Mann-Whitney test enumerates all label arrangements exactly for pooled
sizes up to 12 and otherwise uses the tie-corrected, continuity-corrected
normal approximation.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DataError
from .sampler import SamplerSchedule, init_model, run
from .tensor import SparseTensor, select_layers, split_cells

# Pooled size at or below which the exact permutation null is enumerated.
EXACT_MAX_TOTAL = 12


def _as_binary_labels(labels: Sequence[float]) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.size == 0:
        raise DataError("empty labels")
    return arr.astype(bool) if arr.dtype == bool else arr.astype(float) >= 0.5


def auroc(scores: Sequence[float], labels: Sequence[float]) -> float:
    """Area under the ROC curve via midranks.

    ``(sum of positive ranks - n_pos*(n_pos+1)/2) / (n_pos * n_neg)``;
    tied scores receive the mean of their rank range.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = _as_binary_labels(labels)
    if scores.shape[0] != positive.shape[0]:
        raise DataError("scores and labels differ in length")
    n_pos = int(positive.sum())
    n_neg = int(positive.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DataError("degenerate labels: need at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def f1(scores: Sequence[float], labels: Sequence[float], threshold: float = 0.5) -> float:
    """F1 at a hard threshold; defined as 0 whenever there are no true positives.

    Returning 0 instead of NaN keeps reports stable under extreme class
    imbalance, where a split can end up with no predicted or no actual
    positives.
    """
    if not 0.0 < threshold < 1.0:
        raise DataError(f"threshold must be in (0, 1), got {threshold}")
    scores = np.asarray(scores, dtype=np.float64)
    positive = _as_binary_labels(labels)
    if scores.shape[0] != positive.shape[0]:
        raise DataError("scores and labels differ in length")
    predicted = scores >= threshold
    tp = int(np.sum(predicted & positive))
    if tp == 0:
        return 0.0
    fp = int(np.sum(predicted & ~positive))
    fn = int(np.sum(~predicted & positive))
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return float(2.0 * precision * recall / (precision + recall))


def class_imbalance(labels: Sequence[float]) -> float:
    """Proportion of positive labels out of total labels."""
    positive = _as_binary_labels(labels)
    return float(positive.mean())


def mann_whitney_u(
    group_a: Sequence[float], group_b: Sequence[float]
) -> tuple[float, float]:
    """Two-sided Mann-Whitney-Wilcoxon test, returning (U of group A, p).

    The p-value comes from exact enumeration of all label arrangements when
    the pooled size is at most ``EXACT_MAX_TOTAL`` and otherwise from the
    normal approximation with tie-corrected variance and a continuity
    correction of one half.
    """
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise DataError("empty group in rank test")
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled, method="average")
    n_a, n_b = int(a.size), int(b.size)
    u_a = float(ranks[:n_a].sum() - n_a * (n_a + 1) / 2.0)
    if n_a + n_b <= EXACT_MAX_TOTAL:
        p = _exact_two_sided_p(ranks, n_a)
    else:
        p = _normal_two_sided_p(u_a, n_a, n_b, pooled)
    return u_a, p


def _exact_two_sided_p(ranks: np.ndarray, n_a: int) -> float:
    """Fraction of arrangements with |U - mean| at least as large as observed."""
    n = ranks.shape[0]
    n_b = n - n_a
    mean_u = n_a * n_b / 2.0
    base = n_a * (n_a + 1) / 2.0
    observed = abs(float(ranks[:n_a].sum()) - base - mean_u)
    hits = 0
    total = 0
    for combo in itertools.combinations(range(n), n_a):
        u = ranks[list(combo)].sum() - base
        total += 1
        if abs(u - mean_u) >= observed - 1e-12:
            hits += 1
    return hits / total


def _normal_two_sided_p(u: float, n_a: int, n_b: int, pooled: np.ndarray) -> float:
    """Tie-corrected normal approximation with continuity correction."""
    n = n_a + n_b
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = float(((counts**3 - counts).sum()) / (n * (n - 1)))
    variance = n_a * n_b / 12.0 * ((n + 1) - tie_term)
    if variance <= 0.0:  # all pooled values identical
        return 1.0
    z = (abs(u - n_a * n_b / 2.0) - 0.5) / math.sqrt(variance)
    z = max(z, 0.0)
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def bonferroni(p_values: float | Sequence[float], m: int) -> float | list[float]:
    """Multiply p-values by the comparison count ``m``, capping at 1."""
    if np.isscalar(p_values):
        if m < 1:
            raise DataError("comparison count must be at least 1")
        return min(1.0, float(m) * float(p_values))
    values = [float(p) for p in p_values]
    if m < len(values):
        raise DataError(f"comparison count {m} below number of tests {len(values)}")
    return [min(1.0, float(m) * p) for p in values]


# --------------------------------------------------------------------------
# Repeated-split model evaluation.

@dataclass(frozen=True)
class EvalConfig:
    """One model configuration for repeated train/held-out evaluation.

    ``layers`` selects tensor layers (layer 0, the outcome slice, must come
    first); ``None`` keeps the whole tensor.
    """

    model_name: str = "combined"
    layers: tuple[int, ...] | None = None
    n_latent: int = 32
    alpha: float = 5.0
    schedule: SamplerSchedule = SamplerSchedule()
    heldout_fraction: float = 0.2
    threshold: float = 0.5
    n_threads: int = 1


@dataclass(frozen=True)
class EvalReport:
    model_name: str
    auroc_mean: float
    auroc_sd: float
    f1_mean: float
    f1_sd: float
    imbalance: float
    n_repeats: int
    threshold: float

    def to_dict(self) -> dict:
        return {
            "model_name": self.model_name,
            "auroc": {"mean": self.auroc_mean, "sd": self.auroc_sd},
            "f1": {"mean": self.f1_mean, "sd": self.f1_sd},
            "imbalance": self.imbalance,
            "n_repeats": self.n_repeats,
            "threshold": self.threshold,
        }


def repeated_eval(
    tensor: SparseTensor,
    config: EvalConfig,
    n_repeats: int,
    seeds: Sequence[int],
) -> EvalReport:
    """Stratified split, train, predict held-out cells, repeat; mean +/- sd.

    Each repeat holds out ``heldout_fraction`` of outcome-layer cells
    (stratified by label), trains on everything else, scores the held-out
    cells and computes AUROC and F1 against their observed labels. The
    reported spread is the sample standard deviation across repeats; both
    the split and the sampler derive from the same per-repeat seed, so
    identical seeds reproduce identical metrics.
    """
    if n_repeats < 2:
        raise DataError("n_repeats must be at least 2")
    if len(seeds) < n_repeats:
        raise DataError(f"need {n_repeats} seeds, got {len(seeds)}")
    if config.layers is not None:
        if len(config.layers) == 0 or config.layers[0] != 0:
            raise DataError("layer selection must start with the outcome layer 0")
        tensor = select_layers(tensor, config.layers)
    _, outcome_values = tensor.layer_entries(0)
    if outcome_values.size == 0:
        raise DataError("tensor has no outcome-layer cells")
    imbalance = class_imbalance(outcome_values)
    aurocs = []
    f1s = []
    for seed in seeds[:n_repeats]:
        split = split_cells(tensor, layer=0, heldout_fraction=config.heldout_fraction, seed=seed)
        heldout = sorted(split.heldout)
        train_tensor = tensor.without_cells(heldout)
        state = init_model(
            tensor.dims, config.n_latent, alpha=config.alpha, seed=int(seed)
        )
        result = run(state, train_tensor, config.schedule, heldout, config.n_threads)
        scores = np.array([result.predictions[cell] for cell in heldout])
        labels = np.array([tensor.lookup(*cell) for cell in heldout])
        aurocs.append(auroc(scores, labels))
        f1s.append(f1(scores, labels, config.threshold))
    return EvalReport(
        model_name=config.model_name,
        auroc_mean=float(np.mean(aurocs)),
        auroc_sd=float(np.std(aurocs, ddof=1)),
        f1_mean=float(np.mean(f1s)),
        f1_sd=float(np.std(f1s, ddof=1)),
        imbalance=imbalance,
        n_repeats=n_repeats,
        threshold=config.threshold,
    )


# --------------------------------------------------------------------------
# Phase-stratified significance analysis.

MAX_PHASE = 4


@dataclass
class PhaseAnalysis:
    """Scores grouped by maximum clinical phase, with pairwise rank tests."""

    groups: dict[int, list[float]]
    pairwise: dict[tuple[int, int], tuple[float, float, float]]
    excluded: list[int] = field(default_factory=list)
    unmatched_pairs: int = 0

    @property
    def n_comparisons(self) -> int:
        return len(self.pairwise)

    def to_dict(self) -> dict:
        return {
            "groups": {str(ph): scores for ph, scores in self.groups.items()},
            "group_sizes": {str(ph): len(scores) for ph, scores in self.groups.items()},
            "tests": [
                {
                    "phase_a": pa,
                    "phase_b": pb,
                    "u": u,
                    "p_raw": p_raw,
                    "p_corrected": p_corr,
                }
                for (pa, pb), (u, p_raw, p_corr) in sorted(self.pairwise.items())
            ],
            "n_comparisons": self.n_comparisons,
            "excluded_phases": self.excluded,
            "unmatched_pairs": self.unmatched_pairs,
        }

    def tsv_rows(self) -> list[tuple]:
        return [
            (pa, pb, u, p_raw, p_corr)
            for (pa, pb), (u, p_raw, p_corr) in sorted(self.pairwise.items())
        ]


def phase_analysis(
    predictions: Mapping[tuple[str, str], float],
    outcome_pairs: Iterable,
) -> PhaseAnalysis:
    """Group pair scores by max clinical phase and test all phase pairs.

    Phases run 0 (preclinical) through 4. Groups with fewer than two scores
    are excluded from testing and reported; Bonferroni correction uses the
    number of tests actually performed.
    """
    groups: dict[int, list[float]] = {phase: [] for phase in range(MAX_PHASE + 1)}
    unmatched = 0
    for pair in outcome_pairs:
        score = predictions.get((pair.gene_id, pair.disease_id))
        if score is None:
            unmatched += 1
            continue
        if not 0 <= pair.max_phase <= MAX_PHASE:
            raise DataError(f"max_phase {pair.max_phase} outside 0..{MAX_PHASE}")
        groups[pair.max_phase].append(float(score))
    excluded = [phase for phase, scores in groups.items() if len(scores) < 2]
    tested = [phase for phase in groups if phase not in excluded]
    combos = list(itertools.combinations(tested, 2))
    raw = {}
    for phase_a, phase_b in combos:
        u, p_value = mann_whitney_u(groups[phase_a], groups[phase_b])
        raw[(phase_a, phase_b)] = (u, p_value)
    m = len(combos)
    pairwise = {
        key: (u, p_value, bonferroni(p_value, m) if m else 1.0)
        for key, (u, p_value) in raw.items()
    }
    return PhaseAnalysis(
        groups=groups, pairwise=pairwise, excluded=excluded, unmatched_pairs=unmatched
    )
