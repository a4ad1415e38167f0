"""Rating correlations, the pairwise decision rule and agreement accuracies."""
from __future__ import annotations

import enum
import math
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from judgefuse.core import DIMENSIONS, EvaluatorModel, JudgefuseError, JudgeLabel
from judgefuse.likelihood import reliability_values

DEFAULT_TIE_THRESHOLD = 0.01


class MetricError(JudgefuseError, ValueError):
    pass


class PairDecision(enum.Enum):
    A = "A"
    B = "B"
    FAIR = "Fair"

    def mirror(self) -> "PairDecision":
        return {PairDecision.A: PairDecision.B, PairDecision.B: PairDecision.A}.get(self, self)

    @classmethod
    def parse(cls, value) -> "PairDecision":
        if isinstance(value, PairDecision):
            return value
        if isinstance(value, JudgeLabel):
            return cls(value.value)
        return cls(value)


def normalize_score(raw):
    """Map a raw quality score into (0, 1) by ``logistic(raw / sqrt(2))``.

    Presentation only; strictly increasing, so orderings never change.
    """
    out = expit(np.asarray(raw, dtype=np.float64) / math.sqrt(2.0))
    return float(out) if out.ndim == 0 else out


def decide_pairwise(
    score_a: float,
    score_b: float,
    tie_threshold: float = DEFAULT_TIE_THRESHOLD,
    mode: str = "normalized",
) -> PairDecision:
    """A, B or Fair from two raw scores.

    In ``normalized`` mode (default) the threshold applies to the gap between
    normalized scores; in ``raw-diff`` mode to the raw score gap, which makes
    the decision invariant to shifting both scores.
    """
    if not (math.isfinite(score_a) and math.isfinite(score_b)):
        raise MetricError("scores must be finite")
    if mode == "normalized":
        a, b = normalize_score(score_a), normalize_score(score_b)
    elif mode == "raw-diff":
        a, b = float(score_a), float(score_b)
    else:
        raise ValueError(f"unknown decision mode {mode!r}")
    if abs(a - b) < tie_threshold:
        return PairDecision.FAIR
    if a > b:
        return PairDecision.A
    if b > a:
        return PairDecision.B
    return PairDecision.FAIR


def _paired(xs, ys):
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricError(f"need two equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise MetricError("need at least two observations")
    return x, y


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x, y = _paired(xs, ys)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise MetricError("correlation undefined: an input has zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def average_ranks(xs: Sequence[float]) -> np.ndarray:
    """1-based ranks, ties sharing the mean of their block."""
    return rankdata(np.asarray(xs, dtype=np.float64), method="average")


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    x, y = _paired(xs, ys)
    return pearson(average_ranks(x), average_ranks(y))


def pairwise_accuracy(
    preds: Sequence,
    golds: Sequence,
    mode: str = "with_tie",
    scores: Sequence[tuple[float, float]] | None = None,
) -> float:
    """Agreement with gold pairwise labels, in percent.

    ``with_tie`` is ternary exact match over every pair.  ``without_tie``
    drops gold-Fair pairs and scores the rest as a binary choice: when raw
    ``scores`` are supplied the choice is re-made by plain argmax, otherwise
    the given decisions are used; an exact tie earns half credit.
    """
    preds = [PairDecision.parse(p) for p in preds]
    golds = [PairDecision.parse(g) for g in golds]
    if len(preds) != len(golds):
        raise MetricError(f"{len(preds)} predictions for {len(golds)} gold labels")
    if scores is not None and len(scores) != len(golds):
        raise MetricError("scores must align with gold labels")
    if mode == "with_tie":
        if not golds:
            raise MetricError("no pairs to score")
        return 100.0 * sum(p is g for p, g in zip(preds, golds)) / len(golds)
    if mode != "without_tie":
        raise ValueError(f"unknown accuracy mode {mode!r}")
    credit, n = 0.0, 0
    for k, (p, g) in enumerate(zip(preds, golds)):
        if g is PairDecision.FAIR:
            continue
        n += 1
        if scores is not None:
            a, b = scores[k]
            p = PairDecision.A if a > b else PairDecision.B if b > a else PairDecision.FAIR
        if p is PairDecision.FAIR:
            credit += 0.5
        elif p is g:
            credit += 1.0
    if n == 0:
        raise MetricError("every gold label is Fair; nothing left to score without ties")
    return 100.0 * credit / n


def dimension_accuracy(
    preds: Mapping[str, Sequence], golds: Mapping[str, Sequence]
) -> dict[str, float]:
    """Ternary accuracy per head plus their macro ``average``.

    The average covers the ten standard dimensions when any are present
    (so an Overall head does not skew it), otherwise every supplied head.
    """
    if set(preds) != set(golds):
        raise MetricError(f"head sets differ: {sorted(set(preds) ^ set(golds))}")
    out = {head: pairwise_accuracy(preds[head], golds[head], "with_tie") for head in golds}
    dims = [h for h in golds if h in DIMENSIONS] or list(golds)
    out["average"] = float(np.mean([out[h] for h in dims]))
    return out


def reliability_report(model: EvaluatorModel) -> dict:
    """Learned (alpha, beta) per head and judge.

    When a head's mean reliability falls below 0.5 the mirrored reading
    ``(1 - beta, 1 - alpha)`` is listed next to the raw values, since the
    likelihood cannot tell the two apart.
    """
    out = {}
    for head in model.heads:
        raw = reliability_values(model.panel, head)
        mean = float(np.mean([(a + b) / 2 for a, b in raw.values()]))
        entry = {
            "judges": {j: {"alpha": a, "beta": b} for j, (a, b) in raw.items()},
            "mean": mean,
        }
        if mean < 0.5:
            entry["flipped"] = {j: {"alpha": 1 - b, "beta": 1 - a} for j, (a, b) in raw.items()}
        out[head] = entry
    return out


def eval_report(
    single_rating: Mapping[str, float] | None = None,
    pairwise: Mapping[str, object] | None = None,
    dimensions: Mapping[str, float] | None = None,
    reliabilities: Mapping[str, object] | None = None,
) -> dict:
    report = {}
    if single_rating is not None:
        report["single_rating"] = dict(single_rating)
    if pairwise is not None:
        report["pairwise"] = dict(pairwise)
    if dimensions is not None:
        report["dimensions"] = dict(dimensions)
    if reliabilities is not None:
        report["reliabilities"] = dict(reliabilities)
    return report
