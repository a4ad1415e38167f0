"""Multi-judge likelihood, its negative log and exact gradients.

For one pair with latent truth ``r`` (1 when B is better) and non-Fair judge
labels ``r_j``::

    L = A * P + B * (1 - P)
    A = prod_j alpha_j ** r_j * (1 - alpha_j) ** (1 - r_j)
    B = prod_j beta_j ** (1 - r_j) * (1 - beta_j) ** r_j

where ``P`` is the Thurstone probability that B wins.  Fair labels are left
out of both products.  Everything is evaluated in log space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import log_expit

from judgefuse.core import (
    PROB_CLAMP,
    EvaluatorModel,
    JudgeLabel,
    JudgePanel,
    JudgefuseError,
    PreferenceRecord,
    logistic,
    normal_cdf,
    normal_pdf,
)

SQRT2 = math.sqrt(2.0)


class RecordError(JudgefuseError, KeyError):
    """A record cannot be evaluated (unknown item, missing head label)."""

    def __init__(self, pair_id: str, reason: str):
        super().__init__(f"record {pair_id!r}: {reason}")
        self.pair_id = pair_id
        self.reason = reason

    def __str__(self):
        return self.args[0]


@dataclass(frozen=True)
class LabelBatch:
    """Records for one head in array form.

    ``votes[i, j]`` is 1 when judge j said B, 0 when it said A (or was
    silent); ``mask[i, j]`` marks non-Fair labels.
    """

    pair_ids: tuple[str, ...]
    x_a: np.ndarray
    x_b: np.ndarray
    votes: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return len(self.pair_ids)

    def subset(self, idx) -> "LabelBatch":
        idx = np.asarray(idx, dtype=np.intp)
        return LabelBatch(
            tuple(self.pair_ids[i] for i in idx),
            self.x_a[idx],
            self.x_b[idx],
            self.votes[idx],
            self.mask[idx],
        )


def _lookup(items) -> callable:
    if hasattr(items, "vector"):
        return items.vector
    if isinstance(items, Mapping):
        def get(item_id):
            v = items[item_id]
            return getattr(v, "embedding", v)
        return get
    raise TypeError(f"unsupported item store {type(items).__name__}")


def encode_records(
    records: Sequence[PreferenceRecord],
    items,
    judges: Sequence[str],
    head_name: str,
) -> LabelBatch:
    """Resolve embeddings and pack labels; raises :class:`RecordError`."""
    get = _lookup(items)
    judge_pos = {j: k for k, j in enumerate(judges)}
    n, m = len(records), len(judges)
    votes = np.zeros((n, m))
    mask = np.zeros((n, m), dtype=bool)
    xa, xb = [], []
    for i, rec in enumerate(records):
        seen = False
        for judge, heads in rec.labels.items():
            label = heads.get(head_name)
            if label is None:
                continue
            seen = True
            if judge not in judge_pos:
                raise RecordError(rec.pair_id, f"judge {judge!r} is not in the panel")
            if label is not JudgeLabel.FAIR:
                k = judge_pos[judge]
                mask[i, k] = True
                votes[i, k] = label.r
        if not seen:
            raise RecordError(rec.pair_id, f"no judge labelled head {head_name!r}")
        for item_id, bucket in ((rec.item_a, xa), (rec.item_b, xb)):
            try:
                bucket.append(np.asarray(get(item_id), dtype=np.float64))
            except KeyError:
                raise RecordError(rec.pair_id, f"unknown item id {item_id!r}") from None
    if n == 0:
        empty = np.zeros((0, 0))
        return LabelBatch((), empty, empty, votes, mask)
    return LabelBatch(tuple(r.pair_id for r in records), np.stack(xa), np.stack(xb), votes, mask)


def pair_log_likelihood(
    labels: Sequence[JudgeLabel | None],
    panel: JudgePanel,
    head_name: str,
    p: float,
) -> float:
    """Log-likelihood of one pair's labels given P(r=1) = ``p``.

    ``labels`` is indexed like ``panel.judges``; ``None`` means the judge did
    not label this head.
    """
    if len(labels) != len(panel.judges):
        raise ValueError(f"expected {len(panel.judges)} labels, got {len(labels)}")
    labels = [None if v is None else JudgeLabel.parse(v) for v in labels]
    mask = np.array([v is not None and v is not JudgeLabel.FAIR for v in labels])
    if not mask.any():
        return 0.0
    votes = np.array([1.0 if v is JudgeLabel.WIN_B else 0.0 for v in labels])
    log_a, log_b = _log_channels(
        votes[None, :], mask[None, :], panel.alpha_logit[head_name], panel.beta_logit[head_name]
    )
    return float(np.logaddexp(log_a + math.log(p), log_b + math.log1p(-p))[0])


def _log_channels(votes, mask, alpha_logit, beta_logit):
    log_alpha, log_not_alpha = log_expit(alpha_logit), log_expit(-alpha_logit)
    log_beta, log_not_beta = log_expit(beta_logit), log_expit(-beta_logit)
    # votes are exactly 0/1 so select instead of multiplying (keeps 0 * -inf out)
    said_b = votes > 0.5
    log_a = np.where(mask, np.where(said_b, log_alpha, log_not_alpha), 0.0).sum(axis=1)
    log_b = np.where(mask, np.where(said_b, log_not_beta, log_beta), 0.0).sum(axis=1)
    return log_a, log_b


def _forward_cache(weights, biases, x):
    acts = [x]
    h = x
    last = len(weights) - 1
    for k, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w.T + b
        if k < last:
            h = np.tanh(h)
        acts.append(h)
    return acts


def _backward(weights, acts, g_out):
    """Gradients of sum_i g_out[i] * f(x_i) for every layer."""
    n_layers = len(weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    delta = g_out[:, None]
    for k in range(n_layers - 1, -1, -1):
        gw[k] = delta.T @ acts[k]
        gb[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ weights[k]) * (1.0 - acts[k] ** 2)
    return gw, gb


@dataclass
class GradientBundle:
    """Gradients of the batch NLL, shaped like the trainable parameters."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    alpha_logit: np.ndarray
    beta_logit: np.ndarray
    head_name: str = ""

    def flat(self) -> np.ndarray:
        parts = [a.ravel() for pair in zip(self.weights, self.biases) for a in pair]
        return np.concatenate(parts + [self.alpha_logit, self.beta_logit])

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        return GradientBundle(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
            self.alpha_logit + other.alpha_logit,
            self.beta_logit + other.beta_logit,
            self.head_name,
        )


def nll_and_grad(weights, biases, sigma, alpha_logit, beta_logit, batch: LabelBatch, grad: bool = True):
    """Core evaluation on raw parameter arrays.

    Returns ``(nll, per_pair_ll, grads)`` where ``grads`` is
    ``(gw, gb, g_alpha, g_beta)`` or ``None`` when ``grad`` is false.
    """
    n = len(batch)
    informative = batch.mask.any(axis=1)
    if n == 0 or not informative.any():
        ll = np.zeros(n)
        zeros = (
            [np.zeros_like(w) for w in weights],
            [np.zeros_like(b) for b in biases],
            np.zeros_like(alpha_logit),
            np.zeros_like(beta_logit),
        )
        return 0.0, ll, zeros if grad else None

    acts = _forward_cache(weights, biases, np.concatenate([batch.x_a, batch.x_b]))
    f = acts[-1][:, 0]
    z = (f[n:] - f[:n]) / (SQRT2 * sigma)
    p = np.clip(normal_cdf(z), PROB_CLAMP, 1.0 - PROB_CLAMP)
    log_a, log_b = _log_channels(batch.votes, batch.mask, alpha_logit, beta_logit)
    log_p, log_q = np.log(p), np.log1p(-p)
    ll = np.where(informative, np.logaddexp(log_a + log_p, log_b + log_q), 0.0)
    nll = float(-ll.sum())
    if not grad:
        return nll, ll, None

    keep = informative
    # posterior of r=1 / r=0 given the labels, and d ll / dP
    w1 = np.where(keep, np.exp(log_a + log_p - ll), 0.0)
    w0 = np.where(keep, np.exp(log_b + log_q - ll), 0.0)
    dll_dp = np.where(keep, np.exp(log_a - ll) - np.exp(log_b - ll), 0.0)
    # the clamp has zero slope outside its range
    unclamped = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    dll_dz = np.where(unclamped, dll_dp * normal_pdf(z), 0.0)
    d_diff = -dll_dz / (SQRT2 * sigma)
    gw, gb = _backward(weights, acts, np.concatenate([-d_diff, d_diff]))
    # the output bias cancels in f(B) - f(A); report its zero gradient exactly
    gb[-1] = np.zeros_like(gb[-1])

    alpha = logistic(alpha_logit)
    beta = logistic(beta_logit)
    mask, votes = batch.mask, batch.votes
    g_alpha = -(w1[:, None] * np.where(mask, votes - alpha, 0.0)).sum(axis=0)
    g_beta = -(w0[:, None] * np.where(mask, (1.0 - votes) - beta, 0.0)).sum(axis=0)
    return nll, ll, (gw, gb, g_alpha, g_beta)


def _unpack(model: EvaluatorModel, head_name: str):
    head = model.head(head_name)
    return (
        head.weights,
        head.biases,
        head.sigma,
        model.panel.alpha_logit[head_name],
        model.panel.beta_logit[head_name],
    )


def batch_nll(records: Sequence[PreferenceRecord], items, model: EvaluatorModel, head_name: str) -> float:
    """Negative log-likelihood of ``records`` under ``model`` for one head."""
    batch = encode_records(records, items, model.panel.judges, head_name)
    return nll_and_grad(*_unpack(model, head_name), batch, grad=False)[0]


def pair_log_likelihoods(records, items, model: EvaluatorModel, head_name: str) -> np.ndarray:
    batch = encode_records(records, items, model.panel.judges, head_name)
    return nll_and_grad(*_unpack(model, head_name), batch, grad=False)[1]


def compute_gradients(
    records: Sequence[PreferenceRecord], items, model: EvaluatorModel, head_name: str
) -> GradientBundle:
    """Exact gradient of :func:`batch_nll` with respect to all trainable parameters."""
    batch = encode_records(records, items, model.panel.judges, head_name)
    _, _, (gw, gb, ga, gbeta) = nll_and_grad(*_unpack(model, head_name), batch)
    return GradientBundle(gw, gb, ga, gbeta, head_name)


def reliability_values(panel: JudgePanel, head_name: str) -> dict[str, tuple[float, float]]:
    """Per-judge ``(alpha, beta)`` for a head, kept strictly inside (0, 1)."""
    if head_name not in panel.heads:
        raise KeyError(f"panel has no reliabilities for head {head_name!r}")
    lo, hi = np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0)
    alpha = np.clip(panel.alpha(head_name), lo, hi)
    beta = np.clip(panel.beta(head_name), lo, hi)
    return {j: (float(a), float(b)) for j, a, b in zip(panel.judges, alpha, beta)}
