"""Shared fixtures-by-function for the test suite: random instances and oracles."""
from __future__ import annotations

import mpmath
import numpy as np

from judgefuse.core import OVERALL, EvaluatorModel, JudgeLabel, JudgePanel, PreferenceRecord, QualityHead
from judgefuse.datapipe import EmbeddingStore
from judgefuse.synth import oracle_nll_mp

LABELS = (JudgeLabel.WIN_A, JudgeLabel.WIN_B, JudgeLabel.FAIR)


def random_instance(rng, dim=8, hidden=(6, 4), n_judges=5, n_pairs=16, n_items=24, fair_p=0.3, head=OVERALL):
    """Random model (random biases and reliabilities too), store and labelled batch."""
    dims = [dim, *hidden, 1]
    weights = [rng.normal(0, 0.8, size=(o, i)) for i, o in zip(dims[:-1], dims[1:])]
    biases = [rng.normal(0, 0.3, size=o) for o in dims[1:]]
    judges = tuple(f"j{k}" for k in range(n_judges))
    panel = JudgePanel(judges, {head: rng.normal(0, 1.5, n_judges)}, {head: rng.normal(0, 1.5, n_judges)})
    model = EvaluatorModel(dim, {head: QualityHead(tuple(weights), tuple(biases))}, panel)
    ids = [f"it{k}" for k in range(n_items)]
    store = EmbeddingStore(ids, rng.normal(size=(n_items, dim)).astype(np.float32), dim)
    records = []
    for p in range(n_pairs):
        a, b = rng.choice(n_items, size=2, replace=False)
        labels = {}
        for j in judges:
            if rng.random() < fair_p:
                labels[j] = {head: JudgeLabel.FAIR}
            else:
                labels[j] = {head: LABELS[int(rng.integers(2))]}
        records.append(PreferenceRecord(f"p{p}", ids[a], ids[b], labels))
    return model, store, records


def flat_params(model: EvaluatorModel, head=OVERALL) -> np.ndarray:
    qh = model.head(head)
    parts = [a.ravel() for pair in zip(qh.weights, qh.biases) for a in pair]
    return np.concatenate(parts + [model.panel.alpha_logit[head], model.panel.beta_logit[head]])


def with_flat(model: EvaluatorModel, theta: np.ndarray, head=OVERALL) -> EvaluatorModel:
    qh = model.head(head)
    pos = 0
    ws, bs = [], []
    for w, b in zip(qh.weights, qh.biases):
        ws.append(theta[pos : pos + w.size].reshape(w.shape))
        pos += w.size
        bs.append(theta[pos : pos + b.size].copy())
        pos += b.size
    n = len(model.panel.judges)
    panel = model.panel.with_head(head, theta[pos : pos + n], theta[pos + n : pos + 2 * n])
    heads = dict(model.heads)
    heads[head] = qh.replace(ws, bs)
    return EvaluatorModel(model.embedding_dim, heads, panel)


def fd_gradient(model, store, records, head=OVERALL, step=1e-5, order=4):
    """Central differences of the extended-precision oracle.

    ``order=2`` is the plain (f(p+h) - f(p-h)) / 2h; ``order=4`` adds the
    +-2h points, which drops the h**2 truncation term that otherwise reaches
    ~4e-6 relative on coordinates near 1e-5 in magnitude.  Differences are
    taken in 40-digit arithmetic before rounding to float64.
    """
    theta = flat_params(model, head)
    out = np.empty_like(theta)
    offsets = (1, -1) if order == 2 else (2, 1, -1, -2)
    coeffs = (1, -1) if order == 2 else (-1, 8, -8, 1)
    denom = 2 if order == 2 else 12
    with mpmath.workdps(40):
        for k in range(theta.size):
            total = mpmath.mpf(0)
            for c, w in zip(offsets, coeffs):
                t = theta.copy()
                t[k] += c * step
                total += w * oracle_nll_mp(records, store, with_flat(model, t, head), head)
            out[k] = float(total / (denom * mpmath.mpf(step)))
    return out


# below the 40-digit oracle's resolution for O(1) losses and step 1e-5
ORACLE_FLOOR = 1e-20


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - b| / max(|a|, |b|, ORACLE_FLOOR)."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ORACLE_FLOOR)
    return np.abs(analytic - numeric) / scale
