"""Synthetic panels with known ground truth, plus brute-force reference values.

The generator follows the model's own story: items get standard-normal
embeddings, a hidden quality map scores them, the latent winner of each pair
is drawn from the Thurstone probability, and every judge passes that latent
label through an abstain-then-confuse channel.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import mpmath
import numpy as np

from judgefuse.core import (
    OVERALL,
    PROB_CLAMP,
    EvaluatorModel,
    JudgeLabel,
    JudgePanel,
    PreferenceRecord,
    normal_cdf,
)
from judgefuse.datapipe import SWAP_SUFFIX, EmbeddingStore


@dataclass(frozen=True)
class JudgeSpec:
    alpha: float
    beta: float
    fair_rate: float = 0.0
    name: str | None = None

    def __post_init__(self):
        for label, v in (("alpha", self.alpha), ("beta", self.beta)):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{label} must lie in [0, 1], got {v}")
        if not 0.0 <= self.fair_rate <= 1.0:
            raise ValueError(f"fair_rate must lie in [0, 1], got {self.fair_rate}")


@dataclass(frozen=True)
class SynthSpec:
    n_items: int
    dim: int
    n_pairs: int
    judges: tuple[JudgeSpec, ...]
    quality_map: str = "linear"
    sigma_true: float = 1.0
    seed: int = 0
    heads: tuple[str, ...] = (OVERALL,)

    def __post_init__(self):
        judges = tuple(j if isinstance(j, JudgeSpec) else JudgeSpec(**j) for j in self.judges)
        object.__setattr__(self, "judges", judges)
        object.__setattr__(self, "heads", tuple(self.heads))
        if self.n_items < 2 and self.n_pairs > 0:
            raise ValueError("need at least two items to form pairs")
        if self.dim < 1 or self.n_pairs < 0 or self.n_items < 0:
            raise ValueError("dim must be positive; counts non-negative")
        if not judges:
            raise ValueError("need at least one judge")
        if self.quality_map not in ("linear", "quadratic"):
            raise ValueError(f"quality_map must be 'linear' or 'quadratic', got {self.quality_map!r}")
        if not self.sigma_true > 0:
            raise ValueError("sigma_true must be positive")
        if OVERALL not in self.heads:
            raise ValueError(f"heads must include {OVERALL!r}")

    @property
    def judge_names(self) -> list[str]:
        return [j.name or f"judge{k}" for k, j in enumerate(self.judges)]

    @classmethod
    def from_json(cls, obj: dict) -> "SynthSpec":
        obj = dict(obj)
        obj["judges"] = tuple(JudgeSpec(**j) for j in obj["judges"])
        if "heads" in obj:
            obj["heads"] = tuple(obj["heads"])
        return cls(**obj)

    def to_json(self) -> dict:
        d = asdict(self)
        d["judges"] = [asdict(j) for j in self.judges]
        d["heads"] = list(self.heads)
        return d


@dataclass
class QualityMap:
    """Hidden scorer ``q*(x) = w.x`` (+ ``0.5 * (u.x)**2`` when quadratic)."""

    w: np.ndarray
    u: np.ndarray | None = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        q = x @ self.w
        if self.u is not None:
            q = q + 0.5 * (x @ self.u) ** 2
        return q


@dataclass
class SynthData:
    spec: SynthSpec
    store: EmbeddingStore
    quality: dict[str, dict[str, float]]  # head -> item id -> q*
    records: list[PreferenceRecord]
    latent: dict[str, dict[str, int]]  # head -> pair id -> r
    true_panel: JudgePanel
    maps: dict[str, QualityMap] = field(default_factory=dict)

    def sidecar(self) -> dict:
        return {
            "spec": self.spec.to_json(),
            "sigma_true": self.spec.sigma_true,
            "w_star": {h: m.w.tolist() for h, m in self.maps.items()},
            "u_star": {h: m.u.tolist() for h, m in self.maps.items() if m.u is not None},
            "judges": {
                name: {"alpha": j.alpha, "beta": j.beta, "fair_rate": j.fair_rate}
                for name, j in zip(self.spec.judge_names, self.spec.judges)
            },
        }


def child_rng(seed: int, label: str) -> np.random.Generator:
    key = int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "little")
    return np.random.default_rng([seed, key])


def simulate_judge(r: int, alpha: float, beta: float, fair_rate: float, rng: np.random.Generator) -> JudgeLabel:
    """Draw one judge label for latent truth ``r`` (1 means B is better).

    Abstains (Fair) with probability ``fair_rate``; otherwise says B with
    probability ``alpha`` when ``r == 1`` and says A with probability
    ``beta`` when ``r == 0``.  Always consumes exactly two uniforms.
    """
    u_fair, u_side = rng.random(2)
    if u_fair < fair_rate:
        return JudgeLabel.FAIR
    if r == 1:
        return JudgeLabel.WIN_B if u_side < alpha else JudgeLabel.WIN_A
    return JudgeLabel.WIN_A if u_side < beta else JudgeLabel.WIN_B


def _logit(p: float) -> float:
    p = min(max(p, 1e-12), 1 - 1e-12)
    return math.log(p) - math.log1p(-p)


def true_panel(spec: SynthSpec) -> JudgePanel:
    names = spec.judge_names
    al = np.array([_logit(j.alpha) for j in spec.judges])
    bl = np.array([_logit(j.beta) for j in spec.judges])
    return JudgePanel(tuple(names), {h: al for h in spec.heads}, {h: bl for h in spec.heads})


def make_quality_map(spec: SynthSpec, head: str) -> QualityMap:
    rng = child_rng(spec.seed, f"quality/{head}")
    w = rng.normal(size=spec.dim)
    u = rng.normal(size=spec.dim) / math.sqrt(spec.dim) if spec.quality_map == "quadratic" else None
    return QualityMap(w, u)


def generate(spec: SynthSpec) -> SynthData:
    """Items, true qualities, judge-labelled pairs and the true panel for ``spec``."""
    ids = [f"item{k:05d}" for k in range(spec.n_items)]
    x = child_rng(spec.seed, "items").normal(size=(spec.n_items, spec.dim))
    store = EmbeddingStore(ids, x.astype(np.float32), spec.dim)
    # qualities are computed from the stored (f32) coordinates so a model can match them exactly
    x = store.matrix.astype(np.float64)

    pair_rng = child_rng(spec.seed, "pairs")
    if spec.n_pairs:
        first = pair_rng.integers(0, spec.n_items, size=spec.n_pairs)
        offset = pair_rng.integers(1, spec.n_items, size=spec.n_pairs)
        second = (first + offset) % spec.n_items
    else:
        first = second = np.zeros(0, dtype=int)
    pair_ids = [f"pair{k:06d}" for k in range(spec.n_pairs)]

    names = spec.judge_names
    labels = [{name: {} for name in names} for _ in range(spec.n_pairs)]
    quality, latent, maps = {}, {}, {}
    for head in spec.heads:
        qmap = make_quality_map(spec, head)
        maps[head] = qmap
        q = qmap(x) if spec.n_items else np.zeros(0)
        quality[head] = dict(zip(ids, q.tolist()))
        latent_rng = child_rng(spec.seed, f"latent/{head}")
        judge_rng = child_rng(spec.seed, f"judges/{head}")
        latent[head] = {}
        if spec.n_pairs:
            p = normal_cdf((q[second] - q[first]) / (math.sqrt(2.0) * spec.sigma_true))
            r = (latent_rng.random(spec.n_pairs) < p).astype(int)
        else:
            r = np.zeros(0, dtype=int)
        for i in range(spec.n_pairs):
            latent[head][pair_ids[i]] = int(r[i])
            for name, judge in zip(names, spec.judges):
                labels[i][name][head] = simulate_judge(int(r[i]), judge.alpha, judge.beta, judge.fair_rate, judge_rng)

    records = [
        PreferenceRecord(pair_ids[i], ids[first[i]], ids[second[i]], labels[i]) for i in range(spec.n_pairs)
    ]
    return SynthData(spec, store, quality, records, latent, true_panel(spec), maps)


def held_out_items(spec: SynthSpec, data: SynthData, n: int, seed_label: str = "heldout"):
    """Fresh items scored by the same hidden map(s): ``(store, {head: q*})``."""
    ids = [f"heldout{k:05d}" for k in range(n)]
    x = child_rng(spec.seed, seed_label).normal(size=(n, spec.dim))
    store = EmbeddingStore(ids, x.astype(np.float32), spec.dim)
    x = store.matrix.astype(np.float64)
    return store, {h: m(x) for h, m in data.maps.items()}


def sample_latent_pairs(quality: np.ndarray, n_pairs: int, sigma: float, rng: np.random.Generator):
    """Random index pairs with latent labels drawn from the Thurstone probability."""
    k = len(quality)
    a = rng.integers(0, k, size=n_pairs)
    b = (a + rng.integers(1, k, size=n_pairs)) % k
    p = normal_cdf((quality[b] - quality[a]) / (math.sqrt(2.0) * sigma))
    r = (rng.random(n_pairs) < p).astype(int)
    return a, b, r


def make_swaps(
    records: Sequence[PreferenceRecord], inconsistency_rate: float, seed: int
) -> tuple[list[PreferenceRecord], set[str]]:
    """Swapped-order counterparts, a fraction of them deliberately inconsistent.

    Returns the counterparts (ids suffixed ``/swap``) and the set of original
    pair ids whose counterpart was corrupted.
    """
    rng = child_rng(seed, "swaps")
    out, corrupted = [], set()
    for rec in records:
        swapped = rec.mirrored(rec.pair_id + SWAP_SUFFIX)
        if rng.random() < inconsistency_rate:
            labels = {j: dict(h) for j, h in swapped.labels.items()}
            judges = sorted(labels)
            judge = judges[int(rng.integers(len(judges)))]
            heads = sorted(labels[judge])
            head = heads[int(rng.integers(len(heads)))]
            current = labels[judge][head]
            choices = [v for v in JudgeLabel if v is not current]
            labels[judge][head] = choices[int(rng.integers(len(choices)))]
            swapped = PreferenceRecord(swapped.pair_id, swapped.item_a, swapped.item_b, labels)
            corrupted.add(rec.pair_id)
        out.append(swapped)
    return out, corrupted


# ---------------------------------------------------------------------------
# oracles

ORACLE_MAX_JUDGES = 10


class OracleRangeError(ArithmeticError):
    pass


def _scores_longdouble(model: EvaluatorModel, head: str, x: np.ndarray) -> np.ndarray:
    qh = model.head(head)
    h = np.asarray(x, dtype=np.longdouble)
    for k, (w, b) in enumerate(zip(qh.weights, qh.biases)):
        h = h @ np.asarray(w, dtype=np.longdouble).T + np.asarray(b, dtype=np.longdouble)
        if k < len(qh.weights) - 1:
            h = np.tanh(h)
    return h[:, 0]


def _mp(x) -> mpmath.mpf:
    # exact: every binary float is a ratio with a power-of-two denominator
    num, den = (x if isinstance(x, np.longdouble) else float(x)).as_integer_ratio()
    return mpmath.mpf(num) / den


def _scores_mp(model: EvaluatorModel, head: str, x: np.ndarray) -> list:
    qh = model.head(head)
    layers = [
        ([[_mp(v) for v in row] for row in w], [_mp(v) for v in b]) for w, b in zip(qh.weights, qh.biases)
    ]
    out = []
    for row in np.asarray(x, dtype=np.float64):
        h = [_mp(v) for v in row]
        for k, (w, b) in enumerate(layers):
            h = [mpmath.fsum(wi * hi for wi, hi in zip(w_row, h)) + bias for w_row, bias in zip(w, b)]
            if k < len(layers) - 1:
                h = [mpmath.tanh(v) for v in h]
        out.append(h[0])
    return out


def oracle_nll_mp(
    records: Sequence[PreferenceRecord], items, model: EvaluatorModel, head: str, dps: int = 40, forward: str = "longdouble"
):
    """:func:`oracle_nll` without the final rounding, as an ``mpmath.mpf``.

    ``forward="mp"`` also runs the network in ``dps``-digit arithmetic,
    for finite-difference checks that need more than 80-bit scores.
    """
    judges = model.panel.judges
    if len(judges) > ORACLE_MAX_JUDGES:
        raise OracleRangeError(f"oracle limited to {ORACLE_MAX_JUDGES} judges, got {len(judges)}")
    if not records:
        return mpmath.mpf(0)
    get = items.vector if hasattr(items, "vector") else (lambda k: getattr(items[k], "embedding", items[k]))
    xa = np.stack([np.asarray(get(r.item_a), dtype=np.float64) for r in records])
    xb = np.stack([np.asarray(get(r.item_b), dtype=np.float64) for r in records])
    sigma = model.head(head).sigma
    with mpmath.workdps(dps):
        if forward == "mp":
            fa, fb = _scores_mp(model, head, xa), _scores_mp(model, head, xb)
        elif forward == "longdouble":
            fa = [_mp(v) for v in _scores_longdouble(model, head, xa)]
            fb = [_mp(v) for v in _scores_longdouble(model, head, xb)]
        else:
            raise ValueError(f"unknown forward precision {forward!r}")
        alpha = [1 / (1 + mpmath.exp(-_mp(v))) for v in model.panel.alpha_logit[head]]
        beta = [1 / (1 + mpmath.exp(-_mp(v))) for v in model.panel.beta_logit[head]]
        lo, hi = mpmath.mpf(PROB_CLAMP), 1 - mpmath.mpf(PROB_CLAMP)
        total = mpmath.mpf(0)
        for rec, a_score, b_score in zip(records, fa, fb):
            a_prod = mpmath.mpf(1)
            b_prod = mpmath.mpf(1)
            informative = False
            for j, judge in enumerate(judges):
                label = rec.label(judge, head)
                if label is None or label is JudgeLabel.FAIR:
                    continue
                informative = True
                r = label.r
                a_prod *= alpha[j] ** r * (1 - alpha[j]) ** (1 - r)
                b_prod *= beta[j] ** (1 - r) * (1 - beta[j]) ** r
            if not informative:
                continue
            z = (b_score - a_score) / (mpmath.sqrt(2) * _mp(sigma))
            p = mpmath.erfc(-z / mpmath.sqrt(2)) / 2
            p = min(max(p, lo), hi)
            lik = a_prod * p + b_prod * (1 - p)
            if float(lik) == 0.0:
                raise OracleRangeError(f"record {rec.pair_id!r}: likelihood underflows; use a smaller instance")
            total -= mpmath.log(lik)
        return +total


def oracle_nll(records: Sequence[PreferenceRecord], items, model: EvaluatorModel, head: str, dps: int = 40) -> float:
    """Reference NLL: the likelihood product formed directly, no log-space tricks.

    Scores use an 80-bit forward pass and everything after that runs in
    ``dps``-digit arithmetic.  Meant for small instances only.
    """
    return float(oracle_nll_mp(records, items, model, head, dps))


def flip_correct(learned: JudgePanel, truth: JudgePanel, head: str) -> tuple[JudgePanel, bool]:
    """Resolve the global label-flip ambiguity against known truth.

    Compares the mean |alpha - alpha*| + |beta - beta*| of the learned panel
    with that of its mirror image ``(alpha, beta) -> (1 - beta, 1 - alpha)``
    and returns whichever is closer.
    """
    if tuple(learned.judges) != tuple(truth.judges):
        raise ValueError("learned and true panels list different judges")
    a, b = learned.alpha(head), learned.beta(head)
    ta, tb = truth.alpha(head), truth.beta(head)
    raw = np.mean(np.abs(a - ta) + np.abs(b - tb))
    flipped = np.mean(np.abs((1 - b) - ta) + np.abs((1 - a) - tb))
    if flipped < raw:
        # logit(1 - beta) == -logit(beta)
        return learned.with_head(head, -learned.beta_logit[head], -learned.alpha_logit[head]), True
    return learned, False
