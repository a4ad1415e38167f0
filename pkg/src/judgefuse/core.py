"""Domain types, the MLP quality head and the Thurstone Case V preference probability.

A dialogue enters the model only as a fixed embedding vector.  Each quality
head is a small tanh MLP mapping that vector to a scalar; two items are
compared through

    P(B beats A) = Phi((f(B) - f(A)) / (sqrt(2) * sigma))

with ``sigma`` held fixed.  Judge reliabilities live in :class:`JudgePanel`
as unconstrained logits per (head, judge).
"""
from __future__ import annotations

import enum
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import erfc, expit

OVERALL = "Overall"
DIMENSIONS = (
    "Accuracy",
    "Logicality",
    "Conversationality",
    "Relevance",
    "Personalization",
    "Creativity",
    "Interactivity",
    "Emotionality",
    "Informativeness",
    "Safety",
)
ALL_HEADS = DIMENSIONS + (OVERALL,)

PROB_CLAMP = 1e-12
DEFAULT_HIDDEN = (256, 64)

MODEL_MAGIC = b"MTDE"
MODEL_VERSION = 1


class JudgefuseError(Exception):
    """Base class for all library errors."""


class DimensionError(JudgefuseError, ValueError):
    def __init__(self, expected: int, actual: int, what: str = "embedding"):
        super().__init__(f"{what} dimension mismatch: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class ModelFormatError(JudgefuseError):
    pass


class JudgeLabel(enum.Enum):
    """Three-way judge verdict on an ordered pair (A, B)."""

    WIN_A = "A"
    WIN_B = "B"
    FAIR = "Fair"

    @property
    def r(self) -> int:
        """Numeric encoding: 0 for A, 1 for B, -1 for Fair."""
        return _R_VALUE[self]

    def mirror(self) -> "JudgeLabel":
        return _MIRROR[self]

    @classmethod
    def parse(cls, value: "str | JudgeLabel") -> "JudgeLabel":
        if isinstance(value, JudgeLabel):
            return value
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"illegal label {value!r}; expected one of 'A', 'B', 'Fair'") from None


_R_VALUE = {JudgeLabel.WIN_A: 0, JudgeLabel.WIN_B: 1, JudgeLabel.FAIR: -1}
_MIRROR = {
    JudgeLabel.WIN_A: JudgeLabel.WIN_B,
    JudgeLabel.WIN_B: JudgeLabel.WIN_A,
    JudgeLabel.FAIR: JudgeLabel.FAIR,
}


@dataclass(frozen=True)
class EmbeddedItem:
    id: str
    embedding: np.ndarray

    def __post_init__(self):
        emb = np.array(self.embedding, dtype=np.float64)
        if emb.ndim != 1 or emb.size == 0:
            raise ValueError(f"item {self.id!r}: embedding must be a non-empty vector")
        if not np.all(np.isfinite(emb)):
            raise ValueError(f"item {self.id!r}: embedding has non-finite coordinates")
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)

    @property
    def dim(self) -> int:
        return self.embedding.shape[0]


@dataclass(frozen=True)
class PreferenceRecord:
    """One compared pair with labels keyed ``labels[judge][head]``."""

    pair_id: str
    item_a: str
    item_b: str
    labels: Mapping[str, Mapping[str, JudgeLabel]]

    def __post_init__(self):
        if self.item_a == self.item_b:
            raise ValueError(f"record {self.pair_id!r}: item_a and item_b are both {self.item_a!r}")
        labels = {
            str(judge): {str(h): JudgeLabel.parse(v) for h, v in heads.items()}
            for judge, heads in self.labels.items()
        }
        object.__setattr__(self, "labels", labels)

    def label(self, judge: str, head: str) -> JudgeLabel | None:
        return self.labels.get(judge, {}).get(head)

    def heads(self) -> set[str]:
        return {h for heads in self.labels.values() for h in heads}

    def n_informative(self, head: str) -> int:
        """Number of judges whose label for ``head`` is not Fair (M')."""
        return sum(
            1 for heads in self.labels.values() if heads.get(head, JudgeLabel.FAIR) is not JudgeLabel.FAIR
        )

    def mirrored(self, pair_id: str | None = None) -> "PreferenceRecord":
        """The same comparison presented in swapped order."""
        return PreferenceRecord(
            pair_id=pair_id if pair_id is not None else self.pair_id,
            item_a=self.item_b,
            item_b=self.item_a,
            labels={j: {h: v.mirror() for h, v in heads.items()} for j, heads in self.labels.items()},
        )

    def to_json(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "item_a": self.item_a,
            "item_b": self.item_b,
            "labels": {j: {h: v.value for h, v in heads.items()} for j, heads in self.labels.items()},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "PreferenceRecord":
        return cls(
            pair_id=str(obj["pair_id"]),
            item_a=str(obj["item_a"]),
            item_b=str(obj["item_b"]),
            labels=obj["labels"],
        )


@dataclass(frozen=True)
class QualityHead:
    """Tanh MLP from embedding to scalar score, plus a fixed noise scale."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    sigma: float = 1.0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias vector per weight matrix and at least one layer")
        ws, bs = [], []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.array(w, dtype=np.float64, ndmin=2)
            b = np.array(b, dtype=np.float64, ndmin=1)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if ws and ws[-1].shape[0] != w.shape[1]:
                raise ValueError(f"layer {k}: expects {w.shape[1]} inputs, previous layer gives {ws[-1].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k}: non-finite parameters")
            w.setflags(write=False)
            b.setflags(write=False)
            ws.append(w)
            bs.append(b)
        if ws[-1].shape[0] != 1:
            raise ValueError(f"output layer must have 1 unit, has {ws[-1].shape[0]}")
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be positive and finite, got {self.sigma}")
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))
        object.__setattr__(self, "sigma", float(self.sigma))

    @classmethod
    def init(cls, layer_dims: Sequence[int], rng: np.random.Generator, sigma: float = 1.0) -> "QualityHead":
        """Glorot-normal weights, zero biases."""
        dims = list(layer_dims)
        if len(dims) < 2 or dims[-1] != 1 or min(dims) < 1:
            raise ValueError(f"layer_dims must be positive and end in 1, got {dims}")
        weights = [
            rng.normal(0.0, math.sqrt(2.0 / (n_in + n_out)), size=(n_out, n_in))
            for n_in, n_out in zip(dims[:-1], dims[1:])
        ]
        biases = [np.zeros(n_out) for n_out in dims[1:]]
        return cls(tuple(weights), tuple(biases), sigma)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Scores for a batch ``x`` of shape (n, d)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(self.input_dim, x.shape[-1] if x.ndim else 0)
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if k < last:
                h = np.tanh(h)
        return h[:, 0]

    def replace(self, weights=None, biases=None, sigma=None) -> "QualityHead":
        return QualityHead(
            self.weights if weights is None else tuple(weights),
            self.biases if biases is None else tuple(biases),
            self.sigma if sigma is None else sigma,
        )


def logistic(x):
    return expit(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class JudgePanel:
    """Per-head, per-judge reliability logits.

    ``alpha_logit[head][j]`` parameterises the hit rate of judge ``judges[j]``
    (P(says B | B truly better)); ``beta_logit`` the correct-rejection rate.
    """

    judges: tuple[str, ...]
    alpha_logit: Mapping[str, np.ndarray]
    beta_logit: Mapping[str, np.ndarray]

    def __post_init__(self):
        judges = tuple(str(j) for j in self.judges)
        if len(set(judges)) != len(judges):
            raise ValueError("duplicate judge ids in panel")
        if set(self.alpha_logit) != set(self.beta_logit):
            raise ValueError("alpha and beta logits cover different heads")
        al, bl = {}, {}
        for head in self.alpha_logit:
            a = np.array(self.alpha_logit[head], dtype=np.float64).reshape(-1)
            b = np.array(self.beta_logit[head], dtype=np.float64).reshape(-1)
            if a.shape != (len(judges),) or b.shape != (len(judges),):
                raise ValueError(f"head {head!r}: expected {len(judges)} logits per side")
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                raise ValueError(f"head {head!r}: non-finite reliability logits")
            a.setflags(write=False)
            b.setflags(write=False)
            al[head], bl[head] = a, b
        object.__setattr__(self, "judges", judges)
        object.__setattr__(self, "alpha_logit", al)
        object.__setattr__(self, "beta_logit", bl)

    @classmethod
    def uniform(cls, judges: Sequence[str], heads: Sequence[str], reliability: float = 0.5) -> "JudgePanel":
        if not 0.0 < reliability < 1.0:
            raise ValueError(f"initial reliability must lie in (0, 1), got {reliability}")
        logit = math.log(reliability) - math.log1p(-reliability)
        n = len(judges)
        return cls(
            tuple(judges),
            {h: np.full(n, logit) for h in heads},
            {h: np.full(n, logit) for h in heads},
        )

    @property
    def heads(self) -> tuple[str, ...]:
        return tuple(self.alpha_logit)

    def alpha(self, head: str) -> np.ndarray:
        return logistic(self._logits(self.alpha_logit, head))

    def beta(self, head: str) -> np.ndarray:
        return logistic(self._logits(self.beta_logit, head))

    def _logits(self, table, head):
        try:
            return table[head]
        except KeyError:
            raise KeyError(f"panel has no reliabilities for head {head!r}") from None

    def with_head(self, head: str, alpha_logit, beta_logit) -> "JudgePanel":
        al = dict(self.alpha_logit)
        bl = dict(self.beta_logit)
        al[head] = np.asarray(alpha_logit, dtype=np.float64)
        bl[head] = np.asarray(beta_logit, dtype=np.float64)
        return JudgePanel(self.judges, al, bl)


@dataclass(frozen=True)
class EvaluatorModel:
    embedding_dim: int
    heads: Mapping[str, QualityHead]
    panel: JudgePanel
    metadata: Mapping[str, object] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if OVERALL not in self.heads:
            raise ValueError(f"model must carry an {OVERALL!r} head")
        for name, head in self.heads.items():
            if name not in ALL_HEADS:
                raise ValueError(f"unknown head {name!r}; allowed: {', '.join(ALL_HEADS)}")
            if head.input_dim != self.embedding_dim:
                raise DimensionError(self.embedding_dim, head.input_dim, what=f"head {name!r} input")
        missing = set(self.heads) - set(self.panel.heads)
        if missing:
            raise ValueError(f"panel lacks reliabilities for heads {sorted(missing)}")
        object.__setattr__(self, "heads", dict(self.heads))

    def head(self, name: str) -> QualityHead:
        try:
            return self.heads[name]
        except KeyError:
            raise KeyError(f"model has no head {name!r}; available: {sorted(self.heads)}") from None

    def score(self, x: np.ndarray, head: str = OVERALL) -> np.ndarray:
        return self.head(head).forward(np.atleast_2d(x))


def quality_score(head: QualityHead, item: EmbeddedItem) -> float:
    if item.dim != head.input_dim:
        raise DimensionError(head.input_dim, item.dim)
    return float(head.forward(item.embedding[np.newaxis, :])[0])


def normal_cdf(z):
    """Standard normal CDF via erfc, accurate in both tails."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("normal_cdf requires finite input")
    out = 0.5 * erfc(-z / math.sqrt(2.0))
    return float(out) if out.ndim == 0 else out


def normal_pdf(z):
    z = np.asarray(z, dtype=np.float64)
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def clamp_probability(p):
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def preference_probability(head: QualityHead, a: EmbeddedItem, b: EmbeddedItem) -> float:
    """P(r = 1), i.e. the probability that ``b`` is the better dialogue.

    Unclamped; callers feeding a likelihood should pass the result through
    :func:`clamp_probability`.
    """
    diff = quality_score(head, b) - quality_score(head, a)
    return normal_cdf(diff / (math.sqrt(2.0) * head.sigma))


# ---------------------------------------------------------------------------
# model file


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"name too long for the model format: {s[:40]!r}...")
    return struct.pack("<H", len(raw)) + raw


def model_to_bytes(model: EvaluatorModel) -> bytes:
    head_names = list(model.heads)
    out = bytearray()
    out += MODEL_MAGIC
    out += struct.pack("<III", MODEL_VERSION, model.embedding_dim, len(head_names))
    for name in head_names:
        head = model.heads[name]
        out += _pack_str(name)
        out += struct.pack("<I", len(head.weights))
        for w, b in zip(head.weights, head.biases):
            out += struct.pack("<II", *w.shape)
            out += np.ascontiguousarray(w, dtype="<f8").tobytes()
            out += np.ascontiguousarray(b, dtype="<f8").tobytes()
        out += struct.pack("<d", head.sigma)
    panel = model.panel
    out += struct.pack("<I", len(panel.judges))
    for j, judge in enumerate(panel.judges):
        out += _pack_str(judge)
        for name in head_names:
            out += struct.pack("<dd", panel.alpha_logit[name][j], panel.beta_logit[name][j])
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelFormatError(f"truncated model file at byte {self.pos} (wanted {n} more)")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def model_from_bytes(buf: bytes) -> EvaluatorModel:
    if len(buf) < 8 or buf[:4] != MODEL_MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ModelFormatError("model file CRC mismatch")
    rd = _Reader(body)
    rd.take(4)
    version, dim, n_heads = rd.unpack("<III")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    heads = {}
    for _ in range(n_heads):
        name = rd.string()
        (n_layers,) = rd.unpack("<I")
        ws, bs = [], []
        for _ in range(n_layers):
            rows, cols = rd.unpack("<II")
            ws.append(rd.f64(rows * cols).reshape(rows, cols))
            bs.append(rd.f64(rows))
        (sigma,) = rd.unpack("<d")
        heads[name] = QualityHead(tuple(ws), tuple(bs), sigma)
    (n_judges,) = rd.unpack("<I")
    judges = []
    al = {h: np.zeros(n_judges) for h in heads}
    bl = {h: np.zeros(n_judges) for h in heads}
    for j in range(n_judges):
        judges.append(rd.string())
        for name in heads:
            al[name][j], bl[name][j] = rd.unpack("<dd")
    if rd.pos != len(body):
        raise ModelFormatError(f"{len(body) - rd.pos} trailing bytes before CRC")
    return EvaluatorModel(dim, heads, JudgePanel(tuple(judges), al, bl))


def save_model(model: EvaluatorModel, path: str | Path) -> None:
    from judgefuse._io import atomic_write_bytes

    atomic_write_bytes(Path(path), model_to_bytes(model))


def load_model(path: str | Path) -> EvaluatorModel:
    return model_from_bytes(Path(path).read_bytes())
