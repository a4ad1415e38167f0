"""AdamW training of quality heads and judge reliabilities."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from judgefuse.core import (
    DEFAULT_HIDDEN,
    OVERALL,
    EvaluatorModel,
    JudgefuseError,
    JudgePanel,
    PreferenceRecord,
    QualityHead,
)
from judgefuse.likelihood import encode_records, nll_and_grad, reliability_values

logger = logging.getLogger(__name__)


class TrainingError(JudgefuseError, ArithmeticError):
    def __init__(self, step: int, head: str, pair_ids: Sequence[str], detail: str = "non-finite loss"):
        shown = ", ".join(pair_ids[:10]) + (" ..." if len(pair_ids) > 10 else "")
        super().__init__(f"{detail} at step {step} (head {head!r}); records: {shown}")
        self.step = step
        self.head = head
        self.pair_ids = list(pair_ids)


@dataclass(frozen=True)
class TrainConfig:
    lr_model: float = 5e-5
    lr_reliability: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    warmup_fraction: float = 0.10
    epochs: int = 3
    batch_size: int = 32
    seed: int = 0
    init_reliability: float = 0.5
    sigma: float = 1.0
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    head_selection: tuple[str, ...] = (OVERALL,)

    def __post_init__(self):
        if not (self.lr_model > 0 and self.lr_reliability > 0):
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 < self.init_reliability < 1:
            raise ValueError("init_reliability must lie in (0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "head_selection", tuple(self.head_selection))

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def lr_multiplier(step: int, total_steps: int, warmup_fraction: float) -> float:
    """Linear warmup over the first ``warmup_fraction`` of steps, then cosine to zero.

    ``step`` is 0-based; the multiplier reaches 1 on the last warmup step.
    """
    warmup = int(math.floor(warmup_fraction * total_steps))
    if step < warmup:
        return (step + 1) / warmup
    decay_steps = total_steps - warmup
    progress = (step - warmup) / decay_steps if decay_steps > 0 else 1.0
    return 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled weight decay Adam over a list of arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr_scale: float = 1.0) -> None:
        self.t += 1
        lr = self.lr * lr_scale
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainTrace:
    epoch_nll: list[float] = field(default_factory=list)
    head_epoch_nll: dict[str, list[float]] = field(default_factory=dict)
    lr_schedule: list[float] = field(default_factory=list)
    reliabilities: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)
    seed: int = 0
    wall_seconds: float = 0.0
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "epochs": [
                {"mean_nll": v, "heads": {h: s[k] for h, s in self.head_epoch_nll.items()}}
                for k, v in enumerate(self.epoch_nll)
            ],
            "reliabilities": self.reliabilities,
            "lr_schedule": self.lr_schedule,
            "seed": self.seed,
            "wall_seconds": self.wall_seconds,
            "warnings": self.warnings,
        }


def _child_rng(seed: int, label: str) -> np.random.Generator:
    key = int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "little")
    return np.random.default_rng([seed, key])


def init_model(
    embedding_dim: int, judges: Sequence[str], config: TrainConfig, head_names: Sequence[str]
) -> EvaluatorModel:
    heads = {}
    for name in head_names:
        dims = [embedding_dim, *config.hidden, 1]
        heads[name] = QualityHead.init(dims, _child_rng(config.seed, f"init/{name}"), config.sigma)
    panel = JudgePanel.uniform(judges, list(head_names), config.init_reliability)
    return EvaluatorModel(
        embedding_dim,
        heads,
        panel,
        metadata={"config_digest": config.digest(), "seed": config.seed, "created": time.time()},
    )


def _judges_of(records: Sequence[PreferenceRecord]) -> list[str]:
    seen = {}
    for rec in records:
        for j in rec.labels:
            seen.setdefault(j, None)
    return list(seen)


def train(
    records: Sequence[PreferenceRecord],
    items,
    config: TrainConfig,
    head_names: Sequence[str] | None = None,
    judges: Sequence[str] | None = None,
    init: EvaluatorModel | None = None,
) -> tuple[EvaluatorModel, TrainTrace]:
    """Fit every selected head, each on its own labels, by minibatch AdamW.

    Both learning rates follow the same warmup+cosine multiplier; weight
    decay is applied to head parameters only.  Records with no informative
    label for a head add nothing to that head's loss.
    """
    if not records:
        raise ValueError("train() needs at least one record")
    head_names = list(head_names or config.head_selection)
    if OVERALL not in head_names:
        raise ValueError(f"the {OVERALL!r} head must be trained")
    judges = list(judges) if judges is not None else _judges_of(records)
    started = time.perf_counter()

    if init is None:
        first = next(iter(records))
        dim = len(_first_vector(items, first.item_a))
        model = init_model(dim, judges, config, head_names)
    else:
        model = init
        judges = list(model.panel.judges)

    trace = TrainTrace(seed=config.seed)
    n = len(records)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    trace.lr_schedule = [lr_multiplier(s, total_steps, config.warmup_fraction) for s in range(total_steps)]

    heads = dict(model.heads)
    panel = model.panel
    for name in head_names:
        full = encode_records(records, items, judges, name)
        if not full.mask.any():
            msg = f"head {name!r}: every label is Fair; parameters left at initialisation"
            logger.warning(msg)
            trace.warnings.append(msg)
            trace.head_epoch_nll[name] = [0.0] * config.epochs
            continue
        head = heads[name]
        weights = [w.copy() for w in head.weights]
        biases = [b.copy() for b in head.biases]
        al = panel.alpha_logit[name].copy()
        bl = panel.beta_logit[name].copy()
        betas = (config.adam_beta1, config.adam_beta2)
        opt_model = AdamW(weights + biases, config.lr_model, betas, config.adam_eps, config.weight_decay)
        opt_rel = AdamW([al, bl], config.lr_reliability, betas, config.adam_eps, 0.0)
        rng = _child_rng(config.seed, f"shuffle/{name}")
        epoch_means = []
        step = 0
        for _ in range(config.epochs):
            order = rng.permutation(n)
            epoch_total = 0.0
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                batch = full.subset(idx)
                try:
                    nll, _, (gw, gb, ga, gbeta) = nll_and_grad(weights, biases, head.sigma, al, bl, batch)
                except (ValueError, FloatingPointError) as exc:
                    raise TrainingError(step, name, batch.pair_ids, detail=str(exc)) from exc
                if not math.isfinite(nll) or not all(np.all(np.isfinite(g)) for g in (*gw, *gb, ga, gbeta)):
                    raise TrainingError(step, name, batch.pair_ids)
                epoch_total += nll
                scale = trace.lr_schedule[step]
                opt_model.step([*gw, *gb], scale)
                opt_rel.step([ga, gbeta], scale)
                step += 1
            epoch_means.append(epoch_total / n)
        heads[name] = QualityHead(tuple(weights), tuple(biases), head.sigma)
        panel = panel.with_head(name, al, bl)
        trace.head_epoch_nll[name] = epoch_means

    trace.epoch_nll = [
        float(np.mean([trace.head_epoch_nll[h][e] for h in head_names])) for e in range(config.epochs)
    ]
    model = EvaluatorModel(
        model.embedding_dim,
        heads,
        panel,
        metadata={"config_digest": config.digest(), "seed": config.seed, "created": time.time()},
    )
    for name in head_names:
        trace.reliabilities[name] = {
            j: {"alpha": a, "beta": b} for j, (a, b) in reliability_values(panel, name).items()
        }
    trace.wall_seconds = time.perf_counter() - started
    return model, trace


def _first_vector(items, item_id):
    if hasattr(items, "vector"):
        return items.vector(item_id)
    v = items[item_id]
    return getattr(v, "embedding", v)
