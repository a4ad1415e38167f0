"""Command line entry point: ``judgefuse {prepare,embed,train,eval,score,simulate}``.

Settings come from built-in defaults, then an optional ``--config`` JSON file,
then dotted flag overrides such as ``--train.epochs 5``.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import fields
from importlib import resources
from pathlib import Path

import numpy as np

from judgefuse import datapipe, metrics
from judgefuse._io import iter_jsonl, write_json, write_jsonl
from judgefuse.core import ALL_HEADS, OVERALL, JudgefuseError, load_model, save_model
from judgefuse.embed import EmbedEndpointConfig, EmbedError, EmbeddingFetcher
from judgefuse.synth import SynthSpec, generate, make_swaps
from judgefuse.training import TrainConfig, TrainingError, train

log = logging.getLogger("judgefuse")

EXIT_OK, EXIT_CONFIG, EXIT_NETWORK, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS: dict = {
    "seed": 0,
    "heads": [OVERALL],
    "train": {
        "lr_model": 5e-5,
        "lr_reliability": 1e-2,
        "adam_beta1": 0.9,
        "adam_beta2": 0.95,
        "weight_decay": 0.1,
        "warmup_fraction": 0.10,
        "epochs": 3,
        "batch_size": 32,
        "init_reliability": 0.5,
        "sigma": 1.0,
        "hidden": [256, 64],
    },
    "synth": {
        "n_items": 200,
        "dim": 8,
        "n_pairs": 200,
        "judges": [
            {"alpha": 0.9, "beta": 0.9, "fair_rate": 0.1},
            {"alpha": 0.8, "beta": 0.8, "fair_rate": 0.1},
            {"alpha": 0.7, "beta": 0.7, "fair_rate": 0.1},
        ],
        "quality_map": "linear",
        "sigma_true": 1.0,
        "swap_inconsistency": 0.0,
    },
    "endpoint": {
        "base_url": "http://127.0.0.1:8080",
        "model_name": "embedding-model",
        "api_key_env": "EMBED_API_KEY",
        "timeout_ms": 30000,
        "max_retries": 4,
        "max_in_flight": 4,
        "cache_dir": ".embed-cache",
        "batch_size": 16,
        "backoff_base_ms": 250.0,
    },
    "prepare": {"ratios": [0.4, 0.4, 0.2], "max_words": 10, "balance_head": OVERALL},
    "eval": {"tie_threshold": metrics.DEFAULT_TIE_THRESHOLD, "mode": "normalized"},
    "paths": {
        "labels": None,
        "swaps": None,
        "dialogues": None,
        "store": None,
        "model": None,
        "gold": None,
        "trace": None,
        "ids": None,
        "pairs": None,
        "spec": None,
    },
}


class ConfigError(JudgefuseError):
    pass


# ---------------------------------------------------------------------------
# config resolution


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted!r} must be an object")
            _merge(base[key], value, dotted + ".")
        else:
            base[key] = value


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(tokens: list[str]) -> dict:
    """``['--train.epochs', '5', '--eval.mode=raw-diff']`` -> nested dict."""
    out: dict = {}
    k = 0
    while k < len(tokens):
        tok = tokens[k]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, raw = tok[2:].split("=", 1)
            k += 1
        else:
            if k + 1 >= len(tokens):
                raise ConfigError(f"flag {tok} needs a value")
            key, raw = tok[2:], tokens[k + 1]
            k += 2
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _coerce(raw)
    return out


def resolve_config(config_path: str | None, overrides: dict, seed: int | None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        _merge(cfg, loaded)
    _merge(cfg, overrides)
    if seed is not None:
        cfg["seed"] = seed
    unknown_heads = set(cfg["heads"]) - set(ALL_HEADS)
    if unknown_heads or OVERALL not in cfg["heads"]:
        raise ConfigError(f"heads must include {OVERALL!r} and come from {list(ALL_HEADS)}")
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    kwargs = {k: v for k, v in cfg["train"].items() if k in known}
    try:
        return TrainConfig(seed=int(cfg["seed"]), head_selection=tuple(cfg["heads"]), **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train config: {exc}") from None


def _path(args, cfg, name: str, required: bool = True, must_exist: bool = True) -> Path | None:
    value = getattr(args, name, None) or cfg["paths"].get(name)
    if value is None:
        if required:
            raise ConfigError(f"missing required path --{name}")
        return None
    path = Path(value)
    if must_exist and not path.exists():
        raise ConfigError(f"{name} file not found: {path}")
    return path


def _out(args, default: str | None = None) -> Path:
    if args.out:
        return Path(args.out)
    if default:
        return Path(default)
    raise ConfigError("missing --out")


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, cfg) -> int:
    spec_path = _path(args, cfg, "spec", required=False)
    synth = dict(cfg["synth"])
    if spec_path is not None:
        with open(spec_path, encoding="utf-8") as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise ConfigError("spec file must hold a JSON object")
        unknown = set(loaded) - set(synth) - {"seed", "heads"}
        if unknown:
            raise ConfigError(f"unknown spec keys {sorted(unknown)}")
        synth.update(loaded)
    rate = float(synth.pop("swap_inconsistency", 0.0))
    synth.setdefault("seed", cfg["seed"])
    if args.seed is not None:
        synth["seed"] = args.seed
    synth.setdefault("heads", cfg["heads"])
    try:
        spec = SynthSpec.from_json(synth)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from None
    data = generate(spec)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    datapipe.write_labels(data.records, out / "labels.jsonl")
    datapipe.write_embedding_store(data.store, out / "embeddings.mtdv")
    swaps, corrupted = make_swaps(data.records, rate, spec.seed)
    datapipe.write_labels(swaps, out / "swaps.jsonl")
    write_jsonl(
        out / "gold_pairs.jsonl",
        (
            {
                "pair_id": r.pair_id,
                "item_a": r.item_a,
                "item_b": r.item_b,
                "gold": {h: ("B" if data.latent[h][r.pair_id] else "A") for h in spec.heads},
            }
            for r in data.records
        ),
    )
    write_jsonl(
        out / "gold_ratings.jsonl",
        ({"id": i, "score": data.quality[OVERALL][i]} for i in data.store.ids),
    )
    sidecar = data.sidecar()
    sidecar["swap_inconsistency"] = rate
    sidecar["corrupted_swaps"] = sorted(corrupted)
    sidecar["config"] = cfg
    write_json(out / "truth.json", sidecar)
    _say(args, f"wrote {len(data.records)} pairs over {len(data.store)} items to {out}")
    return EXIT_OK


def cmd_prepare(args, cfg) -> int:
    labels_path = _path(args, cfg, "labels")
    swaps_path = _path(args, cfg, "swaps", required=False, must_exist=False)
    dialogues_path = _path(args, cfg, "dialogues", required=False)
    if swaps_path is not None and not swaps_path.exists():
        raise ConfigError(f"swap stage requested but swap file is missing: {swaps_path}")
    stage = "load"
    try:
        records = datapipe.read_labels(labels_path)
        _say(args, f"loaded: {len(records)}")
        if swaps_path is not None:
            stage = "position-swap"
            swaps = datapipe.read_labels(swaps_path)
            kept = datapipe.position_swap_filter([*records, *swaps])
            _say(args, f"position-swap: kept {len(kept)} dropped {len(records) - len(kept)}")
            records = kept
        if dialogues_path is not None:
            stage = "length-diff"
            dialogues = {d.id: d for d in datapipe.read_dialogues(dialogues_path)}
            missing = sorted({i for r in records for i in (r.item_a, r.item_b)} - set(dialogues))
            if missing:
                raise datapipe.DatasetError(f"dialogues missing for items {missing[:10]}")
            pairs = [(dialogues[r.item_a], dialogues[r.item_b]) for r in records]
            idx = datapipe.length_diff_filter(pairs, int(cfg["prepare"]["max_words"]))
            _say(args, f"length-diff: kept {len(idx)} dropped {len(records) - len(idx)}")
            records = [records[k] for k in idx]
        stage = "balance"
        balanced = datapipe.balance_labels(
            records, cfg["prepare"]["balance_head"], tuple(cfg["prepare"]["ratios"]), int(cfg["seed"])
        )
        _say(args, f"balance: kept {len(balanced)} dropped {len(records) - len(balanced)}")
    except (JudgefuseError, ValueError) as exc:
        raise ConfigError(f"stage {stage}: {exc}") from None
    datapipe.write_labels(balanced, _out(args))
    return EXIT_OK


def cmd_embed(args, cfg) -> int:
    dialogues = datapipe.read_dialogues(_path(args, cfg, "dialogues"))
    try:
        endpoint = EmbedEndpointConfig(**cfg["endpoint"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad endpoint config: {exc}") from None
    fetcher = EmbeddingFetcher(endpoint)
    store = fetcher.fetch(dialogues)
    datapipe.write_embedding_store(store, _out(args))
    stats = fetcher.stats
    _say(args, f"network calls: {stats.network_calls}")
    _say(args, f"cache hit ratio: {stats.hit_ratio:.3f} ({stats.cache_hits}/{stats.requested})")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    try:
        records, store = datapipe.load_preference_dataset(_path(args, cfg, "labels"), _path(args, cfg, "store"))
    except JudgefuseError as exc:
        raise ConfigError(str(exc)) from None
    tcfg = train_config(cfg)
    if not records:
        raise ConfigError("no training records")
    model, trace = train(records, store, tcfg, tcfg.head_selection)
    out = _out(args)
    save_model(model, out)
    trace_path = Path(args.trace or cfg["paths"]["trace"] or f"{out}.trace.json")
    payload = trace.to_json()
    payload["config"] = cfg
    write_json(trace_path, payload)
    for w in trace.warnings:
        print(f"warning: {w}", file=sys.stderr)
    for head, rel in trace.reliabilities.items():
        _say(args, f"[{head}]")
        for judge, ab in rel.items():
            _say(args, f"  {judge}: alpha={ab['alpha']:.4f} beta={ab['beta']:.4f}")
    return EXIT_OK


def _read_gold_pairs(path: Path):
    rows = []
    for lineno, obj in iter_jsonl(path):
        if not {"item_a", "item_b", "gold"} <= set(obj):
            raise ConfigError(f"{path}:{lineno}: pairwise gold needs item_a, item_b and gold")
        gold = obj["gold"]
        if isinstance(gold, str):
            gold = {OVERALL: gold}
        try:
            gold = {h: metrics.PairDecision.parse(v) for h, v in gold.items()}
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
        rows.append((obj.get("pair_id", f"line{lineno}"), obj["item_a"], obj["item_b"], gold))
    return rows


def _pair_scores(model, store, head, rows):
    try:
        xa = store.vectors([r[1] for r in rows])
        xb = store.vectors([r[2] for r in rows])
    except KeyError as exc:
        raise ConfigError(f"unknown item id {exc.args[0]!r}") from None
    return model.score(xa, head), model.score(xb, head)


def evaluate(model, store, gold_path: Path, protocol: str, head: str, tie: float, mode: str) -> dict:
    if protocol == "rating":
        ids, golds = [], []
        for lineno, obj in iter_jsonl(gold_path):
            if not {"id", "score"} <= set(obj):
                raise ConfigError(f"{gold_path}:{lineno}: rating gold needs id and score")
            ids.append(obj["id"])
            golds.append(float(obj["score"]))
        try:
            scores = model.score(store.vectors(ids), head)
        except KeyError as exc:
            raise ConfigError(f"unknown item id {exc.args[0]!r}") from None
        return metrics.eval_report(
            single_rating={
                "pearson": metrics.pearson(scores, golds),
                "spearman": metrics.spearman(scores, golds),
                "n": len(ids),
                "head": head,
            }
        )
    if protocol not in ("pairwise", "dims"):
        raise ConfigError(f"unknown protocol {protocol!r}")
    rows = _read_gold_pairs(gold_path)
    if protocol == "pairwise":
        rows = [r for r in rows if head in r[3]]
        if not rows:
            raise ConfigError(f"no pairwise gold for head {head!r}")
        sa, sb = _pair_scores(model, store, head, rows)
        preds = [metrics.decide_pairwise(a, b, tie, mode) for a, b in zip(sa, sb)]
        golds = [r[3][head] for r in rows]
        return metrics.eval_report(
            pairwise={
                "with_tie": metrics.pairwise_accuracy(preds, golds, "with_tie"),
                "without_tie": metrics.pairwise_accuracy(preds, golds, "without_tie", list(zip(sa, sb))),
                "tie_threshold": tie,
                "mode": mode,
                "n": len(rows),
                "head": head,
            }
        )
    heads = sorted({h for r in rows for h in r[3]} & set(model.heads), key=ALL_HEADS.index)
    if not heads:
        raise ConfigError("dims gold shares no head with the model")
    preds, golds = {}, {}
    for h in heads:
        sub = [r for r in rows if h in r[3]]
        sa, sb = _pair_scores(model, store, h, sub)
        preds[h] = [metrics.decide_pairwise(a, b, tie, mode) for a, b in zip(sa, sb)]
        golds[h] = [r[3][h] for r in sub]
    return metrics.eval_report(dimensions=metrics.dimension_accuracy(preds, golds))


def cmd_eval(args, cfg) -> int:
    model = load_model(_path(args, cfg, "model"))
    store = datapipe.read_embedding_store(_path(args, cfg, "store"))
    report = evaluate(
        model,
        store,
        _path(args, cfg, "gold"),
        args.protocol,
        args.head,
        float(cfg["eval"]["tie_threshold"]),
        cfg["eval"]["mode"],
    )
    report["reliabilities"] = metrics.reliability_report(model)
    report["config"] = cfg
    out = _out(args)
    write_json(out, report)
    _say(args, json.dumps({k: v for k, v in report.items() if k != "config"}, indent=2))
    return EXIT_OK


def cmd_score(args, cfg) -> int:
    model = load_model(_path(args, cfg, "model"))
    store = datapipe.read_embedding_store(_path(args, cfg, "store"))
    head = args.head
    model.head(head)
    tie = float(cfg["eval"]["tie_threshold"])
    mode = cfg["eval"]["mode"]
    ids_path = _path(args, cfg, "ids", required=False)
    pairs_path = _path(args, cfg, "pairs", required=False)
    if (ids_path is None) == (pairs_path is None):
        raise ConfigError("give exactly one of --ids or --pairs")

    def vec(item_id):
        if item_id not in store:
            raise ConfigError(f"unknown item id {item_id!r}")
        return store.vector(item_id)

    rows = []
    if ids_path is not None:
        ids = []
        for line in ids_path.read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if line:
                ids.append(json.loads(line)["id"] if line.startswith("{") else line)
        if ids:
            raw = model.score(np.stack([vec(i) for i in ids]), head)
            for item_id, s in zip(ids, raw):
                rows.append({"id": item_id, "raw": float(s), "normalized": metrics.normalize_score(float(s))})
    else:
        pairs = [obj for _, obj in iter_jsonl(pairs_path)]
        if pairs:
            sa = model.score(np.stack([vec(p["item_a"]) for p in pairs]), head)
            sb = model.score(np.stack([vec(p["item_b"]) for p in pairs]), head)
            for k, (p, a, b) in enumerate(zip(pairs, sa, sb)):
                rows.append(
                    {
                        "pair_id": p.get("pair_id", f"pair{k}"),
                        "decision": metrics.decide_pairwise(float(a), float(b), tie, mode).value,
                        "score_a": float(a),
                        "score_b": float(b),
                    }
                )
    if args.out:
        write_jsonl(Path(args.out), rows)
    else:
        for row in rows:
            print(json.dumps(row))
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out", help="output path")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    parser = argparse.ArgumentParser(prog="judgefuse", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset with ground truth")
    p.add_argument("--spec", help="synthetic spec JSON (otherwise the synth config section)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("prepare", parents=[common], help="swap-consistency, length and balance filters")
    p.add_argument("--labels")
    p.add_argument("--swaps")
    p.add_argument("--dialogues")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("embed", parents=[common], help="fetch embeddings for dialogues")
    p.add_argument("--dialogues")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", parents=[common], help="fit quality heads and judge reliabilities")
    p.add_argument("--labels")
    p.add_argument("--store")
    p.add_argument("--trace")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="rating / pairwise / per-dimension evaluation")
    p.add_argument("--model")
    p.add_argument("--store")
    p.add_argument("--gold")
    p.add_argument("--protocol", choices=["rating", "pairwise", "dims"], default="pairwise")
    p.add_argument("--head", default=OVERALL)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", parents=[common], help="score items or decide pairs")
    p.add_argument("--model")
    p.add_argument("--store")
    p.add_argument("--ids")
    p.add_argument("--pairs")
    p.add_argument("--head", default=OVERALL)
    p.set_defaults(func=cmd_score)
    return parser


def bundled_spec_path() -> Path:
    return Path(str(resources.files("judgefuse") / "data" / "tiny_spec.json"))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        cfg = resolve_config(args.config, parse_overrides(rest), args.seed)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EmbedError as exc:
        print(f"network error: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except TrainingError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BrokenPipeError:
        # downstream reader (e.g. head) went away; not our failure
        sys.stderr.close()
        return EXIT_OK
    except (datapipe.DatasetError, datapipe.StoreError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
