"""Dataset plumbing: dialogue and label files, annotation parsing, construction filters
and the binary embedding store."""
from __future__ import annotations

import json
import re
import struct
import zlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from judgefuse._io import atomic_write_bytes, iter_jsonl, write_jsonl
from judgefuse.core import ALL_HEADS, OVERALL, JudgefuseError, JudgeLabel, PreferenceRecord

STORE_MAGIC = b"MTDV"
STORE_VERSION = 1
SWAP_SUFFIX = "/swap"


# ---------------------------------------------------------------------------
# dialogues


@dataclass(frozen=True)
class DialogueRecord:
    id: str
    turns: tuple[tuple[str, str], ...]

    def __post_init__(self):
        turns = tuple((str(s), str(t)) for s, t in self.turns)
        for k, (speaker, _) in enumerate(turns):
            expected = "Human" if k % 2 == 0 else "Assistant"
            if speaker != expected:
                raise ValueError(f"dialogue {self.id!r}: turn {k} is {speaker!r}, expected {expected!r}")
        human = sum(1 for s, _ in turns if s == "Human")
        if not 2 <= human <= 10:
            raise ValueError(f"dialogue {self.id!r}: {human} human turns, need 2 to 10")
        object.__setattr__(self, "turns", turns)

    def assistant_text(self) -> list[str]:
        return [t for s, t in self.turns if s == "Assistant"]

    def to_json(self) -> dict:
        return {"id": self.id, "turns": [{"speaker": s, "text": t} for s, t in self.turns]}

    @classmethod
    def from_json(cls, obj: Mapping) -> "DialogueRecord":
        return cls(str(obj["id"]), tuple((t["speaker"], t["text"]) for t in obj["turns"]))


def read_dialogues(path: str | Path) -> list[DialogueRecord]:
    out = []
    for lineno, obj in iter_jsonl(Path(path)):
        try:
            out.append(DialogueRecord.from_json(obj))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: bad dialogue ({exc})") from None
    return out


def word_count(dialogue: DialogueRecord) -> int:
    return sum(len(text.split()) for text in dialogue.assistant_text())


# ---------------------------------------------------------------------------
# embedding store


class StoreError(JudgefuseError):
    pass


class BadMagicError(StoreError):
    pass


class ChecksumError(StoreError):
    pass


class TruncatedError(StoreError):
    pass


class EmbeddingStore:
    """Immutable id -> f32 vector table."""

    def __init__(self, ids: Sequence[str], matrix: np.ndarray, dim: int | None = None):
        matrix = np.asarray(matrix, dtype=np.float32)
        if matrix.ndim != 2:
            if matrix.size == 0 and dim is not None:
                matrix = matrix.reshape(0, dim)
            else:
                raise ValueError("embedding matrix must be 2-D")
        if dim is not None and matrix.shape[1] != dim:
            raise ValueError(f"matrix has {matrix.shape[1]} columns, dim is {dim}")
        if len(ids) != matrix.shape[0]:
            raise ValueError(f"{len(ids)} ids for {matrix.shape[0]} rows")
        if not np.all(np.isfinite(matrix)):
            raise ValueError("embedding store contains non-finite values")
        self.ids = tuple(str(i) for i in ids)
        self.index = {item_id: k for k, item_id in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            dupes = [i for i, c in Counter(self.ids).items() if c > 1]
            raise ValueError(f"duplicate ids in embedding store: {dupes[:5]}")
        self.matrix = matrix.copy()
        self.matrix.setflags(write=False)
        self.dim = int(matrix.shape[1]) if dim is None else int(dim)

    @classmethod
    def from_mapping(cls, vectors: Mapping[str, Sequence[float]], dim: int | None = None) -> "EmbeddingStore":
        ids = list(vectors)
        if not ids:
            return cls([], np.zeros((0, dim or 0), dtype=np.float32), dim or 0)
        return cls(ids, np.stack([np.asarray(vectors[i], dtype=np.float32) for i in ids]), dim)

    def __len__(self):
        return len(self.ids)

    def __contains__(self, item_id):
        return item_id in self.index

    def vector(self, item_id: str) -> np.ndarray:
        return self.matrix[self.index[item_id]].astype(np.float64)

    def vectors(self, item_ids: Iterable[str]) -> np.ndarray:
        rows = [self.index[i] for i in item_ids]
        return self.matrix[rows].astype(np.float64).reshape(len(rows), self.dim)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.ids == other.ids
            and self.matrix.tobytes() == other.matrix.tobytes()
        )

    def __repr__(self):
        return f"EmbeddingStore(rows={len(self)}, dim={self.dim})"

    def to_bytes(self) -> bytes:
        out = bytearray(STORE_MAGIC)
        out += struct.pack("<IIQ", STORE_VERSION, self.dim, len(self.ids))
        out += np.ascontiguousarray(self.matrix, dtype="<f4").tobytes()
        for item_id in self.ids:
            raw = item_id.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise StoreError(f"id too long for the store format: {item_id[:40]!r}...")
            out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
        return bytes(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "EmbeddingStore":
        if len(buf) < 4 or buf[:4] != STORE_MAGIC:
            raise BadMagicError("not an embedding store (bad magic)")
        header = 4 + 16
        if len(buf) < header + 4:
            raise TruncatedError(f"store truncated: {len(buf)} bytes")
        version, dim, rows = struct.unpack_from("<IIQ", buf, 4)
        if version != STORE_VERSION:
            raise StoreError(f"unsupported store version {version}")
        payload_end = header + 4 * dim * rows
        if len(buf) < payload_end + 4:
            raise TruncatedError(f"store truncated: need at least {payload_end + 4} bytes, have {len(buf)}")
        (crc,) = struct.unpack("<I", buf[-4:])
        if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
            raise ChecksumError("embedding store CRC mismatch")
        matrix = np.frombuffer(buf, dtype="<f4", count=dim * rows, offset=header).reshape(rows, dim)
        pos = payload_end
        end = len(buf) - 4
        ids = []
        for _ in range(rows):
            if pos + 2 > end:
                raise TruncatedError("store id table truncated")
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            if pos + n > end:
                raise TruncatedError("store id table truncated")
            ids.append(buf[pos : pos + n].decode("utf-8"))
            pos += n
        if pos != end:
            raise StoreError(f"{end - pos} unexpected bytes after the id table")
        return cls(ids, matrix.astype(np.float32), dim)


def write_embedding_store(store: EmbeddingStore, path: str | Path) -> None:
    atomic_write_bytes(Path(path), store.to_bytes())


def read_embedding_store(path: str | Path) -> EmbeddingStore:
    return EmbeddingStore.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# labels


class DatasetError(JudgefuseError, ValueError):
    pass


def read_labels(path: str | Path, heads: Sequence[str] = ALL_HEADS) -> list[PreferenceRecord]:
    records = []
    seen = set()
    allowed = set(heads)
    for lineno, obj in iter_jsonl(Path(path)):
        where = f"{path}:{lineno}"
        if not isinstance(obj, dict):
            raise DatasetError(f"{where}: expected a JSON object")
        missing = {"pair_id", "item_a", "item_b", "labels"} - set(obj)
        if missing:
            raise DatasetError(f"{where}: missing fields {sorted(missing)}")
        if not isinstance(obj["labels"], dict) or not all(isinstance(v, dict) for v in obj["labels"].values()):
            raise DatasetError(f"{where}: labels must map judge -> head -> label")
        for judge, judge_labels in obj["labels"].items():
            if OVERALL not in judge_labels:
                raise DatasetError(f"{where}: judge {judge!r} has no {OVERALL!r} label")
            unknown = set(judge_labels) - allowed
            if unknown:
                raise DatasetError(f"{where}: judge {judge!r} labels unknown heads {sorted(unknown)}")
        try:
            rec = PreferenceRecord.from_json(obj)
        except ValueError as exc:
            raise DatasetError(f"{where}: {exc}") from None
        if rec.pair_id in seen:
            raise DatasetError(f"{where}: duplicate pair_id {rec.pair_id!r}")
        seen.add(rec.pair_id)
        records.append(rec)
    return records


def write_labels(records: Iterable[PreferenceRecord], path: str | Path) -> None:
    write_jsonl(Path(path), (r.to_json() for r in records))


def load_preference_dataset(
    labels_path: str | Path, embeddings_path: str | Path, dim: int | None = None
) -> tuple[list[PreferenceRecord], EmbeddingStore]:
    store = read_embedding_store(embeddings_path)
    if dim is not None and store.dim != dim:
        raise DatasetError(f"{embeddings_path}: store dim {store.dim}, expected {dim}")
    records = read_labels(labels_path)
    for k, rec in enumerate(records):
        for item_id in (rec.item_a, rec.item_b):
            if item_id not in store:
                raise DatasetError(
                    f"{labels_path}: record {k + 1} ({rec.pair_id!r}) references item {item_id!r} "
                    f"with no row in {embeddings_path}"
                )
    return records, store


# ---------------------------------------------------------------------------
# annotation sheets


class AnnotationParseError(JudgefuseError, ValueError):
    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.offset = offset


AnnotationSheet = dict  # head name -> JudgeLabel, exactly one entry per configured head


def render_annotation(sheet: Mapping[str, JudgeLabel], heads: Sequence[str] = ALL_HEADS) -> str:
    """The canonical one-object-per-line form."""
    return "\n".join(json.dumps({h: JudgeLabel.parse(sheet[h]).value}) for h in heads)


_JSON_PAIR = re.compile(r'\{\s*"([A-Za-z]+)"\s*:\s*"([^"]*)"\s*\}')
_BARE_PAIR = re.compile(r'"?\b([A-Z][a-z]+)\b"?\s*:\s*"?\b(A|B|Fair)\b"?')


def _label_at(value: str, head: str, line=None, offset=None) -> JudgeLabel:
    try:
        return JudgeLabel(value)
    except ValueError:
        raise AnnotationParseError(f"illegal value {value!r} for {head!r}", line, offset) from None


def parse_annotation(text: str, mode: str = "strict", heads: Sequence[str] = ALL_HEADS) -> AnnotationSheet:
    """Parse one judge's per-dimension verdicts.

    ``strict`` wants exactly one single-key JSON object per non-blank line
    and nothing else.  ``lenient`` picks the objects out of surrounding prose
    (first occurrence per key wins) and, failing that, also accepts a
    ``Name: Value`` list such as ``{Accuracy: Fair, Logicality: B, ...}``.
    """
    if not text or not text.strip():
        raise AnnotationParseError("empty annotation")
    if mode == "strict":
        return _parse_strict(text, heads)
    if mode == "lenient":
        return _parse_lenient(text, heads)
    raise ValueError(f"unknown parse mode {mode!r}")


def _parse_strict(text, heads):
    wanted = set(heads)
    sheet: dict[str, JudgeLabel] = {}
    lines = [(k, ln.strip()) for k, ln in enumerate(text.splitlines(), 1) if ln.strip()]
    for lineno, line in lines:
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            raise AnnotationParseError("line is not a JSON object", lineno) from None
        if not isinstance(obj, dict) or len(obj) != 1:
            raise AnnotationParseError("expected a single-key JSON object", lineno)
        ((head, value),) = obj.items()
        if head not in wanted:
            raise AnnotationParseError(f"unknown dimension {head!r}", lineno)
        if not isinstance(value, str):
            raise AnnotationParseError(f"illegal value {value!r} for {head!r}", lineno)
        label = _label_at(value, head, lineno)
        if head in sheet:
            if sheet[head] is not label:
                raise AnnotationParseError(f"conflicting duplicate for {head!r}", lineno)
            raise AnnotationParseError(f"duplicate dimension {head!r}", lineno)
        sheet[head] = label
    if len(lines) != len(heads) or set(sheet) != wanted:
        missing = [h for h in heads if h not in sheet]
        raise AnnotationParseError(f"expected {len(heads)} lines, missing {missing}")
    return {h: sheet[h] for h in heads}


def _parse_lenient(text, heads):
    wanted = set(heads)
    sheet: dict[str, JudgeLabel] = {}
    for pattern in (_JSON_PAIR, _BARE_PAIR):
        for m in pattern.finditer(text):
            head, value = m.group(1), m.group(2)
            if head in wanted and head not in sheet:
                sheet[head] = _label_at(value, head, offset=m.start(2))
        if len(sheet) == len(wanted):
            break
    missing = [h for h in heads if h not in sheet]
    if missing:
        raise AnnotationParseError(f"missing dimensions {missing}")
    return {h: sheet[h] for h in heads}


# ---------------------------------------------------------------------------
# construction filters


class OrphanPairError(DatasetError):
    def __init__(self, orphans: Sequence[str]):
        super().__init__(f"pairs without a swapped counterpart: {', '.join(orphans[:20])}")
        self.orphans = list(orphans)


def _is_consistent(original: PreferenceRecord, swapped: PreferenceRecord) -> bool:
    if set(original.labels) != set(swapped.labels):
        return False
    for judge, heads in original.labels.items():
        other = swapped.labels[judge]
        if set(heads) != set(other):
            return False
        for head, label in heads.items():
            if other[head] is not label.mirror():
                return False
    return True


def position_swap_filter(records: Iterable[PreferenceRecord]) -> list[PreferenceRecord]:
    """Keep originals whose swapped-order labels mirror theirs for every judge and head.

    ``records`` mixes originals and their counterparts, linked by
    ``pair_id`` and ``pair_id + "/swap"``.  Output follows the order in
    which originals appear.
    """
    originals: dict[str, PreferenceRecord] = {}
    swaps: dict[str, PreferenceRecord] = {}
    for rec in records:
        if rec.pair_id.endswith(SWAP_SUFFIX):
            swaps[rec.pair_id[: -len(SWAP_SUFFIX)]] = rec
        else:
            originals[rec.pair_id] = rec
    orphans = sorted(set(originals) ^ set(swaps))
    if orphans:
        raise OrphanPairError(orphans)
    return [rec for pid, rec in originals.items() if _is_consistent(rec, swaps[pid])]


def majority_label(record: PreferenceRecord, head: str) -> JudgeLabel:
    """Most common judge label for ``head``; ties resolve to Fair."""
    counts = Counter(heads[head] for heads in record.labels.values() if head in heads)
    if not counts:
        return JudgeLabel.FAIR
    ranked = counts.most_common()
    if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
        return JudgeLabel.FAIR
    return ranked[0][0]


def balance_labels(
    records: Sequence[PreferenceRecord],
    head: str = OVERALL,
    ratios: tuple[float, float, float] = (0.40, 0.40, 0.20),
    seed: int = 0,
) -> list[PreferenceRecord]:
    """Largest subset whose majority-label mix (A, B, Fair) follows ``ratios``.

    Within a class, records are sampled uniformly with a seeded generator;
    the output keeps the input order.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be three non-negative numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    classes = (JudgeLabel.WIN_A, JudgeLabel.WIN_B, JudgeLabel.FAIR)
    members = {c: [] for c in classes}
    for k, rec in enumerate(records):
        members[majority_label(rec, head)].append(k)
    # total size is limited by the scarcest class relative to its share
    limit = min(
        int(np.floor(len(members[c]) / r + 1e-9)) for c, r in zip(classes, ratios) if r > 0
    )
    # prefer a total whose class shares are whole numbers, so that balancing
    # the output again returns it unchanged
    period = next(
        (t for t in range(1, 10_001) if all(abs(t * r - round(t * r)) < 1e-9 for r in ratios)), None
    )
    total = limit if period is None else limit // period * period
    rng = np.random.default_rng(seed)
    chosen = []
    for c, r in zip(classes, ratios):
        take = min(len(members[c]), int(round(total * r)))
        if take == len(members[c]):
            chosen.extend(members[c])
        elif take:
            chosen.extend(rng.choice(members[c], size=take, replace=False).tolist())
    return [records[k] for k in sorted(chosen)]


def length_diff_filter(
    pairs: Iterable[tuple[DialogueRecord | str, DialogueRecord | str]], max_words: int = 10
) -> list[int]:
    """Indices of pairs whose assistant word counts differ by at most ``max_words``.

    Plain strings count as a single assistant response.
    """
    kept = []
    for k, (a, b) in enumerate(pairs):
        if abs(_words(a) - _words(b)) <= max_words:
            kept.append(k)
    return kept


def _words(x) -> int:
    if isinstance(x, DialogueRecord):
        return word_count(x)
    return len(str(x).split())
