"""Readers and writers for corpora, judgments, templates and score files.

Formats
-------
Parallel corpus, TSV: ``source<TAB>target`` per line.
Parallel corpus, JSONL: ``{"src": ..., "tgt": ...}`` per line (optional ``"id"``).
Judgments, JSONL: ``{"id", "lang", "dimension", "document", "summary",
"human_scores": [...], "corrupted": bool, "paired_original_id"?: str,
"reference"?: str}``.
Template, JSON: ``{"dimension", "language", "body", "score_tokens"}`` where
``score_tokens`` lists the five rating strings ("1".."5") or token ids.
Scores, JSONL: one :class:`~pivotsteer.metrics.ScoreRecord` per line.

All files are read as UTF-8 (a leading BOM is dropped, CRLF tolerated) and
written as UTF-8 with LF line endings.
"""

from __future__ import annotations

import json
import logging
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from pivotsteer.meta_eval import JudgmentItem
from pivotsteer.metrics import DIMENSIONS, PromptTemplate, ScoreRecord
from pivotsteer.steering import atomic_write_text

log = logging.getLogger(__name__)

DEFAULT_PAIRS = 500

# samples with human judgments per language in the source evaluation suite
PUBLISHED_DATASET_COUNTS = {
    ("ja", "coherence"): 33, ("ja", "completeness"): 40,
    ("ar", "coherence"): 156, ("ar", "completeness"): 128,
    ("he", "coherence"): 104, ("he", "completeness"): 104,
    ("tr", "coherence"): 187, ("tr", "completeness"): 163,
    ("zh", "coherence"): 152, ("zh", "completeness"): 161,
    ("yo", "coherence"): 131, ("yo", "completeness"): 117,
    ("es", "coherence"): 128, ("es", "completeness"): 141,
    ("ukr", "coherence"): 151, ("ukr", "completeness"): 151,
}


class FormatError(ValueError):
    pass


class ShortCorpusWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ParallelPair:
    source_text: str
    target_text: str
    pair_id: str


def _lines(path: str | Path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8-sig")
    return text.replace("\r\n", "\n").split("\n")


def load_parallel(
    path: str | Path, source_lang: str = "", target_lang: str = "", limit: int = DEFAULT_PAIRS
) -> list[ParallelPair]:
    """First ``limit`` pairs in file order.

    The format follows the extension (``.jsonl`` / ``.json`` for JSONL,
    anything else TSV).  Blank lines are skipped.  A short file is not an
    error; it raises :class:`ShortCorpusWarning` so callers can record it.
    """
    if limit < 1:
        raise ValueError("limit must be >= 1")
    jsonl = Path(path).suffix.lower() in (".jsonl", ".json")
    pairs: list[ParallelPair] = []
    for lineno, line in enumerate(_lines(path), start=1):
        if len(pairs) >= limit:
            break
        if not line.strip():
            continue
        if jsonl:
            try:
                obj = json.loads(line)
                src, tgt = obj["src"], obj["tgt"]
                pid = str(obj.get("id", lineno))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}: line {lineno}: malformed JSONL pair ({exc})") from exc
        else:
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(
                    f"{path}: line {lineno}: expected 'source<TAB>target', "
                    f"found {len(parts) - 1} tabs"
                )
            src, tgt = parts
            pid = str(lineno)
        if not isinstance(src, str) or not isinstance(tgt, str) or not src.strip() or not tgt.strip():
            raise FormatError(f"{path}: line {lineno}: empty source or target text")
        pairs.append(ParallelPair(src, tgt, pid))
    if len(pairs) < limit:
        warnings.warn(
            f"{path} ({source_lang}->{target_lang}) has {len(pairs)} pairs, fewer than {limit}",
            ShortCorpusWarning,
            stacklevel=2,
        )
    return pairs


_REQUIRED = ("id", "lang", "dimension", "document", "summary", "human_scores", "corrupted")


def parse_judgment(obj: dict, where: str = "") -> JudgmentItem:
    item_id = obj.get("id", "?") if isinstance(obj, dict) else "?"
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: judgment must be a JSON object")
    for key in _REQUIRED:
        if key not in obj:
            raise FormatError(f"{where}: item {item_id}: missing field {key!r}")
    if obj["dimension"] not in DIMENSIONS:
        raise FormatError(f"{where}: item {item_id}: field 'dimension' must be one of {DIMENSIONS}")
    scores = obj["human_scores"]
    if not isinstance(scores, list) or not scores or not all(
        isinstance(s, (int, float)) and not isinstance(s, bool) for s in scores
    ):
        raise FormatError(f"{where}: item {item_id}: field 'human_scores' must be a non-empty number list")
    bad = [s for s in scores if not 1 <= s <= 4]
    if bad:
        raise FormatError(f"{where}: item {item_id}: field 'human_scores' has {bad} outside the 1-4 scale")
    if not isinstance(obj["corrupted"], bool):
        raise FormatError(f"{where}: item {item_id}: field 'corrupted' must be a boolean")
    for key in ("document", "summary"):
        if not isinstance(obj[key], str):
            raise FormatError(f"{where}: item {item_id}: field {key!r} must be a string")
    paired = obj.get("paired_original_id")
    return JudgmentItem(
        item_id=str(obj["id"]),
        language=str(obj["lang"]),
        dimension=obj["dimension"],
        document=obj["document"],
        summary=obj["summary"],
        human_scores=[float(s) for s in scores],
        corrupted=obj["corrupted"],
        paired_original_id=None if paired is None else str(paired),
        reference=obj.get("reference"),
    )


def load_judgments(path: str | Path) -> list[JudgmentItem]:
    items = []
    for lineno, line in enumerate(_lines(path), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: line {lineno}: invalid JSON ({exc})") from exc
        items.append(parse_judgment(obj, f"{path}: line {lineno}"))
    ids = Counter(it.item_id for it in items)
    dup = [i for i, c in ids.items() if c > 1]
    if dup:
        raise FormatError(f"{path}: duplicate item ids {dup[:5]}")
    for it in items:
        if it.corrupted and it.paired_original_id is not None and it.paired_original_id not in ids:
            it.pairing_resolved = False
            log.warning("item %s: paired original %s not found", it.item_id, it.paired_original_id)
    return items


def dataset_stats(items: Iterable[JudgmentItem]) -> dict[tuple[str, str], int]:
    counts = Counter((it.language, it.dimension) for it in items)
    return dict(sorted(counts.items()))


def load_template(path: str | Path) -> PromptTemplate:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8-sig"))
        tokens = raw.get("score_tokens", ["1", "2", "3", "4", "5"])
        ids = []
        for t in tokens:
            if isinstance(t, str):
                b = t.encode("utf-8")
                if len(b) != 1:
                    raise FormatError(f"{path}: score token {t!r} is not a single byte")
                ids.append(b[0])
            else:
                ids.append(int(t))
        return PromptTemplate(raw["dimension"], raw["language"], raw["body"], tuple(ids))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed template ({exc})") from exc


def save_template(template: PromptTemplate, path: str | Path) -> None:
    payload = {
        "dimension": template.dimension,
        "language": template.language,
        "body": template.body,
        "score_tokens": list(template.score_token_ids),
    }
    atomic_write_text(path, json.dumps(payload, ensure_ascii=False, indent=2) + "\n")


def dumps_scores(records: Sequence[ScoreRecord]) -> str:
    # json.dumps writes floats with repr(), which round-trips exactly
    return "".join(json.dumps(r.to_json(), sort_keys=True, ensure_ascii=False) + "\n"
                   for r in records)


def write_scores(records: Sequence[ScoreRecord], path: str | Path) -> None:
    atomic_write_text(path, dumps_scores(records))


def load_scores(path: str | Path) -> list[ScoreRecord]:
    out = []
    for lineno, line in enumerate(_lines(path), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            out.append(ScoreRecord(str(obj["item_id"]), obj["metric_name"], obj["dimension"],
                                   float(obj["score"]), obj.get("steering")))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: line {lineno}: malformed score record ({exc})") from exc
    return out


def write_judgments(items: Sequence[JudgmentItem], path: str | Path) -> None:
    lines = []
    for it in items:
        obj = {
            "id": it.item_id, "lang": it.language, "dimension": it.dimension,
            "document": it.document, "summary": it.summary,
            "human_scores": it.human_scores, "corrupted": it.corrupted,
        }
        if it.paired_original_id is not None:
            obj["paired_original_id"] = it.paired_original_id
        if it.reference is not None:
            obj["reference"] = it.reference
        lines.append(json.dumps(obj, ensure_ascii=False) + "\n")
    atomic_write_text(path, "".join(lines))
