"""Annotations, posts and comments, their gossip queue, and windowed reconciliation.

Records travel as plain dicts; ``validate_record`` is the gate every record
from the network passes before it reaches the store.
"""
from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Protocol

from bruijn_share.idspace import sha1_hex

logger = logging.getLogger(__name__)

MIN_POST_CHARS = 100
MAX_POST_CHARS = 1600
MIN_AV_SPAN = 5
MULTI_FILE_ID = "0"
WINDOW_SECONDS = 7 * 24 * 3600.0
CHUNK_IDS = 256
MAX_ROUNDS = 10


class ValidationError(ValueError):
    """Raised for a record or annotation that breaks its field rules."""


class AnnotationKind(str, Enum):
    PDF_TEXT = "pdf-text"
    PDF_RECT = "pdf-rect"
    AV = "av"


class RecordKind(str, Enum):
    POST = "post"
    COMMENT = "comment"


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def record_id(author: str, timestamp: float, fields: dict[str, Any]) -> str:
    return sha1_hex(f"{author}{timestamp!r}{canonical_json(fields)}")


def _int(value: Any, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
        raise ValidationError(f"{name} must be an integer, got {value!r}")
    return int(value)


def _point(value: Any, name: str) -> list[float]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ValidationError(f"{name} must be an (x, y) pair")
    return [float(value[0]), float(value[1])]


def normalize_properties(kind: AnnotationKind | str, fields: dict[str, Any]) -> dict[str, Any]:
    """Check and canonicalise annotation selection fields."""
    try:
        kind = AnnotationKind(kind)
    except ValueError as exc:
        raise ValidationError(f"unknown annotation kind {kind!r}") from exc
    try:
        if kind == AnnotationKind.PDF_TEXT:
            page = _int(fields["pageNumber"], "pageNumber")
            first = _int(fields["firstWord"], "firstWord")
            last = _int(fields["lastWord"], "lastWord")
            if page < 1:
                raise ValidationError(f"page numbers start at 1, got {page}")
            if first < 0 or first > last:
                raise ValidationError(f"word selection {first}..{last} is empty or reversed")
            return {"kind": kind.value, "pageNumber": page, "firstWord": first, "lastWord": last}
        if kind == AnnotationKind.PDF_RECT:
            page = _int(fields["pageNumber"], "pageNumber")
            top_left = _point(fields["topLeft"], "topLeft")
            bottom_right = _point(fields["bottomRight"], "bottomRight")
            if page < 1:
                raise ValidationError(f"page numbers start at 1, got {page}")
            if not (top_left[0] < bottom_right[0] and top_left[1] < bottom_right[1]):
                raise ValidationError("rectangle corners must satisfy topLeft < bottomRight")
            return {"kind": kind.value, "pageNumber": page, "topLeft": top_left, "bottomRight": bottom_right}
        start = round(float(fields["startTime"]))
        end = round(float(fields["endTime"]))
    except KeyError as exc:
        raise ValidationError(f"{kind.value} selection is missing {exc.args[0]}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"bad {kind.value} selection: {exc}") from exc
    if start < 0 or end < start:
        raise ValidationError(f"time range {start}..{end} is reversed or negative")
    if end - start < MIN_AV_SPAN:
        end = start + MIN_AV_SPAN
    return {"kind": kind.value, "startTime": start, "endTime": end}


@dataclass
class Annotation:
    annotation_id: str
    file_id: str
    timestamp: float
    author: str
    text: str
    properties: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.annotation_id,
            "fileId": self.file_id,
            "timestamp": self.timestamp,
            "author": self.author,
            "text": self.text,
            "properties": self.properties,
        }


def create_annotation(
    kind: AnnotationKind | str, fields: dict[str, Any], *, file_id: str, author: str, text: str, timestamp: float
) -> Annotation:
    properties = normalize_properties(kind, fields)
    body = {"fileId": file_id, "text": text, "properties": properties}
    return Annotation(
        annotation_id=record_id(author, timestamp, body),
        file_id=file_id,
        timestamp=timestamp,
        author=author,
        text=text,
        properties=properties,
    )


# -- posts and comments ------------------------------------------------------------


def _check_post_text(text: str) -> None:
    if not isinstance(text, str):
        raise ValidationError("post text must be a string")
    if not MIN_POST_CHARS <= len(text) <= MAX_POST_CHARS:
        raise ValidationError(f"post text must be {MIN_POST_CHARS}-{MAX_POST_CHARS} characters, got {len(text)}")


def _check_comment_text(text: str) -> None:
    if not isinstance(text, str) or not text.strip() or len(text) > MAX_POST_CHARS:
        raise ValidationError(f"comment text must be 1-{MAX_POST_CHARS} characters")


def _finish(kind: RecordKind, author: str, timestamp: float, body: dict[str, Any]) -> dict[str, Any]:
    timestamp = float(timestamp)
    record = {"kind": kind.value, "author": author, "timestamp": timestamp, **body}
    record["id"] = record_id(author, timestamp, {"kind": kind.value, **body})
    return record


def create_post(
    *,
    title: str,
    text: str,
    author: str,
    timestamp: float,
    file_id: str = MULTI_FILE_ID,
    properties: list[dict[str, Any]] | None = None,
    announcement: bool = False,
) -> dict[str, Any]:
    _check_post_text(text)
    if not title.strip():
        raise ValidationError("post title must not be empty")
    body = {
        "fileId": file_id,
        "title": title,
        "text": text,
        "properties": properties or [],
        "announcement": announcement,
    }
    return _finish(RecordKind.POST, author, timestamp, body)


def annotation_to_post(
    annotations: Annotation | list[Annotation], *, title: str, extra_text: str = "", author: str, timestamp: float
) -> dict[str, Any]:
    """One annotation keeps its file id; several share a post under file id "0"."""
    items = annotations if isinstance(annotations, list) else [annotations]
    if not items:
        raise ValidationError("no annotations to post")
    text = "\n\n".join([a.text for a in items] + ([extra_text] if extra_text else []))
    file_id = items[0].file_id if len(items) == 1 else MULTI_FILE_ID
    properties = [{"fileId": a.file_id, **a.properties} for a in items]
    return create_post(title=title, text=text, author=author, timestamp=timestamp, file_id=file_id,
                       properties=properties)


class RecordSource(Protocol):
    def has(self, record_id: str) -> bool: ...


def create_comment(
    *, reply_to: str, text: str, author: str, timestamp: float, known: RecordSource, file_id: str = MULTI_FILE_ID
) -> dict[str, Any]:
    if not known.has(reply_to):
        raise ValidationError(f"cannot reply to unknown record {reply_to}")
    _check_comment_text(text)
    body = {"fileId": file_id, "text": text, "replyTo": reply_to, "properties": []}
    return _finish(RecordKind.COMMENT, author, timestamp, body)


def validate_record(record: Any) -> dict[str, Any]:
    """Check shape, field rules and the content-derived id of a received record."""
    if not isinstance(record, dict):
        raise ValidationError("record must be an object")
    try:
        kind = RecordKind(record.get("kind"))
        author = record["author"]
        timestamp = record["timestamp"]
        if isinstance(timestamp, bool) or not isinstance(timestamp, (int, float)):
            raise ValidationError(f"timestamp must be a number, got {timestamp!r}")
        rid = record["id"]
        if kind == RecordKind.POST:
            _check_post_text(record["text"])
            body = {k: record[k] for k in ("fileId", "title", "text", "properties", "announcement")}
        else:
            _check_comment_text(record["text"])
            body = {k: record[k] for k in ("fileId", "text", "replyTo", "properties")}
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"malformed record: {exc}") from exc
    if record_id(author, timestamp, {"kind": kind.value, **body}) != rid:
        raise ValidationError(f"record id {rid} does not match its content")
    return {"kind": kind.value, "id": rid, "author": author, "timestamp": timestamp, **body}


# -- epidemic dissemination ----------------------------------------------------------


@dataclass
class _Queued:
    record: dict[str, Any]
    sources: set[str] = field(default_factory=set)


class GossipQueue:
    """Records waiting for the next tick, with the neighbors they came from."""

    def __init__(self) -> None:
        self._items: dict[str, _Queued] = {}

    def __len__(self) -> int:
        return len(self._items)

    def offer(self, record: dict[str, Any], source: str | None = None) -> None:
        item = self._items.setdefault(record["id"], _Queued(record))
        if source is not None:
            item.sources.add(source)

    def add_source(self, record_id: str, source: str) -> bool:
        item = self._items.get(record_id)
        if item is None:
            return False
        item.sources.add(source)
        return True

    def drain(self, neighbors: list[str]) -> dict[str, list[dict[str, Any]]]:
        """Per-neighbor batches for everything queued, skipping each record's sources."""
        batches: dict[str, list[dict[str, Any]]] = {}
        for rid in sorted(self._items):
            item = self._items[rid]
            for neighbor in neighbors:
                if neighbor not in item.sources:
                    batches.setdefault(neighbor, []).append(item.record)
        self._items.clear()
        return batches

    def pending(self) -> list[dict[str, Any]]:
        return [self._items[rid].record for rid in sorted(self._items)]


# -- reconciliation ------------------------------------------------------------------


class ForumIndex(Protocol):
    def has(self, record_id: str) -> bool: ...
    def window_ids(self, since: float) -> list[str]: ...
    def oldest_since(self, since: float) -> float | None: ...
    def get_records(self, ids: list[str]) -> list[dict[str, Any]]: ...
    def insert_record(self, record: dict[str, Any]) -> bool: ...


def window_anchor(store: ForumIndex, now: float, window: float = WINDOW_SECONDS) -> float:
    """Oldest post or comment timestamp inside the window, else the window start."""
    oldest = store.oldest_since(now - window)
    return oldest if oldest is not None else now - window


def chunk_hashes(ids: list[str], chunk: int = CHUNK_IDS) -> list[str]:
    return [sha1_hex("".join(ids[i:i + chunk])) for i in range(0, len(ids), chunk)]


def mismatched_chunks(mine: list[str], theirs: list[str]) -> list[int]:
    size = max(len(mine), len(theirs))
    return [i for i in range(size) if i >= len(mine) or i >= len(theirs) or mine[i] != theirs[i]]


def chunk_ids(ids: list[str], indices: list[int], chunk: int = CHUNK_IDS) -> list[str]:
    picked: list[str] = []
    for index in indices:
        picked.extend(ids[index * chunk:(index + 1) * chunk])
    return picked


def missing_from(ids: list[str], store: ForumIndex) -> list[str]:
    return [rid for rid in ids if not store.has(rid)]


def store_records(store: ForumIndex, records: list[Any]) -> list[dict[str, Any]]:
    """Validate and insert; return the records that were new."""
    added = []
    for raw in records:
        try:
            record = validate_record(raw)
        except ValidationError as exc:
            logger.warning("dropping invalid record: %s", exc)
            continue
        if store.insert_record(record):
            added.append(record)
    return added


@dataclass
class ReconcileReport:
    rounds: int = 0
    hashes_exchanged: int = 0
    ids_exchanged: int = 0
    records_transferred: int = 0
    converged: bool = False


def reconcile_stores(
    initiator: ForumIndex,
    responder: ForumIndex,
    now: float,
    window: float = WINDOW_SECONDS,
    chunk: int = CHUNK_IDS,
    max_rounds: int = MAX_ROUNDS,
) -> ReconcileReport:
    """Run one reconciliation dialogue between two local stores.

    Same steps the node runs over the wire: hashes, ids of mismatched
    chunks, then the bodies each side lacks.
    """
    report = ReconcileReport()
    anchor = window_anchor(initiator, now, window)
    while report.rounds < max_rounds:
        report.rounds += 1
        theirs_ids = responder.window_ids(anchor)
        theirs = chunk_hashes(theirs_ids, chunk)
        report.hashes_exchanged += len(theirs)
        mine_ids = initiator.window_ids(anchor)
        bad = mismatched_chunks(chunk_hashes(mine_ids, chunk), theirs)
        if not bad:
            report.converged = True
            break
        offered = chunk_ids(mine_ids, bad, chunk)
        answered = chunk_ids(theirs_ids, bad, chunk)
        report.ids_exchanged += len(offered) + len(answered)
        offered_set = set(offered)
        push = [rid for rid in answered if rid not in offered_set]
        fetch = missing_from(offered, responder)
        report.records_transferred += len(store_records(initiator, responder.get_records(push)))
        report.records_transferred += len(store_records(responder, initiator.get_records(fetch)))
    return report


def pick_partner(neighbors: list[str], rng: random.Random) -> str | None:
    return rng.choice(neighbors) if neighbors else None
