"""Keyword search sessions, result ranking and multi-source chunked downloads."""
from __future__ import annotations

import asyncio
import hashlib
import logging
import math
import os
import re
import uuid
from collections.abc import Awaitable, Callable
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

from bruijn_share.dht import EmptyQueryError
from bruijn_share.idspace import sha1_hex
from bruijn_share.index import tokenize

logger = logging.getLogger(__name__)

CHUNK_SIZE = 256 * 1024
_HASH_RE = re.compile(r"^[0-9a-f]{40}$")


class MalformedHashError(ValueError):
    """Raised for a file id that is not 40 hex characters."""


class DownloadError(RuntimeError):
    """Raised when some chunk could not be fetched from any holder."""


class IntegrityError(DownloadError):
    """Raised when the assembled file does not hash to the requested id."""


class SessionState(str, Enum):
    ACTIVE = "active"
    CANCELLED = "cancelled"
    DONE = "done"


@dataclass
class SearchResult:
    file_hash: str
    file_name: str
    file_size: int
    matched_keywords: set[str] = field(default_factory=set)
    holders: set[str] = field(default_factory=set)

    def to_dict(self) -> dict[str, Any]:
        return {
            "fileHash": self.file_hash,
            "fileName": self.file_name,
            "fileSize": self.file_size,
            "matched": sorted(self.matched_keywords),
            "holders": sorted(self.holders),
        }


@dataclass
class SearchSession:
    search_id: str
    query_keywords: list[str]
    results: dict[str, SearchResult] = field(default_factory=dict)
    state: SessionState = SessionState.ACTIVE

    def keys(self) -> dict[str, str]:
        """Lookup key -> keyword."""
        return {sha1_hex(word): word for word in self.query_keywords}


def query_keywords(query: str) -> list[str]:
    words: list[str] = []
    for token in tokenize(query):
        if token not in words:
            words.append(token)
    return words


def start_search(query: str, search_id: str | None = None) -> SearchSession:
    words = query_keywords(query)
    if not words:
        raise EmptyQueryError(f"query {query!r} has no usable keywords")
    return SearchSession(search_id=search_id or uuid.uuid4().hex, query_keywords=words)


def accept_result(session: SearchSession, search_id: str | None, key: str, values: list[dict[str, Any]]) -> bool:
    """Merge one key's reply into the session; False when the reply is dropped."""
    if session.state != SessionState.ACTIVE or search_id != session.search_id:
        return False
    keyword = session.keys().get(key)
    if keyword is None:
        return False
    for value in values:
        result = session.results.get(value["fileHash"])
        if result is None:
            result = SearchResult(value["fileHash"], value["fileName"], int(value["fileSize"]))
            session.results[value["fileHash"]] = result
        result.matched_keywords.add(keyword)
        result.holders.add(value["holder"])
    return True


def cancel_search(session: SearchSession) -> None:
    session.state = SessionState.CANCELLED


def rank_results(session: SearchSession) -> list[SearchResult]:
    """More matched keywords first, then more holders, then name and hash."""
    return sorted(
        session.results.values(),
        key=lambda r: (-len(r.matched_keywords), -len(r.holders), r.file_name, r.file_hash),
    )


def validate_file_hash(file_hash: str) -> str:
    normalized = file_hash.strip().lower()
    if not _HASH_RE.match(normalized):
        raise MalformedHashError(f"{file_hash!r} is not a 40-character hex SHA-1")
    return normalized


def holders_from_values(values: list[dict[str, Any]]) -> list[str]:
    return sorted({v["holder"] for v in values})


# -- download ------------------------------------------------------------------

ChunkFetcher = Callable[[str, str, int, int], Awaitable[bytes]]


def chunk_count(size: int, chunk_size: int = CHUNK_SIZE) -> int:
    return max(1, math.ceil(size / chunk_size))


def assign_chunks(size: int, holders: list[str], chunk_size: int = CHUNK_SIZE) -> dict[str, list[int]]:
    """Round-robin chunk indices over holders in the given order."""
    plan: dict[str, list[int]] = {h: [] for h in holders}
    for index in range(chunk_count(size, chunk_size)):
        plan[holders[index % len(holders)]].append(index)
    return plan


def download_destination(download_dir: Path, file_name: str) -> Path:
    """Where a download named ``file_name`` lands; never outside ``download_dir``."""
    name = Path(str(file_name).replace("\\", "/")).name
    if name in ("", ".", ".."):
        raise DownloadError(f"unusable file name {file_name!r}")
    root = download_dir.resolve()
    dest = (root / name).resolve()
    if dest.parent != root:
        raise DownloadError(f"file name {file_name!r} leaves the download directory")
    return dest


async def download_file(
    file_hash: str,
    size: int,
    holders: list[str],
    fetch_chunk: ChunkFetcher,
    dest: Path,
    chunk_size: int = CHUNK_SIZE,
) -> Path:
    """Fetch chunks concurrently, one worker per holder, and verify the SHA-1.

    ``fetch_chunk(holder, file_hash, index, chunk_size)`` returns the chunk
    bytes or raises. A failed holder's outstanding chunks move to the others.
    """
    if not holders:
        raise DownloadError(f"no holders for {file_hash}")
    file_hash = validate_file_hash(file_hash)
    total = chunk_count(size, chunk_size)
    queues = {h: list(indices) for h, indices in assign_chunks(size, holders, chunk_size).items()}
    failed: dict[int, set[str]] = {}
    done: set[int] = set()
    alive = set(holders)
    aborted: list[int] = []
    write_lock = asyncio.Lock()
    changed = asyncio.Condition()

    dest.parent.mkdir(parents=True, exist_ok=True)
    partial = dest.with_name(dest.name + ".part")
    with partial.open("wb") as fh:
        fh.truncate(size)

    def next_index(holder: str) -> int | None:
        if queues[holder]:
            return queues[holder].pop(0)
        return None

    def reassign(index: int, bad: str) -> bool:
        failed.setdefault(index, set()).add(bad)
        candidates = sorted(h for h in alive if h not in failed[index])
        if not candidates:
            return False
        target = min(candidates, key=lambda h: len(queues[h]))
        queues[target].append(index)
        return True

    async def worker(holder: str) -> None:
        while True:
            async with changed:
                index = next_index(holder)
                while index is None and holder in alive and len(done) < total and not aborted:
                    await changed.wait()
                    index = next_index(holder)
            if index is None:
                return
            try:
                data = await fetch_chunk(holder, file_hash, index, chunk_size)
                expected = min(chunk_size, size - index * chunk_size)
                if len(data) != max(expected, 0):
                    raise DownloadError(f"chunk {index} from {holder}: {len(data)} bytes, expected {expected}")
            except Exception as exc:
                logger.warning("chunk %d from %s failed: %s", index, holder, exc)
                async with changed:
                    alive.discard(holder)
                    lost = [index, *queues[holder]]
                    queues[holder] = []
                    stranded = [i for i in lost if not reassign(i, holder)]
                    aborted.extend(stranded)
                    changed.notify_all()
                if stranded:
                    raise DownloadError(f"chunk {stranded[0]} of {file_hash} failed on every holder") from exc
                return
            async with write_lock:
                with partial.open("r+b") as fh:
                    fh.seek(index * chunk_size)
                    fh.write(data)
            async with changed:
                done.add(index)
                changed.notify_all()

    try:
        await asyncio.gather(*(worker(h) for h in holders))
        if len(done) < total:
            raise DownloadError(f"{total - len(done)} chunks of {file_hash} were never fetched")
        actual = _sha1_of(partial)
        if actual != file_hash:
            raise IntegrityError(f"downloaded data hashes to {actual}, expected {file_hash}")
    except BaseException:
        partial.unlink(missing_ok=True)
        raise
    os.replace(partial, dest)
    return dest


def _sha1_of(path: Path) -> str:
    digest = hashlib.sha1()
    with path.open("rb") as fh:
        while chunk := fh.read(1 << 16):
            digest.update(chunk)
    return digest.hexdigest()
