"""Local share index: scanning, hashing, TF-IDF keywords and publication entries.

The index is one newline-delimited JSON file, one record per shared file.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import tempfile
from collections import Counter
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from bruijn_share.idspace import sha1_hex

logger = logging.getLogger(__name__)

DOCUMENT_TOKENS = 1000
MAX_AUTO_KEYWORDS = 100
MAX_MANUAL_KEYWORDS = 10
MIN_TOKEN_LENGTH = 3

TEXT_SUFFIXES = frozenset({".txt", ".md", ".rst", ".csv", ".log", ".htm", ".html", ".json", ".xml", ".tex"})

_TOKEN_RE = re.compile(r"[^\W_]+")

Extractor = Callable[[Path], str]


def tokenize(text: str) -> list[str]:
    """Lowercase alphanumeric runs of at least three characters."""
    return [t for t in _TOKEN_RE.findall(text.lower()) if len(t) >= MIN_TOKEN_LENGTH]


def tfidf_keywords(text: str, limit: int = MAX_AUTO_KEYWORDS) -> list[str]:
    """Top terms by summed tf * ln(Ndocs / df) over 1000-token documents.

    A text that fits in one document ranks by raw frequency instead.
    """
    tokens = tokenize(text)
    if not tokens:
        return []
    documents = [Counter(tokens[i:i + DOCUMENT_TOKENS]) for i in range(0, len(tokens), DOCUMENT_TOKENS)]
    if len(documents) == 1:
        scores: dict[str, float] = {term: float(count) for term, count in documents[0].items()}
    else:
        df: Counter[str] = Counter()
        for doc in documents:
            df.update(doc.keys())
        scores = {}
        for doc in documents:
            for term, tf in doc.items():
                scores[term] = scores.get(term, 0.0) + tf * math.log(len(documents) / df[term])
    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    return [term for term, _ in ranked[:limit]]


def extract_text(path: Path) -> str:
    """Plain-text extraction; other formats contribute only their file name."""
    if path.suffix.lower() not in TEXT_SUFFIXES:
        return ""
    return path.read_text(encoding="utf-8", errors="replace")


def hash_file(path: Path, block: int = 1 << 16) -> str:
    digest = hashlib.sha1()
    with path.open("rb") as fh:
        while chunk := fh.read(block):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class FileMeta:
    path: str
    content_hash: str
    size: int
    mtime: float
    auto_keywords: list[str] = field(default_factory=list)
    manual_keywords: list[str] = field(default_factory=list)
    last_indexed: float = 0.0

    @property
    def file_name(self) -> str:
        return Path(self.path).name

    def to_record(self) -> dict[str, Any]:
        return {
            "path": self.path,
            "hash": self.content_hash,
            "size": self.size,
            "mtime": self.mtime,
            "keywords": self.auto_keywords,
            "manual": self.manual_keywords,
            "indexed": self.last_indexed,
        }

    @classmethod
    def from_record(cls, data: dict[str, Any]) -> FileMeta:
        return cls(
            path=data["path"],
            content_hash=data["hash"],
            size=int(data["size"]),
            mtime=float(data["mtime"]),
            auto_keywords=list(data.get("keywords", []))[:MAX_AUTO_KEYWORDS],
            manual_keywords=list(data.get("manual", []))[:MAX_MANUAL_KEYWORDS],
            last_indexed=float(data.get("indexed", 0.0)),
        )


class LocalIndex:
    """Shared-file metadata keyed by path, persisted as NDJSON."""

    def __init__(self, path: Path | None = None) -> None:
        self.path = path
        self.entries: dict[str, FileMeta] = {}
        if path is not None:
            self.load()

    def load(self) -> None:
        self.entries = {}
        if self.path is None or not self.path.exists():
            return
        with self.path.open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    meta = FileMeta.from_record(json.loads(line))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    continue
                self.entries[meta.path] = meta

    def save(self) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(self.entries[p].to_record(), sort_keys=True) for p in sorted(self.entries)]
        fd, tmp = tempfile.mkstemp(dir=self.path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write("\n".join(lines) + ("\n" if lines else ""))
            os.replace(tmp, self.path)
        except BaseException:
            os.unlink(tmp)
            raise

    def get(self, path: str) -> FileMeta | None:
        return self.entries.get(path)

    def by_hash(self, content_hash: str) -> FileMeta | None:
        for path in sorted(self.entries):
            if self.entries[path].content_hash == content_hash:
                return self.entries[path]
        return None

    def add(self, meta: FileMeta) -> None:
        self.entries[meta.path] = meta

    def remove(self, path: str) -> FileMeta | None:
        return self.entries.pop(path, None)

    def all(self) -> list[FileMeta]:
        return [self.entries[p] for p in sorted(self.entries)]


def set_manual_keywords(index: LocalIndex, path: str, words: Iterable[str]) -> FileMeta:
    meta = index.get(path)
    if meta is None:
        raise ValueError(f"{path} is not in the share index")
    cleaned: list[str] = []
    for word in words:
        for token in tokenize(word):
            if token not in cleaned:
                cleaned.append(token)
    if len(cleaned) > MAX_MANUAL_KEYWORDS:
        raise ValueError(f"at most {MAX_MANUAL_KEYWORDS} manual keywords, got {len(cleaned)}")
    meta.manual_keywords = cleaned
    return meta


# -- scanning ------------------------------------------------------------------


@dataclass
class ChangeSet:
    new: list[FileMeta] = field(default_factory=list)
    modified: list[FileMeta] = field(default_factory=list)
    deleted: list[FileMeta] = field(default_factory=list)
    renamed: list[tuple[str, FileMeta]] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not (self.new or self.modified or self.deleted or self.renamed)

    def to_publish(self) -> list[FileMeta]:
        """Files whose keys change: new, modified, and those that moved to another name."""
        moved = [meta for old, meta in self.renamed if old != meta.path]
        return [*self.new, *self.modified, *moved]


def _iter_files(share_dirs: Iterable[Path]) -> list[Path]:
    files: set[Path] = set()
    for directory in share_dirs:
        if not directory.is_dir():
            logger.warning("share directory %s does not exist", directory)
            continue
        files.update(p.resolve() for p in directory.rglob("*") if p.is_file() and not p.name.endswith(".part"))
    return sorted(files)


def _build_meta(path: Path, stat: os.stat_result, content_hash: str, now: float, extractor: Extractor) -> FileMeta:
    try:
        keywords = tfidf_keywords(extractor(path))
    except (OSError, UnicodeError) as exc:
        logger.warning("could not extract text from %s: %s", path, exc)
        keywords = []
    return FileMeta(
        path=str(path),
        content_hash=content_hash,
        size=stat.st_size,
        mtime=stat.st_mtime,
        auto_keywords=keywords,
        last_indexed=now,
    )


def scan_shares(
    share_dirs: Iterable[Path], index: LocalIndex, now: float, extractor: Extractor = extract_text
) -> ChangeSet:
    """Bring ``index`` in line with the share directories and report what changed."""
    changes = ChangeSet()
    seen: set[str] = set()
    fresh: list[tuple[Path, os.stat_result, str]] = []
    for path in _iter_files(share_dirs):
        key = str(path)
        try:
            stat = path.stat()
            existing = index.get(key)
            if existing is not None and existing.mtime == stat.st_mtime and existing.size == stat.st_size:
                seen.add(key)
                continue
            content_hash = hash_file(path)
        except OSError as exc:
            logger.warning("skipping unreadable file %s: %s", path, exc)
            if index.get(key) is not None:
                seen.add(key)
            continue
        seen.add(key)
        if existing is None:
            fresh.append((path, stat, content_hash))
        elif existing.content_hash == content_hash:
            existing.mtime = stat.st_mtime
            existing.last_indexed = now
            changes.renamed.append((key, existing))
        else:
            meta = _build_meta(path, stat, content_hash, now, extractor)
            meta.manual_keywords = existing.manual_keywords
            index.add(meta)
            changes.modified.append(meta)

    gone = {p: index.entries[p] for p in sorted(index.entries) if p not in seen}
    for path, stat, content_hash in fresh:
        moved_from = next((p for p, m in gone.items() if m.content_hash == content_hash), None)
        if moved_from is not None:
            old = gone.pop(moved_from)
            index.remove(moved_from)
            old.path = str(path)
            old.mtime = stat.st_mtime
            old.last_indexed = now
            index.add(old)
            changes.renamed.append((moved_from, old))
            continue
        meta = _build_meta(path, stat, content_hash, now, extractor)
        index.add(meta)
        changes.new.append(meta)
    for path, meta in gone.items():
        index.remove(path)
        changes.deleted.append(meta)
    return changes


# -- publication ---------------------------------------------------------------


def file_keywords(meta: FileMeta) -> list[str]:
    """Auto, manual and file-name words; file-name words sit outside the 100 cap."""
    words = set(meta.auto_keywords) | set(meta.manual_keywords) | set(tokenize(meta.file_name))
    return sorted(words)


def file_locator(meta: FileMeta, holder: str) -> dict[str, Any]:
    return {"fileHash": meta.content_hash, "fileSize": meta.size, "fileName": meta.file_name, "holder": holder}


def publish_entries(meta: FileMeta, holder: str) -> list[tuple[str, dict[str, Any]]]:
    """(key, value) pairs for every keyword key plus the content-hash key."""
    value = file_locator(meta, holder)
    entries = [(sha1_hex(word), value) for word in file_keywords(meta)]
    entries.append((meta.content_hash, value))
    return entries
