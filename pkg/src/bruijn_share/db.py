"""SQLite store for forum records and local annotations."""

from __future__ import annotations

import json
import sqlite3
from pathlib import Path
from typing import Any

MEMORY = ":memory:"


def default_db_path(data_dir: Path) -> Path:
    return data_dir / "forum.db"


class Database:
    """SQLite database manager with WAL mode. Records are append-only."""

    def __init__(self, db_path: Path | str = MEMORY) -> None:
        self.db_path = db_path
        if db_path != MEMORY:
            Path(db_path).parent.mkdir(parents=True, exist_ok=True)
        self.conn = sqlite3.connect(str(db_path))
        self.conn.row_factory = sqlite3.Row
        self.conn.execute("PRAGMA journal_mode=WAL")
        self.init_db()

    def init_db(self) -> None:
        """Create tables if they do not exist."""
        self.conn.executescript("""
            CREATE TABLE IF NOT EXISTS records (
                id TEXT PRIMARY KEY,
                kind TEXT NOT NULL,
                timestamp REAL NOT NULL,
                author TEXT NOT NULL,
                file_id TEXT NOT NULL,
                reply_to TEXT,
                announcement INTEGER DEFAULT 0,
                body TEXT NOT NULL
            );

            CREATE INDEX IF NOT EXISTS records_by_time ON records (timestamp, id);
            CREATE INDEX IF NOT EXISTS records_by_parent ON records (reply_to);

            CREATE TABLE IF NOT EXISTS annotations (
                id TEXT PRIMARY KEY,
                file_id TEXT NOT NULL,
                timestamp REAL NOT NULL,
                author TEXT NOT NULL,
                body TEXT NOT NULL
            );
        """)
        self.conn.commit()

    # -- records ---------------------------------------------------------------

    def has(self, record_id: str) -> bool:
        row = self.conn.execute("SELECT 1 FROM records WHERE id = ?", (record_id,)).fetchone()
        return row is not None

    def insert_record(self, record: dict[str, Any]) -> bool:
        """Insert a validated record; False when the id is already stored."""
        cursor = self.conn.execute(
            "INSERT OR IGNORE INTO records (id, kind, timestamp, author, file_id, reply_to, announcement, body) "
            "VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
            (
                record["id"],
                record["kind"],
                record["timestamp"],
                record["author"],
                record.get("fileId", "0"),
                record.get("replyTo"),
                int(bool(record.get("announcement", False))),
                json.dumps(record, sort_keys=True),
            ),
        )
        self.conn.commit()
        return cursor.rowcount == 1

    def get_record(self, record_id: str) -> dict[str, Any] | None:
        row = self.conn.execute("SELECT body FROM records WHERE id = ?", (record_id,)).fetchone()
        return json.loads(row["body"]) if row else None

    def get_records(self, ids: list[str]) -> list[dict[str, Any]]:
        found = []
        for record_id in ids:
            record = self.get_record(record_id)
            if record is not None:
                found.append(record)
        return found

    def count_records(self) -> int:
        return self.conn.execute("SELECT COUNT(*) FROM records").fetchone()[0]

    def window_ids(self, since: float) -> list[str]:
        """Ids with timestamp >= ``since``, ordered by (timestamp, id)."""
        rows = self.conn.execute(
            "SELECT id FROM records WHERE timestamp >= ? ORDER BY timestamp, id", (since,)
        ).fetchall()
        return [row["id"] for row in rows]

    def oldest_since(self, since: float) -> float | None:
        row = self.conn.execute("SELECT MIN(timestamp) AS t FROM records WHERE timestamp >= ?", (since,)).fetchone()
        return row["t"]

    def high_water(self) -> float | None:
        return self.conn.execute("SELECT MAX(timestamp) AS t FROM records").fetchone()["t"]

    def posts(self, announcements: bool = False, limit: int = 50) -> list[dict[str, Any]]:
        rows = self.conn.execute(
            "SELECT body FROM records WHERE kind = 'post' AND announcement = ? "
            "ORDER BY timestamp DESC, id LIMIT ?",
            (int(announcements), limit),
        ).fetchall()
        return [json.loads(row["body"]) for row in rows]

    def replies_to(self, record_id: str) -> list[dict[str, Any]]:
        rows = self.conn.execute(
            "SELECT body FROM records WHERE reply_to = ? ORDER BY timestamp, id", (record_id,)
        ).fetchall()
        return [json.loads(row["body"]) for row in rows]

    def pending_comments(self) -> list[dict[str, Any]]:
        """Comments whose reply target has not arrived yet."""
        rows = self.conn.execute(
            "SELECT c.body FROM records c LEFT JOIN records p ON c.reply_to = p.id "
            "WHERE c.kind = 'comment' AND p.id IS NULL ORDER BY c.timestamp, c.id"
        ).fetchall()
        return [json.loads(row["body"]) for row in rows]

    def thread(self, post_id: str) -> dict[str, Any] | None:
        """A post with its attached comment tree under ``replies``."""
        root = self.get_record(post_id)
        if root is None:
            return None

        def attach(node: dict[str, Any]) -> dict[str, Any]:
            node["replies"] = [attach(child) for child in self.replies_to(node["id"])]
            return node

        return attach(root)

    # -- annotations -----------------------------------------------------------

    def insert_annotation(self, annotation: dict[str, Any]) -> bool:
        cursor = self.conn.execute(
            "INSERT OR IGNORE INTO annotations (id, file_id, timestamp, author, body) VALUES (?, ?, ?, ?, ?)",
            (
                annotation["id"],
                annotation["fileId"],
                annotation["timestamp"],
                annotation["author"],
                json.dumps(annotation, sort_keys=True),
            ),
        )
        self.conn.commit()
        return cursor.rowcount == 1

    def annotations_for(self, file_id: str) -> list[dict[str, Any]]:
        rows = self.conn.execute(
            "SELECT body FROM annotations WHERE file_id = ? ORDER BY timestamp, id", (file_id,)
        ).fetchall()
        return [json.loads(row["body"]) for row in rows]

    def close(self) -> None:
        """Close the database connection."""
        self.conn.close()
