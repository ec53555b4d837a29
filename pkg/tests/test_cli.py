"""Tests for CLI commands and exit codes."""

from __future__ import annotations

from unittest.mock import patch

import pytest

from bruijn_share.cli import (
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_USAGE,
    UsageError,
    build_parser,
    do_keywords,
    do_list_posts,
    do_pending,
    do_route,
    do_sim,
    do_thread,
    main,
)
from bruijn_share.config import RENDEZVOUS_ENV
from bruijn_share.db import Database, default_db_path
from bruijn_share.forum import annotation_to_post, create_annotation, create_comment, create_post
from bruijn_share.index import FileMeta, LocalIndex
from bruijn_share.wire import MsgType

BODY = "Announcements flood immediately while plain posts wait for the next gossip tick. " * 2


# ── Argument Parsing ──────────────────────────────────────────────────────────


class TestArgumentParsing:
    def test_no_args_defaults_to_none_command(self):
        args = build_parser().parse_args([])
        assert args.command is None
        assert args.verbose == 0

    def test_search_joins_words(self):
        args = build_parser().parse_args(["search", "de", "bruijn", "--wait", "2"])
        assert args.query == ["de", "bruijn"]
        assert args.wait == 2.0

    def test_sim_flags(self, tmp_path):
        args = build_parser().parse_args(["sim", "churn", "--nodes", "40", "--crash", "--no-batching",
                                          "--out", str(tmp_path / "m.csv")])
        assert args.preset == "churn"
        assert args.nodes == 40
        assert args.crash and args.no_batching

    def test_unknown_preset_exits_with_usage_code(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["sim", "flood"])
        assert exc.value.code == EXIT_USAGE

    def test_annotate_kind_choices(self):
        args = build_parser().parse_args(["annotate", "--file-id", "f" * 40, "--kind", "av", "--start", "3",
                                          "--end", "9"])
        assert (args.start, args.end) == (3.0, 9.0)


# ── Offline Commands ──────────────────────────────────────────────────────────


class TestRoute:
    def test_opposite_labels_take_eight_hops(self):
        result = do_route("00000000", "77777777")
        assert len(result["path"]) == 9
        assert result["path"][0] == "00000000"
        assert result["path"][-1] == "77777777"

    def test_word_target(self):
        result = do_route("00000000", "Gossip", word=True)
        assert len(result["target"]) == 8
        assert result["path"][-1] == result["target"]

    def test_bad_label(self):
        with pytest.raises(ValueError):
            do_route("9", "0")


class TestSim:
    def test_writes_csv(self, tmp_path):
        out = tmp_path / "metrics.csv"
        result = do_sim("degree", 3, seed=0, out=out)
        assert result["summary"]["nodes"] == 3
        assert out.read_text().startswith("metric,value\n")

    def test_main_runs_sim(self, tmp_path):
        out = tmp_path / "metrics.csv"
        assert main(["sim", "degree", "--nodes", "2", "--out", str(out)]) == EXIT_OK
        assert out.exists()

    def test_too_few_nodes(self):
        assert main(["sim", "degree", "--nodes", "1"]) == EXIT_USAGE


class TestForumCommands:
    def test_thread_and_list(self, tmp_path):
        db = Database(default_db_path(tmp_path))
        record = create_post(title="hello", text=BODY, author="alice", timestamp=1.0)
        db.insert_record(record)
        db.close()
        assert do_thread(tmp_path, record["id"])["replies"] == []
        assert [p["id"] for p in do_list_posts(tmp_path)] == [record["id"]]

    def test_unknown_thread(self, tmp_path):
        with pytest.raises(UsageError):
            do_thread(tmp_path, "missing")

    def test_main_unknown_thread_is_usage_error(self, tmp_path):
        assert main(["forum", "thread", "missing", "--data-dir", str(tmp_path)]) == EXIT_USAGE

    def test_thread_carries_file_annotations(self, tmp_path):
        annotation = create_annotation("av", {"startTime": 3, "endTime": 9}, file_id="b" * 40,
                                       author="alice", text=BODY, timestamp=1.0)
        record = annotation_to_post(annotation, title="clip", author="alice", timestamp=2.0)
        db = Database(default_db_path(tmp_path))
        db.insert_annotation(annotation.to_dict())
        db.insert_record(record)
        db.close()
        thread = do_thread(tmp_path, record["id"])
        assert [a["id"] for a in thread["annotations"]] == [annotation.annotation_id]

    def test_pending_lists_orphaned_comments(self, tmp_path):
        parent_store = Database()
        parent = create_post(title="hello", text=BODY, author="alice", timestamp=1.0)
        parent_store.insert_record(parent)
        comment = create_comment(reply_to=parent["id"], text="agreed", author="bob", timestamp=2.0,
                                 known=parent_store)
        parent_store.close()
        db = Database(default_db_path(tmp_path))
        db.insert_record(comment)
        db.close()
        assert [c["id"] for c in do_pending(tmp_path)] == [comment["id"]]
        assert main(["forum", "pending", "--data-dir", str(tmp_path)]) == EXIT_OK


class TestKeywords:
    def test_sets_manual_keywords(self, tmp_path):
        shared = tmp_path / "notes.txt"
        shared.write_text("overlay notes")
        index = LocalIndex(tmp_path / "index.ndjson")
        index.add(FileMeta(path=str(shared.resolve()), content_hash="a" * 40, size=13, mtime=0.0))
        index.save()
        record = do_keywords(tmp_path, shared, ["Gossip", "de-bruijn"])
        assert record["manual"] == ["gossip", "bruijn"]
        assert LocalIndex(tmp_path / "index.ndjson").get(str(shared.resolve())).manual_keywords == ["gossip", "bruijn"]

    def test_unindexed_file(self, tmp_path):
        assert main(["keywords", str(tmp_path / "ghost.txt"), "word", "--data-dir", str(tmp_path)]) == EXIT_USAGE


# ── Exit Codes ────────────────────────────────────────────────────────────────


class TestExitCodes:
    def test_no_command(self):
        assert main([]) == EXIT_USAGE

    def test_node_without_rendezvous(self, tmp_path, monkeypatch):
        monkeypatch.delenv(RENDEZVOUS_ENV, raising=False)
        assert main(["--config", str(tmp_path / "c.json"), "node"]) == EXIT_USAGE

    def test_malformed_hash(self):
        assert main(["get", "not-a-hash"]) == EXIT_USAGE

    @patch("bruijn_share.sockets.request", side_effect=ConnectionRefusedError("connection refused"))
    def test_node_not_running(self, mock_request):
        assert main(["status"]) == EXIT_RUNTIME

    @patch("bruijn_share.sockets.request")
    def test_validation_rejection(self, mock_request):
        mock_request.return_value = {"ok": False, "errorKind": "validation", "error": "text too short"}
        assert main(["post", "--title", "t", "--text", "short"]) == EXIT_USAGE
        assert mock_request.call_args.args[1] == MsgType.CTRL_POST

    @patch("bruijn_share.sockets.request")
    def test_runtime_rejection(self, mock_request):
        mock_request.return_value = {"ok": False, "errorKind": "runtime", "error": "node is joining"}
        assert main(["search", "gossip"]) == EXIT_RUNTIME

    @patch("bruijn_share.sockets.request")
    def test_search_success(self, mock_request):
        mock_request.return_value = {"ok": True, "keywords": ["gossip"], "results": [
            {"fileHash": "a" * 40, "fileName": "notes.txt", "fileSize": 10, "matched": ["gossip"],
             "holders": ["10.0.0.1:7100"]}]}
        assert main(["search", "gossip", "--wait", "1"]) == EXIT_OK
        port, msg_type, payload, timeout = mock_request.call_args.args
        assert msg_type == MsgType.CTRL_SEARCH
        assert payload == {"query": "gossip", "wait": 1.0}

    @patch("bruijn_share.sockets.request")
    def test_annotate_rect_needs_corners(self, mock_request):
        argv = ["annotate", "--file-id", "f" * 40, "--kind", "pdf-rect", "--page", "1"]
        assert main(argv) == EXIT_USAGE
        mock_request.assert_not_called()
