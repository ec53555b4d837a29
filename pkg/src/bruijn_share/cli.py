"""CLI commands for bruijn-share."""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Any

from bruijn_share.config import (
    DEFAULT_CONTROL_PORT,
    DEFAULT_NODE_PORT,
    DEFAULT_RENDEZVOUS_PORT,
    NodeConfig,
    add_share_dir,
    get_author,
    get_data_dir,
    get_download_dir,
    get_rendezvous_address,
    get_share_dirs,
    split_address,
)
from bruijn_share.db import Database, default_db_path
from bruijn_share.display import (
    configure_logging,
    console,
    print_degree_histogram,
    print_error,
    print_holders,
    print_keywords,
    print_metrics,
    print_node_status,
    print_posts,
    print_result,
    print_route,
    print_search_results,
    print_thread,
)
from bruijn_share.idspace import DEFAULT_RING, label_from_key, routing_path, sha1_hex
from bruijn_share.index import LocalIndex, set_manual_keywords
from bruijn_share.search import validate_file_hash
from bruijn_share.sim import PRESETS, SimConfig, export_csv, run_experiment
from bruijn_share.wire import MsgType

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(ValueError):
    """Bad or missing command-line input."""


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1 instead of argparse's 2."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    """Build and return the argument parser."""
    parser = _Parser(prog="bruijn-share", description="Share, search and discuss files over a de Bruijn overlay")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logs")
    parser.add_argument("--config", type=Path, default=None, help="Config file (default ~/.bruijn-share/config.json)")
    subparsers = parser.add_subparsers(dest="command", parser_class=_Parser)

    rdv = subparsers.add_parser("rendezvous", help="Run the bootstrap rendezvous server")
    rdv.add_argument("--port", type=int, default=DEFAULT_RENDEZVOUS_PORT)
    rdv.add_argument("--host", default="0.0.0.0")

    node = subparsers.add_parser("node", help="Run an overlay node")
    node.add_argument("--rendezvous", default=None, help="HOST:PORT (or $P2P_RENDEZVOUS)")
    node.add_argument("--port", type=int, default=DEFAULT_NODE_PORT)
    node.add_argument("--host", default="127.0.0.1", help="Address peers should use until the rendezvous answers")
    node.add_argument("--share", type=Path, nargs="*", default=[], help="Directories to share")
    node.add_argument("--data-dir", type=Path, default=None)
    node.add_argument("--control-port", type=int, default=DEFAULT_CONTROL_PORT)

    share = subparsers.add_parser("share", help="Add a share directory to the config")
    share.add_argument("directory", type=Path)

    def with_control(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--control-port", type=int, default=DEFAULT_CONTROL_PORT)
        return p

    search = with_control(subparsers.add_parser("search", help="Keyword search through the running node"))
    search.add_argument("query", nargs="+")
    search.add_argument("--wait", type=float, default=5.0, help="Seconds to collect results")

    get = with_control(subparsers.add_parser("get", help="Look up a file by content hash"))
    get.add_argument("file_hash")
    get.add_argument("--download", action="store_true")
    get.add_argument("--wait", type=float, default=5.0)

    post = with_control(subparsers.add_parser("post", help="Publish a forum post"))
    post.add_argument("--title", required=True)
    post.add_argument("--text", required=True)
    post.add_argument("--file-id", default="0")
    post.add_argument("--announcement", action="store_true")

    comment = with_control(subparsers.add_parser("comment", help="Reply to a post or comment"))
    comment.add_argument("reply_to")
    comment.add_argument("--text", required=True)

    annotate = with_control(subparsers.add_parser("annotate", help="Annotate a file, optionally posting it"))
    annotate.add_argument("--file-id", required=True)
    annotate.add_argument("--kind", choices=["pdf-text", "pdf-rect", "av"], required=True)
    annotate.add_argument("--page", type=int)
    annotate.add_argument("--first-word", type=int)
    annotate.add_argument("--last-word", type=int)
    annotate.add_argument("--top-left", help="X,Y")
    annotate.add_argument("--bottom-right", help="X,Y")
    annotate.add_argument("--start", type=float, help="Seconds")
    annotate.add_argument("--end", type=float, help="Seconds")
    annotate.add_argument("--text", default="")
    annotate.add_argument("--title", default=None, help="Also publish the annotation as a post")

    with_control(subparsers.add_parser("status", help="Show the running node's state"))

    route = subparsers.add_parser("route", help="Show the substring route between two labels")
    route.add_argument("source", help="Octal label")
    route.add_argument("target", help="Octal label, or a keyword with --word")
    route.add_argument("--word", action="store_true", help="Route to the owner label of a keyword")

    keywords = subparsers.add_parser("keywords", help="Set manual keywords for a shared file")
    keywords.add_argument("path", type=Path)
    keywords.add_argument("words", nargs="*")
    keywords.add_argument("--data-dir", type=Path, default=None)

    forum = subparsers.add_parser("forum", help="Read the local forum store")
    forum_sub = forum.add_subparsers(dest="forum_command", parser_class=_Parser)
    thread = forum_sub.add_parser("thread", help="Show a post with its replies")
    thread.add_argument("post_id")
    listing = forum_sub.add_parser("list", help="List recent posts")
    listing.add_argument("--announcements", action="store_true")
    listing.add_argument("--limit", type=int, default=20)
    pending = forum_sub.add_parser("pending", help="List comments waiting for their parent")
    for p in (thread, listing, pending):
        p.add_argument("--data-dir", type=Path, default=None)

    sim = subparsers.add_parser("sim", help="Run a simulated experiment")
    sim.add_argument("preset", choices=PRESETS)
    sim.add_argument("--nodes", type=int, default=100)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", type=Path, default=None, help="Write metrics CSV here")
    sim.add_argument("--crash", action="store_true", help="Churn by crashing instead of leaving")
    sim.add_argument("--leave-prob", type=float, default=0.1)
    sim.add_argument("--no-batching", action="store_true")
    return parser


# -- offline commands ------------------------------------------------------------


def do_sim(preset: str, nodes: int, seed: int, out: Path | None = None, crash: bool = False,
           leave_prob: float = 0.1, batching: bool = True) -> dict[str, Any]:
    config = SimConfig(preset=preset, node_count=nodes, seed=seed, crash=crash, leave_prob=leave_prob,
                       batching=batching)
    metrics = run_experiment(config)
    if out is not None:
        export_csv(metrics, out)
    return {"summary": metrics.summary(), "histogram": dict(sorted(metrics.out_degree_histogram.items())),
            "out": str(out) if out else None}


def do_route(source: str, target: str, word: bool = False) -> dict[str, Any]:
    if word:
        target = DEFAULT_RING.render(label_from_key(sha1_hex(target.lower())))
    path = routing_path(DEFAULT_RING.parse(source), DEFAULT_RING.parse(target))
    return {"source": source, "target": target, "path": [DEFAULT_RING.render(label) for label in path]}


def do_keywords(data_dir: Path, path: Path, words: list[str]) -> dict[str, Any]:
    index = LocalIndex(data_dir / "index.ndjson")
    index.load()
    meta = set_manual_keywords(index, str(path.resolve()), words)
    index.save()
    return meta.to_record()


def do_thread(data_dir: Path, post_id: str) -> dict[str, Any]:
    db = Database(default_db_path(data_dir))
    try:
        thread = db.thread(post_id)
        if thread is not None and thread.get("fileId", "0") != "0":
            thread["annotations"] = db.annotations_for(thread["fileId"])
    finally:
        db.close()
    if thread is None:
        raise UsageError(f"no record {post_id} in the local forum store")
    return thread


def do_list_posts(data_dir: Path, announcements: bool = False, limit: int = 20) -> list[dict[str, Any]]:
    db = Database(default_db_path(data_dir))
    try:
        return db.posts(announcements=announcements, limit=limit)
    finally:
        db.close()


def do_pending(data_dir: Path) -> list[dict[str, Any]]:
    db = Database(default_db_path(data_dir))
    try:
        return db.pending_comments()
    finally:
        db.close()


# -- commands against a running node ---------------------------------------------


def _control(port: int, msg_type: MsgType, payload: dict[str, Any], timeout: float = 30.0) -> dict[str, Any]:
    from bruijn_share.sockets import request

    result = request(port, msg_type, payload, timeout)
    if not result.get("ok", False):
        if result.get("errorKind") == "validation":
            raise UsageError(result.get("error", "rejected by node"))
        raise RuntimeError(result.get("error", "node reported a failure"))
    return result


def _pair(text: str | None, name: str) -> list[float]:
    if text is None:
        raise UsageError(f"--{name} is required for this annotation kind")
    try:
        x, y = (float(part) for part in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--{name} must look like X,Y") from exc
    return [x, y]


def annotation_fields(args: argparse.Namespace) -> dict[str, Any]:
    if args.kind == "pdf-text":
        return {"pageNumber": args.page, "firstWord": args.first_word, "lastWord": args.last_word}
    if args.kind == "pdf-rect":
        return {"pageNumber": args.page, "topLeft": _pair(args.top_left, "top-left"),
                "bottomRight": _pair(args.bottom_right, "bottom-right")}
    return {"startTime": args.start, "endTime": args.end}


def do_search(port: int, query: list[str], wait: float) -> dict[str, Any]:
    return _control(port, MsgType.CTRL_SEARCH, {"query": " ".join(query), "wait": wait}, timeout=wait + 30)


def do_get(port: int, file_hash: str, download: bool, wait: float) -> dict[str, Any]:
    file_hash = validate_file_hash(file_hash)
    timeout = wait + (3600 if download else 30)
    return _control(port, MsgType.CTRL_GET, {"fileHash": file_hash, "download": download, "wait": wait},
                    timeout=timeout)


def _dispatch(args: argparse.Namespace) -> int:
    command = args.command
    config_path = args.config

    if command == "rendezvous":
        from bruijn_share.sockets import run_rendezvous

        asyncio.run(run_rendezvous(args.port, args.host))
        return EXIT_OK

    if command == "node":
        rendezvous = get_rendezvous_address(args.rendezvous, config_path)
        if rendezvous is None:
            raise UsageError("node needs --rendezvous HOST:PORT or $P2P_RENDEZVOUS")
        split_address(rendezvous)
        from bruijn_share.sockets import run_node

        shares = get_share_dirs(config_path)
        shares += [p.resolve() for p in args.share if p.resolve() not in shares]
        download_dir = get_download_dir(config_path)
        download_dir.mkdir(parents=True, exist_ok=True)
        data_dir = args.data_dir or get_data_dir(config_path)
        data_dir.mkdir(parents=True, exist_ok=True)
        asyncio.run(run_node(rendezvous, args.port, host=args.host, control_port=args.control_port,
                             data_dir=data_dir, share_dirs=shares, download_dir=download_dir,
                             author=get_author(config_path), config=NodeConfig()))
        return EXIT_OK

    if command == "share":
        add_share_dir(args.directory.resolve(), config_path)
        console.print(f"sharing [bold]{args.directory.resolve()}[/]")
        return EXIT_OK

    if command == "sim":
        result = do_sim(args.preset, args.nodes, args.seed, args.out, args.crash, args.leave_prob,
                        not args.no_batching)
        print_metrics(result["summary"])
        print_degree_histogram(result["histogram"])
        if result["out"]:
            console.print(f"metrics written to [bold]{result['out']}[/]")
        return EXIT_OK

    if command == "route":
        print_route(do_route(args.source, args.target, args.word))
        return EXIT_OK

    if command == "keywords":
        data_dir = args.data_dir or get_data_dir(config_path)
        print_keywords(do_keywords(data_dir, args.path, args.words))
        return EXIT_OK

    if command == "forum":
        data_dir = args.data_dir or get_data_dir(config_path)
        if args.forum_command == "thread":
            print_thread(do_thread(data_dir, args.post_id))
        elif args.forum_command == "list":
            print_posts(do_list_posts(data_dir, args.announcements, args.limit),
                        title="Announcements" if args.announcements else "Posts")
        elif args.forum_command == "pending":
            print_posts(do_pending(data_dir), title="Pending comments")
        else:
            raise UsageError("forum needs a subcommand: thread, list or pending")
        return EXIT_OK

    if command == "search":
        print_search_results(do_search(args.control_port, args.query, args.wait))
    elif command == "get":
        print_holders(do_get(args.control_port, args.file_hash, args.download, args.wait))
    elif command == "post":
        print_result(_control(args.control_port, MsgType.CTRL_POST, {
            "title": args.title, "text": args.text, "fileId": args.file_id, "announcement": args.announcement}))
    elif command == "comment":
        print_result(_control(args.control_port, MsgType.CTRL_COMMENT, {"replyTo": args.reply_to, "text": args.text}))
    elif command == "annotate":
        payload = {"kind": args.kind, "fields": annotation_fields(args), "fileId": args.file_id, "text": args.text}
        if args.title:
            payload["title"] = args.title
        print_result(_control(args.control_port, MsgType.CTRL_ANNOTATE, payload))
    elif command == "status":
        print_node_status(_control(args.control_port, MsgType.CTRL_STATUS, {}))
    else:
        raise UsageError("no command given; see --help")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    """Entry point for the CLI; returns 0, 1 on bad input, 2 on runtime failure."""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        return _dispatch(args)
    except ValueError as exc:
        print_error(str(exc))
        if args.command is None:
            parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_OK
    except (OSError, RuntimeError) as exc:
        print_error(str(exc))
        return EXIT_RUNTIME
