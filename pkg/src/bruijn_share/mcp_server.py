"""MCP server for bruijn-share.

Exposes overlay arithmetic, small experiments and the local node as MCP tools.
Run via: python3 -m bruijn_share.mcp_server
"""
from __future__ import annotations

from typing import Any

from mcp.server.fastmcp import FastMCP

from bruijn_share.config import DEFAULT_CONTROL_PORT
from bruijn_share.idspace import (
    DEFAULT_RING,
    LabelFormatError,
    UnsupportedRingError,
    has_edge,
    label_from_key,
    parse_zone,
    routing_path as _routing_path,
    sha1_hex,
)
from bruijn_share.wire import MsgType

mcp = FastMCP(name="bruijn-share")

MAX_EXPERIMENT_NODES = 2000


@mcp.tool()
def label_for_key(key: str, is_word: bool = False) -> dict[str, Any]:
    """Ring label that owns a 40-hex-digit key, or the key of a keyword when ``is_word`` is set."""
    digest = sha1_hex(key.lower()) if is_word else key.lower()
    try:
        label = label_from_key(digest)
    except (ValueError, UnsupportedRingError) as exc:
        return {"error": str(exc)}
    return {"key": digest, "label": DEFAULT_RING.render(label)}


@mcp.tool()
def routing_path(source: str, target: str) -> dict[str, Any]:
    """Substring-routing hop labels between two octal labels."""
    try:
        path = _routing_path(DEFAULT_RING.parse(source), DEFAULT_RING.parse(target))
    except LabelFormatError as exc:
        return {"error": str(exc)}
    labels = [DEFAULT_RING.render(label) for label in path]
    return {"source": labels[0], "target": labels[-1], "path": labels, "hops": len(labels) - 1}


@mcp.tool()
def zone_edge(zone_a: str, zone_b: str) -> dict[str, Any]:
    """Whether a zone "START-END" has an outgoing edge to another zone."""
    try:
        a = parse_zone(zone_a)
        b = parse_zone(zone_b)
    except LabelFormatError as exc:
        return {"error": str(exc)}
    return {"from": zone_a, "to": zone_b, "edge": has_edge(a, b), "reverse": has_edge(b, a)}


@mcp.tool()
def run_experiment(preset: str = "degree", nodes: int = 100, seed: int = 0) -> dict[str, Any]:
    """Run a small simulated experiment (degree, lookup or churn) and return its metrics."""
    from bruijn_share.sim import SimConfig
    from bruijn_share.sim import run_experiment as _run

    if nodes > MAX_EXPERIMENT_NODES:
        return {"error": f"at most {MAX_EXPERIMENT_NODES} nodes from here; use the sim command for more"}
    try:
        config = SimConfig(preset=preset, node_count=nodes, seed=seed)
    except ValueError as exc:
        return {"error": str(exc)}
    metrics = _run(config)
    histogram = {str(d): c for d, c in sorted(metrics.out_degree_histogram.items())}
    return {"summary": metrics.summary(), "histogram": histogram}


def _control(msg_type: MsgType, payload: dict[str, Any], port: int, timeout: float) -> dict[str, Any]:
    from bruijn_share.sockets import request

    try:
        return request(port, msg_type, payload, timeout)
    except OSError as exc:
        return {"error": f"no running node: {exc}"}


@mcp.tool()
def search(query: str, wait: float = 5.0, control_port: int = DEFAULT_CONTROL_PORT) -> dict[str, Any]:
    """Keyword search through the local node; results ranked by matched keywords then holders."""
    return _control(MsgType.CTRL_SEARCH, {"query": query, "wait": wait}, control_port, wait + 30)


@mcp.tool()
def node_status(control_port: int = DEFAULT_CONTROL_PORT) -> dict[str, Any]:
    """Phase, zone, neighbors and store sizes of the local node."""
    return _control(MsgType.CTRL_STATUS, {}, control_port, 10.0)


def main() -> None:
    mcp.run()


if __name__ == "__main__":
    main()
