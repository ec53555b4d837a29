"""Rich terminal display for bruijn-share."""

from __future__ import annotations

import logging

from rich import box
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.panel import Panel
from rich.table import Table
from rich.tree import Tree

console = Console()
err_console = Console(stderr=True)

_LEVELS = {0: logging.WARNING, 1: logging.INFO}


def configure_logging(verbose: int = 0) -> None:
    """Route the package loggers through rich on stderr; -v for INFO, -vv for DEBUG."""
    level = _LEVELS.get(verbose, logging.DEBUG)
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=err_console, show_path=False, rich_tracebacks=True)],
        force=True,
    )


def format_number(n: int) -> str:
    """Format large numbers: 421543 -> '421.5K', 1200 -> '1,200', 1234567 -> '1.2M'."""
    if n >= 1_000_000:
        return f"{n / 1_000_000:.1f}M"
    if n >= 10_000:
        return f"{n / 1_000:.1f}K"
    return f"{n:,}"


def format_size(size: int) -> str:
    for unit in ("B", "KiB", "MiB", "GiB"):
        if size < 1024 or unit == "GiB":
            return f"{size:.0f} {unit}" if unit == "B" else f"{size:.1f} {unit}"
        size /= 1024
    return f"{size} B"


def print_error(message: str) -> None:
    err_console.print(f"[bold red]error:[/] {message}")


def print_search_results(data: dict) -> None:
    """Ranked search results; each row has matched, holders, file name and hash."""
    results = data.get("results", [])
    keywords = ", ".join(data.get("keywords", []))
    if not results:
        console.print(Panel(f"\n  No files matched [bold]{keywords}[/].\n", title="[bold]Search[/]",
                            box=box.ROUNDED, border_style="grey50", width=60))
        return
    table = Table(title=f"Results for {keywords}", box=box.ROUNDED, show_header=True, header_style="bold")
    table.add_column("#", justify="right", style="dim")
    table.add_column("File", style="bold")
    table.add_column("Size", justify="right")
    table.add_column("Matched", justify="right")
    table.add_column("Holders", justify="right")
    table.add_column("Hash", style="cyan", no_wrap=True)
    for i, result in enumerate(results, start=1):
        table.add_row(
            str(i),
            result.get("fileName", "?"),
            format_size(int(result.get("fileSize", 0))),
            f"{len(result.get('matched', []))}/{len(data.get('keywords', []))}",
            str(len(result.get("holders", []))),
            result.get("fileHash", ""),
        )
    console.print(table)


def print_holders(data: dict) -> None:
    holders = data.get("holders", [])
    file_hash = data.get("fileHash", "")
    lines = ["", f"  Hash:     {file_hash}", f"  Holders:  {len(holders)}"]
    for holder in holders:
        lines.append(f"    {holder}")
    if data.get("path"):
        lines.append("")
        lines.append(f"  [green]Saved to[/] {data['path']}")
    lines.append("")
    console.print(Panel("\n".join(lines), title="[bold]File[/]", box=box.ROUNDED, border_style="cyan", width=72))


def print_metrics(summary: dict) -> None:
    """One row per summary metric, in export order."""
    table = Table(title=f"{summary.get('preset', '')} experiment", box=box.ROUNDED, header_style="bold")
    table.add_column("Metric", style="bold")
    table.add_column("Value", justify="right")
    for name, value in summary.items():
        if isinstance(value, float):
            shown = f"{value:.4f}"
        elif isinstance(value, int):
            shown = format_number(value)
        else:
            shown = str(value)
        table.add_row(name, shown)
    console.print(table)


def print_degree_histogram(histogram: dict[int, int], width: int = 40) -> None:
    if not histogram:
        return
    peak = max(histogram.values())
    table = Table(title="Out-degree distribution", box=box.SIMPLE, header_style="bold")
    table.add_column("Degree", justify="right")
    table.add_column("Nodes", justify="right")
    table.add_column("")
    for degree in sorted(histogram):
        count = histogram[degree]
        bar = "█" * max(1, round(count / peak * width))
        table.add_row(str(degree), format_number(count), f"[deep_sky_blue1]{bar}[/]")
    console.print(table)


def print_route(data: dict) -> None:
    labels = data.get("path", [])
    console.print(f"[bold]{data.get('source')}[/] -> [bold]{data.get('target')}[/] "
                  f"([cyan]{max(len(labels) - 1, 0)}[/] hops)")
    console.print("  " + " -> ".join(labels))


def print_node_status(data: dict) -> None:
    state = data.get("state") or {}
    lines = [
        "",
        f"  Phase:     {data.get('phase')}",
        f"  Address:   {state.get('address', '-')}",
        f"  Node id:   {state.get('nodeId', '-')}",
        f"  Zone:      {state.get('zone', '-')}",
        f"  Outgoing:  {len(state.get('outgoing', []))}",
        f"  Incoming:  {len(state.get('incoming', []))}",
        f"  Keys held: {format_number(data.get('keys', 0))}",
        f"  Records:   {format_number(data.get('records', 0))}",
        f"  Shared:    {format_number(data.get('shared', 0))}",
        "",
    ]
    console.print(Panel("\n".join(lines), title="[bold]Node[/]", box=box.ROUNDED, border_style="green", width=60))


def _label(record: dict) -> str:
    if record.get("kind") == "post":
        head = f"[bold]{record.get('title', '')}[/]"
    else:
        head = "[dim]reply[/]"
    return f"{head} [dim]{record.get('author')} {record.get('id', '')[:10]}[/]\n{record.get('text', '')}"


def print_thread(thread: dict) -> None:
    """A post and its comment tree, as stored under ``replies``."""
    tree = Tree(_label(thread))

    def attach(branch: Tree, node: dict) -> None:
        for child in node.get("replies", []):
            attach(branch.add(_label(child)), child)

    attach(tree, thread)
    console.print(tree)
    for annotation in thread.get("annotations", []):
        props = annotation.get("properties", {})
        where = ", ".join(f"{k}={v}" for k, v in props.items() if k != "kind")
        text = escape(annotation.get("text", ""))
        console.print(f"  [magenta]{props.get('kind', '?')}[/] {escape(where)} [dim]{annotation.get('author')}[/] {text}")


def print_posts(posts: list[dict], title: str = "Posts") -> None:
    table = Table(title=title, box=box.ROUNDED, header_style="bold")
    table.add_column("Id", style="cyan", no_wrap=True)
    table.add_column("Title", style="bold")
    table.add_column("Author")
    table.add_column("File")
    for post in posts:
        table.add_row(post["id"][:12], post.get("title", ""), post.get("author", ""), post.get("fileId", "0"))
    console.print(table)


def print_keywords(meta: dict) -> None:
    console.print(f"[bold]{meta.get('path')}[/]")
    console.print(f"  manual: {', '.join(meta.get('manual', [])) or '-'}")
    console.print(f"  auto:   {', '.join(meta.get('keywords', [])[:20]) or '-'}")


def print_result(data: dict) -> None:
    """Generic acknowledgement for post, comment and annotate."""
    if data.get("postId") or data.get("id"):
        console.print(f"[green]stored[/] {data.get('postId') or data.get('id')}")
    if data.get("annotation"):
        annotation = data["annotation"]
        console.print(f"annotation {annotation.get('id', '')[:12]} on file {annotation.get('fileId')}")
