"""Configuration for bruijn-share.

Reads and writes ~/.bruijn-share/config.json for operator settings (share
directories, data directory, rendezvous address, author name). Protocol
timings live in NodeConfig and are not persisted.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

DEFAULT_CONFIG_PATH: Path = Path.home() / ".bruijn-share" / "config.json"
DEFAULT_DATA_DIR: Path = Path.home() / ".bruijn-share"
DEFAULT_DOWNLOAD_DIR: Path = Path.home() / "Downloads" / "bruijn-share"
RENDEZVOUS_ENV = "P2P_RENDEZVOUS"
DEFAULT_RENDEZVOUS_PORT = 7000
DEFAULT_NODE_PORT = 7100
DEFAULT_CONTROL_PORT = 7199


@dataclass(frozen=True)
class NodeConfig:
    """Protocol timers (seconds of virtual or wall time) and size limits."""

    join_lock: float = 10.0
    join_timeout: float = 10.0
    join_retry_backoff: float = 1.0
    leave_timeout: float = 5.0
    max_leave_restarts: int = 5
    keep_alive_interval: float = 120.0
    death_threshold: float = 300.0
    failure_sweep_interval: float = 60.0
    refresh_interval: float = 1800.0
    expiry_sweep_interval: float = 600.0
    key_ttl: float = 3600.0
    rescan_interval: float = 1800.0
    gossip_interval: float = 60.0
    reconcile_interval: float = 1800.0
    reconcile_after_join: float = 5.0
    reconcile_timeout: float = 10.0
    forum_window: float = 7 * 24 * 3600.0
    reconcile_chunk: int = 256
    reconcile_rounds: int = 10
    stall_retry: float = 1.0
    max_stalls: int = 3
    get_timeout: float = 10.0
    get_retries: int = 1
    rendezvous_refresh: float = 300.0
    peer_sample: int = 16
    batching: bool = True
    maintenance: bool = True


def load_config(config_path: Path | None = None) -> dict:
    """Load config from JSON file. Returns {} if file missing or invalid."""
    path = config_path or DEFAULT_CONFIG_PATH
    if not path.exists():
        return {}
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, OSError):
        return {}
    return data if isinstance(data, dict) else {}


def save_config(data: dict, config_path: Path | None = None) -> None:
    """Write config dict to JSON file. Creates parent dirs if needed."""
    path = config_path or DEFAULT_CONFIG_PATH
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def get_share_dirs(config_path: Path | None = None) -> list[Path]:
    """Configured share directories; the download directory is always first."""
    config = load_config(config_path)
    download_dir = Path(config.get("download_dir") or DEFAULT_DOWNLOAD_DIR)
    dirs = [download_dir]
    for raw in config.get("share_dirs", []):
        path = Path(raw)
        if path not in dirs:
            dirs.append(path)
    return dirs


def add_share_dir(directory: Path, config_path: Path | None = None) -> None:
    config = load_config(config_path)
    shares = list(config.get("share_dirs", []))
    if str(directory) not in shares:
        shares.append(str(directory))
    config["share_dirs"] = shares
    save_config(config, config_path)


def get_data_dir(config_path: Path | None = None) -> Path:
    raw = load_config(config_path).get("data_dir")
    return Path(raw) if raw else DEFAULT_DATA_DIR


def get_download_dir(config_path: Path | None = None) -> Path:
    raw = load_config(config_path).get("download_dir")
    return Path(raw) if raw else DEFAULT_DOWNLOAD_DIR


def get_author(config_path: Path | None = None) -> str:
    return load_config(config_path).get("author") or os.environ.get("USER", "anonymous")


def get_rendezvous_address(explicit: str | None = None, config_path: Path | None = None) -> str | None:
    """Flag, then $P2P_RENDEZVOUS, then the config file; None when unset."""
    if explicit:
        return explicit
    env = os.environ.get(RENDEZVOUS_ENV)
    if env:
        return env
    return load_config(config_path).get("rendezvous") or None


def split_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"address {address!r} must look like HOST:PORT")
    return host, int(port)
