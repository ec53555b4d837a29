"""asyncio stream transport: node server, rendezvous server and control client."""
from __future__ import annotations

import asyncio
import base64
import logging
import random
import signal
import time
from collections.abc import Callable
from pathlib import Path
from typing import Any

from bruijn_share.config import NodeConfig, split_address
from bruijn_share.db import Database
from bruijn_share.index import LocalIndex
from bruijn_share.node import Node
from bruijn_share.rendezvous import PRUNE_EVERY, RendezvousRegistry
from bruijn_share.search import DownloadError
from bruijn_share.wire import DecodeError, Envelope, MsgType, read_envelope, write_envelope

logger = logging.getLogger(__name__)

CONNECT_TIMEOUT = 5.0
CHUNK_TIMEOUT = 30.0
IDLE_TIMEOUT = 300.0

Inbox = Callable[[Envelope, asyncio.StreamWriter], None]


class SocketTransport:
    """One outbound connection per peer; every connection is read as well as written.

    A destination's queue and pump go away after ``idle_timeout`` seconds
    without traffic and come back on the next send.
    """

    def __init__(self, address: str, idle_timeout: float = IDLE_TIMEOUT) -> None:
        self.address = address
        self.inbox: Inbox | None = None
        self.idle_timeout = idle_timeout
        self._queues: dict[str, asyncio.Queue[Envelope | None]] = {}
        self._tasks: set[asyncio.Task] = set()
        self._readers: set[asyncio.Task] = set()
        self.stopped = asyncio.Event()

    def now(self) -> float:
        return time.time()

    def send(self, to: str, env: Envelope) -> None:
        if self.stopped.is_set():
            return
        queue = self._queues.get(to)
        if queue is None:
            queue = self._queues[to] = asyncio.Queue()
            self.spawn(self._pump(to, queue))
        queue.put_nowait(env)

    def call_later(self, delay: float, callback: Callable[[], None]) -> asyncio.TimerHandle:
        return asyncio.get_running_loop().call_later(delay, callback)

    def spawn(self, coro) -> None:
        task = asyncio.get_running_loop().create_task(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)

    def stop(self) -> None:
        if self.stopped.is_set():
            return
        self.stopped.set()
        for queue in self._queues.values():
            queue.put_nowait(None)
        self._queues.clear()
        try:
            current = asyncio.current_task()
        except RuntimeError:
            current = None
        for task in list(self._readers):
            if task is not current:
                task.cancel()

    async def wait_closed(self, timeout: float = CONNECT_TIMEOUT) -> None:
        """Give pumps a moment to flush what was queued before ``stop``."""
        current = asyncio.current_task()
        tasks = {t for t in self._tasks if t is not current}
        if tasks:
            await asyncio.wait(tasks, timeout=timeout)

    async def _pump(self, to: str, queue: asyncio.Queue[Envelope | None]) -> None:
        writer: asyncio.StreamWriter | None = None
        try:
            while True:
                try:
                    env = await asyncio.wait_for(queue.get(), self.idle_timeout)
                except asyncio.TimeoutError:
                    if queue.empty():
                        if self._queues.get(to) is queue:
                            del self._queues[to]
                        return
                    continue
                if env is None:
                    return
                try:
                    if writer is None or writer.is_closing():
                        host, port = split_address(to)
                        reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), CONNECT_TIMEOUT)
                        self.spawn(self.read_loop(reader, writer))
                    await write_envelope(writer, env)
                except (OSError, asyncio.TimeoutError, ValueError) as exc:
                    logger.debug("send %s to %s failed: %s", env.msg_type.value, to, exc)
                    writer = None
        finally:
            if writer is not None:
                writer.close()

    async def read_loop(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        """Feed every frame on a connection to the inbox until the peer hangs up."""
        task = asyncio.current_task()
        if task is not None:
            self._readers.add(task)
        try:
            while not self.stopped.is_set():
                env = await read_envelope(reader)
                if env is None:
                    break
                if self.inbox is not None:
                    self.inbox(env, writer)
        except DecodeError as exc:
            logger.warning("closing connection after bad frame: %s", exc)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            self._readers.discard(task)
            writer.close()

    async def fetch_chunk(self, holder: str, file_hash: str, index: int, chunk_size: int) -> bytes:
        host, port = split_address(holder)
        try:
            reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), CONNECT_TIMEOUT)
        except (OSError, asyncio.TimeoutError) as exc:
            raise DownloadError(f"cannot reach {holder}: {exc}") from exc
        try:
            await write_envelope(writer, Envelope(MsgType.CHUNK_REQ, self.address,
                                                  {"fileHash": file_hash, "index": index, "chunkSize": chunk_size}))
            reply = await asyncio.wait_for(read_envelope(reader), CHUNK_TIMEOUT)
        except (OSError, asyncio.TimeoutError, DecodeError) as exc:
            raise DownloadError(f"chunk {index} from {holder} failed: {exc}") from exc
        finally:
            writer.close()
        if reply is None or reply.msg_type != MsgType.CHUNK_DATA or "data" not in reply.payload:
            raise DownloadError(f"{holder} refused chunk {index}")
        return base64.b64decode(reply.payload["data"])


def _reply_on(writer: asyncio.StreamWriter) -> Callable[[Envelope], None]:
    def reply(env: Envelope) -> None:
        asyncio.get_running_loop().create_task(_write_and_close(writer, env))

    return reply


async def _write_and_close(writer: asyncio.StreamWriter, env: Envelope) -> None:
    try:
        await write_envelope(writer, env)
    except OSError as exc:
        logger.debug("control reply lost: %s", exc)
    finally:
        writer.close()


async def run_node(
    rendezvous: str,
    port: int,
    *,
    host: str = "127.0.0.1",
    control_port: int,
    data_dir: Path,
    share_dirs: list[Path],
    download_dir: Path,
    author: str,
    config: NodeConfig | None = None,
) -> None:
    """Serve the overlay until a graceful leave completes or the process is signalled twice."""
    config = config or NodeConfig()
    transport = SocketTransport(f"{host}:{port}")
    index = LocalIndex(data_dir / "index.ndjson")
    index.load()
    node = Node(transport, rendezvous, config=config, rng=random.Random(), store=Database(data_dir / "forum.db"),
                index=index, share_dirs=share_dirs, download_dir=download_dir, author=author, port=port)

    def inbox(env: Envelope, writer: asyncio.StreamWriter) -> None:
        if env.msg_type == MsgType.CHUNK_REQ:
            transport.spawn(write_envelope(writer, node.handle_request(env)))
            return
        node.handle(env)

    async def on_peer(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        await transport.read_loop(reader, writer)

    async def on_control(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            env = await read_envelope(reader)
        except DecodeError as exc:
            logger.warning("bad control frame: %s", exc)
            writer.close()
            return
        if env is None:
            writer.close()
            return
        node.handle_control(env, _reply_on(writer))

    transport.inbox = inbox
    server = await asyncio.start_server(on_peer, "0.0.0.0", port)
    control = await asyncio.start_server(on_control, "127.0.0.1", control_port)
    loop = asyncio.get_running_loop()

    def on_signal() -> None:
        if transport.stopped.is_set() or not node.begin_leave():
            transport.stop()

    for signum in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(signum, on_signal)
        except (NotImplementedError, RuntimeError):
            pass

    node.rescan()
    node.start()
    logger.info("node listening on %s, control on 127.0.0.1:%d", transport.address, control_port)
    try:
        await transport.stopped.wait()
        await transport.wait_closed()
    finally:
        server.close()
        control.close()
        node.store.close()


async def run_rendezvous(port: int, host: str = "0.0.0.0") -> None:
    registry = RendezvousRegistry()
    address = f"{host}:{port}"

    async def on_client(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        peer_host = writer.get_extra_info("peername")[0]
        try:
            while True:
                env = await read_envelope(reader)
                if env is None:
                    break
                declared = env.payload.get("port")
                observed = f"{peer_host}:{declared}" if declared else env.sender_address
                reply = registry.handle(env, observed, time.time(), address)
                if reply is not None:
                    await write_envelope(writer, reply)
        except (DecodeError, ConnectionError) as exc:
            logger.debug("rendezvous client %s dropped: %s", peer_host, exc)
        finally:
            writer.close()

    server = await asyncio.start_server(on_client, host, port)
    logger.info("rendezvous listening on %s", address)
    async with server:
        while True:
            await asyncio.sleep(PRUNE_EVERY)
            registry.prune(time.time())


async def control_request(control_port: int, msg_type: MsgType, payload: dict[str, Any],
                          timeout: float = 30.0) -> dict[str, Any]:
    """Send one request to the local node's control socket and return the result payload."""
    try:
        reader, writer = await asyncio.wait_for(asyncio.open_connection("127.0.0.1", control_port), CONNECT_TIMEOUT)
    except (OSError, asyncio.TimeoutError) as exc:
        raise ConnectionError(f"no node listening on control port {control_port}") from exc
    try:
        await write_envelope(writer, Envelope(msg_type, "control", payload))
        reply = await asyncio.wait_for(read_envelope(reader), timeout)
    finally:
        writer.close()
    if reply is None:
        raise ConnectionError("node closed the control connection without answering")
    return reply.payload


def request(control_port: int, msg_type: MsgType, payload: dict[str, Any], timeout: float = 30.0) -> dict[str, Any]:
    return asyncio.run(control_request(control_port, msg_type, payload, timeout))
