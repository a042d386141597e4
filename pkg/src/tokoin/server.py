"""Socket transports for the node: peer wire, client API, HTTP surface.

One asyncio event loop hosts three faces of the same NodeCore:

- peer protocol: newline-delimited canonical documents over TCP, opened with
  a hello line; carries gossip, consensus traffic, and block sync.
- client protocol (same listener): a request document per connection;
  ``subscribe`` turns the connection into an ordered commit-event stream.
- HTTP (separate port): GET /tokoin/{id}, GET /audit/{id}, POST /tx,
  GET /events?from=N (server-sent events), GET /status, plus optional static
  serving for the operator console. CORS is wide open; this is a LAN tool.

All core access is serialized through one lock: the node processes its
inbox in a single ordered context no matter how many sockets feed it.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import os
import sys
from pathlib import Path

from .consensus import Genesis
from .crypto import KeyPair
from .encoding import canonical_decode, canonical_encode
from .node import NodeCore, Send, Timer

MAX_LINE = 16 * 1024 * 1024


def _wire(doc: dict) -> bytes:
    return canonical_encode(doc) + b"\n"


class NodeServer:
    def __init__(
        self,
        core: NodeCore,
        listen: str,
        peer_addrs: list[str],
        http_listen: str | None = None,
        console_dir: str | None = None,
    ):
        self.core = core
        self.listen_host, self.listen_port = _split_addr(listen)
        self.http_addr = _split_addr(http_listen) if http_listen else None
        self.console_dir = Path(console_dir) if console_dir else None
        self.peer_addrs = list(peer_addrs)
        self.loop: asyncio.AbstractEventLoop | None = None
        self.lock = asyncio.Lock()
        self.peer_writers: dict[str, asyncio.StreamWriter] = {}
        self.subscribers: list[tuple[str | None, asyncio.Queue]] = []
        self.sse_queues: list[asyncio.Queue] = []
        self._servers: list[asyncio.base_events.Server] = []
        self._tasks: set[asyncio.Task] = set()
        core.commit_listeners.append(self._on_commit)

    # -- lifecycle ---------------------------------------------------------------

    async def start(self) -> None:
        self.loop = asyncio.get_running_loop()
        server = await asyncio.start_server(self._serve_conn, self.listen_host, self.listen_port)
        self._servers.append(server)
        if self.listen_port == 0:
            self.listen_port = server.sockets[0].getsockname()[1]
        if self.http_addr is not None:
            http = await asyncio.start_server(self._serve_http, *self.http_addr)
            self._servers.append(http)
            if self.http_addr[1] == 0:
                self.http_addr = (self.http_addr[0], http.sockets[0].getsockname()[1])
        for addr in self.peer_addrs:
            self._spawn(self._peer_dialer(addr))
        async with self.lock:
            self._dispatch(self.core.start())

    async def stop(self) -> None:
        for server in self._servers:
            server.close()
        for task in list(self._tasks):
            task.cancel()
        for writer in list(self.peer_writers.values()):
            writer.close()

    def _spawn(self, coro) -> asyncio.Task:
        task = self.loop.create_task(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return task

    # -- core action dispatch (always under self.lock) -------------------------------

    def _dispatch(self, actions) -> None:
        for act in actions:
            if isinstance(act, Send):
                payload = _wire(act.doc)
                targets = (
                    list(self.peer_writers.values())
                    if act.dst is None
                    else [w for pid, w in self.peer_writers.items() if pid == act.dst]
                )
                for writer in targets:
                    if not writer.is_closing():
                        writer.write(payload)
            elif isinstance(act, Timer):
                self.loop.call_later(act.delay_s, self._timer_cb, act.token)

    def _timer_cb(self, token) -> None:
        async def fire():
            async with self.lock:
                self._dispatch(self.core.on_timer(token))

        self._spawn(fire())

    def _on_commit(self, block) -> None:
        for event in self.core.block_events(block):
            for filt, queue in self.subscribers:
                if self.core.event_matches(event, filt):
                    queue.put_nowait(event)
            for queue in self.sse_queues:
                queue.put_nowait(event)

    # -- peer side ----------------------------------------------------------------------

    async def _peer_dialer(self, addr: str) -> None:
        host, port = _split_addr(addr)
        while True:
            try:
                reader, writer = await asyncio.open_connection(host, port)
                writer.write(_wire({"t": "hello", "node_id": self.core.node_id}))
                await writer.drain()
                await self._peer_loop(f"{host}:{port}", reader, writer)
            except (ConnectionError, OSError):
                pass
            await asyncio.sleep(0.5)

    async def _peer_loop(self, peer_id: str, reader: asyncio.StreamReader,
                         writer: asyncio.StreamWriter) -> None:
        self.peer_writers[peer_id] = writer
        try:
            # ask for anything we missed while disconnected, and hand over
            # whatever is pending locally (a light node cannot commit it)
            async with self.lock:
                writer.write(_wire({"t": "want_blocks", "from": self.core.state.height + 1}))
                for doc in self.core.mempool_docs():
                    writer.write(_wire(doc))
            while True:
                line = await reader.readline()
                if not line:
                    return
                if len(line) > MAX_LINE:
                    return
                try:
                    doc = canonical_decode(line)
                except ValueError:
                    continue
                async with self.lock:
                    self._dispatch(self.core.receive(peer_id, doc))
                    await _drain_all(self.peer_writers)
        finally:
            self.peer_writers.pop(peer_id, None)
            writer.close()

    # -- client side ---------------------------------------------------------------------

    async def _serve_conn(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            line = await reader.readline()
            if not line or len(line) > MAX_LINE:
                return
            try:
                doc = canonical_decode(line)
            except ValueError:
                writer.write(_wire({"ok": False, "code": "MALFORMED"}))
                return
            if doc.get("t") == "hello":
                peer_id = str(doc.get("node_id", "peer"))
                await self._peer_loop(f"in:{peer_id}:{id(writer)}", reader, writer)
                return
            if doc.get("kind") == "subscribe":
                await self._serve_subscription(doc, writer)
                return
            async with self.lock:
                resp, actions = self.core.handle_client(doc)
                self._dispatch(actions)
            writer.write(_wire(resp))
            await writer.drain()
        except (ConnectionError, OSError):
            pass
        finally:
            writer.close()

    async def _serve_subscription(self, doc: dict, writer: asyncio.StreamWriter) -> None:
        filt = doc.get("filter")
        from_height = int(doc.get("from", 0))
        queue: asyncio.Queue = asyncio.Queue()
        async with self.lock:
            backlog = self.core.replay_events(filt, from_height)
            self.subscribers.append((filt, queue))
        try:
            for event in backlog:
                writer.write(_wire(event))
            await writer.drain()
            while True:
                event = await queue.get()
                if event["height"] < from_height:
                    continue
                writer.write(_wire(event))
                await writer.drain()
        except (ConnectionError, OSError):
            pass
        finally:
            self.subscribers.remove((filt, queue))

    # -- http side ------------------------------------------------------------------------

    async def _serve_http(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while await self._serve_one_http(reader, writer):
                pass
        except (ConnectionError, OSError, asyncio.IncompleteReadError):
            pass
        finally:
            writer.close()

    async def _serve_one_http(self, reader, writer) -> bool:
        request_line = await reader.readline()
        if not request_line:
            return False
        try:
            method, target, _version = request_line.decode("latin1").split()
        except ValueError:
            return False
        headers: dict[str, str] = {}
        while True:
            line = await reader.readline()
            if line in (b"\r\n", b"\n", b""):
                break
            name, _, value = line.decode("latin1").partition(":")
            headers[name.strip().lower()] = value.strip()
        body = b""
        length = int(headers.get("content-length", 0) or 0)
        if length:
            body = await reader.readexactly(length)

        path, _, query = target.partition("?")
        params = _parse_query(query)
        if method == "OPTIONS":
            _http_response(writer, 204, b"", content_type=None)
            return True
        if method == "GET" and path.startswith("/tokoin/"):
            resp = await self._client_doc({"kind": "query_tokoin", "id": path[len("/tokoin/"):]})
            _http_json(writer, 200, resp)
        elif method == "GET" and path.startswith("/audit/"):
            resp = await self._client_doc({"kind": "audit_trail", "id": path[len("/audit/"):]})
            _http_json(writer, 200, resp)
        elif method == "GET" and path == "/status":
            doc = {"kind": "status"}
            if "pk" in params:
                doc["pk"] = params["pk"]
            _http_json(writer, 200, await self._client_doc(doc))
        elif method == "POST" and path == "/tx":
            try:
                msg_doc = canonical_decode(body)
            except ValueError:
                _http_json(writer, 400, {"ok": False, "code": "MALFORMED"})
                return True
            resp = await self._client_doc({"kind": "submit_tx", "msg": msg_doc})
            _http_json(writer, 200 if resp.get("ok") else 400, resp)
        elif method == "GET" and path == "/events":
            await self._serve_sse(writer, int(params.get("from", 0)), params.get("filter"))
            return False
        elif method == "GET" and self.console_dir is not None:
            # console assets: anything the API routes above did not claim
            self._serve_static(writer, path)
        else:
            _http_json(writer, 404, {"ok": False, "code": "NOT_FOUND"})
        await writer.drain()
        return headers.get("connection", "").lower() != "close"

    async def _client_doc(self, doc: dict) -> dict:
        async with self.lock:
            resp, actions = self.core.handle_client(doc)
            self._dispatch(actions)
        return canonical_decode(canonical_encode(resp))

    async def _serve_sse(self, writer, from_height: int, filt: str | None) -> None:
        queue: asyncio.Queue = asyncio.Queue()
        async with self.lock:
            backlog = self.core.replay_events(filt, from_height)
            self.sse_queues.append(queue)
        try:
            writer.write(
                b"HTTP/1.1 200 OK\r\ncontent-type: text/event-stream\r\n"
                b"cache-control: no-cache\r\naccess-control-allow-origin: *\r\n"
                b"connection: keep-alive\r\n\r\n"
            )
            for event in backlog:
                writer.write(_sse_event(event))
            await writer.drain()
            while True:
                event = await queue.get()
                if filt and not self.core.event_matches(event, filt):
                    continue
                if event["height"] < from_height:
                    continue
                writer.write(_sse_event(event))
                await writer.drain()
        except (ConnectionError, OSError):
            pass
        finally:
            self.sse_queues.remove(queue)
            writer.close()

    def _serve_static(self, writer, path: str) -> None:
        if path.startswith("/console"):
            path = path[len("/console"):]
        rel = path.lstrip("/") or "index.html"
        target = (self.console_dir / rel).resolve()
        if not str(target).startswith(str(self.console_dir.resolve())) or not target.is_file():
            _http_json(writer, 404, {"ok": False, "code": "NOT_FOUND"})
            return
        ctype = {
            ".html": "text/html", ".js": "text/javascript", ".mjs": "text/javascript",
            ".css": "text/css", ".json": "application/json", ".png": "image/png",
            ".svg": "image/svg+xml",
        }.get(target.suffix, "application/octet-stream")
        _http_response(writer, 200, target.read_bytes(), content_type=ctype)


def _sse_event(event: dict) -> bytes:
    return b"data: " + canonical_encode(event) + b"\n\n"


def _http_response(writer, status: int, body: bytes, content_type: str | None = "application/json") -> None:
    reason = {200: "OK", 204: "No Content", 400: "Bad Request", 404: "Not Found"}.get(status, "OK")
    head = [f"HTTP/1.1 {status} {reason}"]
    if content_type:
        head.append(f"content-type: {content_type}")
    head += [
        f"content-length: {len(body)}",
        "access-control-allow-origin: *",
        "access-control-allow-methods: GET, POST, OPTIONS",
        "access-control-allow-headers: content-type",
    ]
    writer.write(("\r\n".join(head) + "\r\n\r\n").encode("latin1") + body)


def _http_json(writer, status: int, doc: dict) -> None:
    _http_response(writer, status, canonical_encode(doc))


async def _drain_all(writers: dict) -> None:
    for writer in list(writers.values()):
        if not writer.is_closing():
            try:
                await writer.drain()
            except (ConnectionError, OSError):
                pass


def _split_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def _parse_query(query: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for part in query.split("&"):
        if "=" in part:
            key, value = part.split("=", 1)
            out[key] = value
    return out


# ---------------------------------------------------------------------------
# node binary


def load_genesis(path: str) -> Genesis:
    return Genesis.from_doc(json.loads(Path(path).read_text()))


def load_keypair(path: str) -> KeyPair:
    doc = json.loads(Path(path).read_text())
    return KeyPair(pk=bytes.fromhex(doc["pk"]), sk=bytes.fromhex(doc["sk"]))


def build_core(args) -> NodeCore:
    config: dict = {}
    if args.config:
        config = json.loads(Path(args.config).read_text())
    genesis_path = args.genesis or config.get("genesis")
    if not genesis_path:
        sys.exit("a genesis file is required (--genesis or config)")
    genesis = load_genesis(genesis_path)
    key_file = args.key or config.get("key_file")
    keypair = load_keypair(key_file) if key_file else None
    data_dir = os.environ.get("TOKOIN_DATA_DIR") or config.get("data_dir")
    chain_path = None
    if data_dir:
        Path(data_dir).mkdir(parents=True, exist_ok=True)
        chain_path = str(Path(data_dir) / "chain.blocks")
    return NodeCore(
        node_id=config.get("node_id", f"node-{os.getpid()}"),
        genesis=genesis,
        keypair=keypair,
        validator=bool(args.validator or config.get("validator")),
        light=bool(args.light or config.get("light")),
        chain_path=chain_path,
    ), config


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="tokoin-node", description="run a ledger node")
    parser.add_argument("--config", help="node config document (json)")
    parser.add_argument("--genesis", help="genesis document path")
    parser.add_argument("--listen", help="peer/client listen address host:port")
    parser.add_argument("--http", help="http listen address host:port")
    parser.add_argument("--key", help="validator key file")
    parser.add_argument("--validator", action="store_true", help="participate in consensus")
    parser.add_argument("--light", action="store_true", help="follow the chain without voting")
    parser.add_argument("--console-dir", help="serve the operator console from this directory")
    parser.add_argument("--aco", nargs=2, metavar=("DEVICE_KEY", "SCENARIO_CONFIG"),
                        help="attach a simulated access-control object (implies --light)")
    args = parser.parse_args(argv)
    if args.aco:
        args.light = True

    core, config = build_core(args)
    listen = args.listen or config.get("listen") or "127.0.0.1:0"
    peers = config.get("peers", [])

    async def run():
        server = NodeServer(
            core,
            listen=listen,
            peer_addrs=peers,
            http_listen=args.http or config.get("http"),
            console_dir=args.console_dir or config.get("console_dir"),
        )
        await server.start()
        print(f"node {core.node_id} listening on {server.listen_host}:{server.listen_port}"
              + (f", http {server.http_addr[0]}:{server.http_addr[1]}" if server.http_addr else ""),
              flush=True)
        if args.aco:
            from .acodaemon import run_aco

            await run_aco(server, args.aco[0], args.aco[1])
        else:
            await asyncio.Event().wait()

    try:
        asyncio.run(run())
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
