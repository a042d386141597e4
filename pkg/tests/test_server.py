import asyncio
import json
import socket
import threading
import time
import urllib.request

import pytest

from tokoin.accumulator import acc_build
from tokoin.client import Participant, TcpNodeClient
from tokoin.consensus import Genesis, Validator
from tokoin.crypto import gen_keypair
from tokoin.encoding import canonical_encode
from tokoin.node import NodeCore
from tokoin.scenario import DEFAULT_POLICY_TEMPLATE, build_policy
from tokoin.server import NodeServer
from tokoin.trajectory import default_region_mask
from tokoin.vision import mask_ref

from conftest import keypair_for


class LiveNet:
    """Real-socket validators in a background event loop."""

    def __init__(self, n=3):
        self.loop = asyncio.new_event_loop()
        self.thread = threading.Thread(target=self.loop.run_forever, daemon=True)
        self.thread.start()
        keys = [gen_keypair(seed=bytes([120 + i]) + bytes(31)) for i in range(n)]
        self.genesis = Genesis(chain_id="live", validators=tuple(Validator(k.pk, 1) for k in keys))
        self.servers = []
        for i, key in enumerate(keys):
            core = NodeCore(node_id=f"s{i}", genesis=self.genesis, keypair=key, validator=True)
            server = NodeServer(core, listen="127.0.0.1:0", peer_addrs=[],
                                http_listen="127.0.0.1:0")
            self.run(server.start())
            self.servers.append(server)
        for i, server in enumerate(self.servers):
            for j, other in enumerate(self.servers):
                if i != j:
                    self.run_sync(lambda s=server, o=other: s._spawn(
                        s._peer_dialer(f"127.0.0.1:{o.listen_port}")))
        time.sleep(0.4)

    def run(self, coro, timeout=15):
        return asyncio.run_coroutine_threadsafe(coro, self.loop).result(timeout)

    def run_sync(self, fn):
        done = threading.Event()
        self.loop.call_soon_threadsafe(lambda: (fn(), done.set()))
        done.wait(5)

    @property
    def addr(self):
        return f"127.0.0.1:{self.servers[0].listen_port}"

    @property
    def http(self):
        host, port = self.servers[0].http_addr
        return f"http://{host}:{port}"

    def stop(self):
        for server in self.servers:
            self.run(server.stop())
        async def _settle():
            await asyncio.sleep(0.1)
        self.run(_settle())
        self.loop.call_soon_threadsafe(self.loop.stop)
        self.thread.join(timeout=5)


@pytest.fixture(scope="module")
def live(small_group_setup):
    net = LiveNet(3)
    owner = Participant(keypair_for(9100))
    courier = Participant(keypair_for(9101))
    group, wits = acc_build(small_group_setup, [courier.pk])
    policy = build_policy(
        group, "front-door", mask_ref(default_region_mask()),
        {**DEFAULT_POLICY_TEMPLATE, "window_s": 10_000_000.0},
        start_s=0,
    )
    client = TcpNodeClient(net.addr)
    for participant in (owner, courier):
        resp = client.request({"kind": "submit_tx", "msg": participant.register().to_doc()})
        assert resp["ok"], resp
    for participant in (owner, courier):
        _wait_registered(client, participant.pk.hex())
    yield {
        "net": net, "client": client, "owner": owner, "courier": courier,
        "policy": policy, "wits": wits, "group": group,
    }
    net.stop()


def _wait_height(client, h, timeout=15):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if client.request({"kind": "status"}).get("height", -1) >= h:
            return
        time.sleep(0.02)
    raise TimeoutError(f"height {h} not reached")


def _wait_registered(client, pk_hex, timeout=15):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if client.request({"kind": "status", "pk": pk_hex}).get("registered"):
            return
        time.sleep(0.02)
    raise TimeoutError(f"{pk_hex[:12]} never registered")


def _wait_commit(client, msg, timeout=15):
    deadline = time.monotonic() + timeout
    cid = msg.cid
    while time.monotonic() < deadline:
        trail = client.request({"kind": "audit_trail", "id": cid})["trail"]
        if any(e["tx"]["msg"]["sig"] == msg.sig.hex() for e in trail["entries"]):
            return trail
        time.sleep(0.02)
    raise TimeoutError("commit not observed")


def test_status_over_tcp(live):
    status = live["client"].request({"kind": "status"})
    assert status["ok"] and status["validator"]


def test_submit_query_audit_roundtrip(live):
    owner, client = live["owner"], live["client"]
    msg = owner.create(1, live["policy"])
    resp = client.request({"kind": "submit_tx", "msg": msg.to_doc()})
    assert resp["ok"]
    _wait_commit(client, msg)
    q = client.request({"kind": "query_tokoin", "id": msg.cid})
    assert q["status"] == "valid"
    trail = client.request({"kind": "audit_trail", "id": msg.cid})["trail"]
    assert [e["tx"]["msg"]["op"] for e in trail["entries"]] == ["create"]


def test_subscription_stream_delivers_commites_in_order(live):
    owner, courier, client = live["owner"], live["courier"], live["client"]
    msg = owner.create(2, live["policy"])
    client.request({"kind": "submit_tx", "msg": msg.to_doc()})
    _wait_commit(client, msg)
    events = []
    for event in client.subscribe(filt=msg.cid, from_height=0, timeout_s=10):
        events.append(event)
        if event["op"] == "transfer":
            break
        if event["op"] == "create":
            transfer = owner.transfer(owner.pk, 2, courier.pk)
            client.request({"kind": "submit_tx", "msg": transfer.to_doc()})
    assert [e["op"] for e in events] == ["create", "transfer"]
    heights = [e["height"] for e in events]
    assert heights == sorted(heights)


def test_http_status_and_tokoin(live):
    with urllib.request.urlopen(f"{live['net'].http}/status", timeout=10) as resp:
        doc = json.loads(resp.read())
        assert doc["ok"] and doc["height"] >= 0
        assert resp.headers["access-control-allow-origin"] == "*"
    owner = live["owner"]
    msg = owner.create(3, live["policy"])
    req = urllib.request.Request(
        f"{live['net'].http}/tx", data=canonical_encode(msg.to_doc()),
        headers={"content-type": "application/json"}, method="POST",
    )
    with urllib.request.urlopen(req, timeout=10) as resp:
        assert json.loads(resp.read())["ok"]
    _wait_commit(live["client"], msg)
    with urllib.request.urlopen(f"{live['net'].http}/tokoin/{msg.cid}", timeout=10) as resp:
        doc = json.loads(resp.read())
        assert doc["status"] == "valid"
    with urllib.request.urlopen(f"{live['net'].http}/audit/{msg.cid}", timeout=10) as resp:
        trail = json.loads(resp.read())["trail"]
        assert trail["found"]


def test_http_rejects_bad_tx(live):
    req = urllib.request.Request(
        f"{live['net'].http}/tx", data=b"{\"msg\":{}}",
        headers={"content-type": "application/json"}, method="POST",
    )
    try:
        urllib.request.urlopen(req, timeout=10)
        assert False, "expected 400"
    except urllib.error.HTTPError as err:
        assert err.code == 400
        assert not json.loads(err.read())["ok"]


def test_sse_event_stream_replays_history(live):
    owner = live["owner"]
    msg = owner.create(4, live["policy"])
    live["client"].request({"kind": "submit_tx", "msg": msg.to_doc()})
    _wait_commit(live["client"], msg)
    host, port = live["net"].servers[0].http_addr
    with socket.create_connection((host, port), timeout=10) as sock:
        sock.sendall(f"GET /events?from=0&filter={msg.cid} HTTP/1.1\r\n"
                     f"host: {host}\r\n\r\n".encode())
        sock.settimeout(10)
        buf = b""
        while b"\n\n" not in buf.split(b"\r\n\r\n", 1)[-1]:
            buf += sock.recv(65536)
    head, body = buf.split(b"\r\n\r\n", 1)
    assert b"text/event-stream" in head
    payload = [line for line in body.split(b"\n") if line.startswith(b"data: ")][0]
    event = json.loads(payload[len(b"data: "):])
    assert event["cid"] == msg.cid and event["op"] == "create"
