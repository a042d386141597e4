"""Confirmation-latency benchmark over real localhost sockets.

Spins up n validator nodes in one process, each with its own TCP listener,
and measures wall time from submission to commit for every coin operation.
The redeem figure is the sum of the two on-chain legs (request and finalize);
the off-chain procedure monitoring between them is deliberately not counted.
"""

from __future__ import annotations

import asyncio
import statistics
import time
from dataclasses import dataclass, field

from .accumulator import acc_build, new_group
from .aco import AccessController, AcoConfig
from .client import Participant
from .consensus import Genesis, Validator
from .crypto import gen_keypair
from .encoding import canonical_decode, canonical_encode
from .node import NodeCore
from .scenario import build_policy, DEFAULT_POLICY_TEMPLATE
from .server import NodeServer
from .trajectory import background, default_region_mask, gen_trajectory
from .vision import StandardPattern, mask_ref

BENCH_OPS = ("create", "transfer", "modify", "revoke", "redeem")


@dataclass
class LatencyReport:
    n_nodes: int
    samples: dict[str, list[float]] = field(default_factory=dict)
    failed: bool = False

    def percentiles(self, op: str) -> dict[str, float]:
        data = sorted(self.samples.get(op, ()))
        if not data:
            return {}
        def pct(p: float) -> float:
            idx = min(len(data) - 1, max(0, round(p / 100 * (len(data) - 1))))
            return data[idx]
        return {
            "n": len(data),
            "median_ms": statistics.median(data) * 1000,
            "p90_ms": pct(90) * 1000,
            "p99_ms": pct(99) * 1000,
            "mean_ms": statistics.fmean(data) * 1000,
        }

    def to_doc(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "failed": self.failed,
            "ops": {op: self.percentiles(op) for op in self.samples},
        }

    def to_csv(self) -> str:
        lines = ["op,n,median_ms,p90_ms,p99_ms,mean_ms"]
        for op in BENCH_OPS:
            if op not in self.samples:
                continue
            p = self.percentiles(op)
            lines.append(
                f"{op},{p['n']},{p['median_ms']:.2f},{p['p90_ms']:.2f},"
                f"{p['p99_ms']:.2f},{p['mean_ms']:.2f}"
            )
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        header = f"{'op':<10}{'n':>6}{'median':>12}{'p90':>12}{'p99':>12}{'mean':>12}"
        rows = [header, "-" * len(header)]
        for op in BENCH_OPS:
            if op not in self.samples:
                continue
            p = self.percentiles(op)
            rows.append(
                f"{op:<10}{p['n']:>6}{p['median_ms']:>10.1f}ms{p['p90_ms']:>10.1f}ms"
                f"{p['p99_ms']:>10.1f}ms{p['mean_ms']:>10.1f}ms"
            )
        return "\n".join(rows)


class _BenchClient:
    """Socket client bound to one node; watches the event stream for commits."""

    def __init__(self, host: str, port: int):
        self.host = host
        self.port = port
        self.committed: dict[str, float] = {}
        self._reader = None
        self._writer = None

    async def connect_events(self) -> None:
        self._reader, self._writer = await asyncio.open_connection(self.host, self.port)
        self._writer.write(canonical_encode({"kind": "subscribe", "from": 0}) + b"\n")
        await self._writer.drain()
        asyncio.get_running_loop().create_task(self._pump())

    def close(self) -> None:
        if self._writer is not None and not self._writer.is_closing():
            self._writer.close()

    async def _pump(self) -> None:
        try:
            while True:
                line = await self._reader.readline()
                if not line:
                    return
                event = canonical_decode(line)
                self.committed[event["tx_hash"]] = time.perf_counter()
        except (ConnectionError, OSError, ValueError):
            return

    async def request(self, doc: dict) -> dict:
        reader, writer = await asyncio.open_connection(self.host, self.port)
        writer.write(canonical_encode(doc) + b"\n")
        await writer.drain()
        line = await reader.readline()
        writer.close()
        return canonical_decode(line)

    async def submit_and_time(self, msg, timeout_s: float = 30.0) -> float:
        tx_hash = msg.tx_hash().hex()
        t0 = time.perf_counter()
        resp = await self.request({"kind": "submit_tx", "msg": msg.to_doc()})
        if not resp.get("ok"):
            raise RuntimeError(f"submission rejected: {resp}")
        deadline = time.monotonic() + timeout_s
        while tx_hash not in self.committed:
            if time.monotonic() > deadline:
                raise TimeoutError(f"no commit for {tx_hash}")
            await asyncio.sleep(0.002)
        return self.committed[tx_hash] - t0


async def _run_bench(n_nodes: int, n_samples: int, ops, progress) -> LatencyReport:
    keys = [gen_keypair(seed=bytes([70 + i]) + bytes(31)) for i in range(n_nodes)]
    genesis = Genesis(chain_id="bench", validators=tuple(Validator(k.pk, 1) for k in keys))

    servers: list[NodeServer] = []
    for i, key in enumerate(keys):
        core = NodeCore(node_id=f"b{i}", genesis=genesis, keypair=key, validator=True)
        server = NodeServer(core, listen="127.0.0.1:0", peer_addrs=[])
        await server.start()
        servers.append(server)
    for i, server in enumerate(servers):
        for j, other in enumerate(servers):
            if i != j:
                server._spawn(server._peer_dialer(f"127.0.0.1:{other.listen_port}"))
    await asyncio.sleep(0.3)  # let the mesh connect

    client = _BenchClient("127.0.0.1", servers[0].listen_port)
    await client.connect_events()

    owner = Participant(gen_keypair(seed=bytes([90]) + bytes(31)))
    courier = Participant(gen_keypair(seed=bytes([91]) + bytes(31)))
    device = Participant(gen_keypair(seed=bytes([92]) + bytes(31)))
    setup = new_group(modulus_bits=1024)
    group, wits = acc_build(setup, [courier.pk])
    mask = default_region_mask()
    standard = StandardPattern(background())
    template = {**DEFAULT_POLICY_TEMPLATE, "window_s": 7 * 24 * 3600.0,
                "max_duration_s": 30.0, "grace_s": 5.0}
    now = time.time()

    def make_policy():
        return build_policy(group, "front-door", mask_ref(mask), template, start_s=now - 60)

    for msg in (
        owner.register(),
        courier.register(),
        device.register(kind="aco", resource_id="front-door", pattern_digest=standard.digest),
    ):
        await client.submit_and_time(msg)

    controller_clock = {"now": now}
    controller = AccessController(
        device=device, resource_id="front-door", standard=standard,
        masks={mask_ref(mask): mask}, config=AcoConfig(),
        clock=lambda: controller_clock["now"],
    )

    report = LatencyReport(n_nodes=n_nodes)
    report.samples = {op: [] for op in ops}
    t_id = 0
    try:
        for op in ops:
            for k in range(n_samples):
                t_id += 1
                policy = make_policy()
                if op == "create":
                    dt = await client.submit_and_time(owner.create(t_id, policy))
                else:
                    await client.submit_and_time(owner.create(t_id, policy))
                    if op == "transfer":
                        dt = await client.submit_and_time(
                            owner.transfer(owner.pk, t_id, courier.pk))
                    elif op == "modify":
                        dt = await client.submit_and_time(
                            owner.modify(owner.pk, t_id, policy))
                    elif op == "revoke":
                        dt = await client.submit_and_time(owner.revoke(owner.pk, t_id))
                    elif op == "redeem":
                        dt = await client.submit_and_time(
                            courier.redeem(owner.pk, t_id, wits[courier.pk]))
                        core0 = servers[0].core
                        cid = f"{owner.pk.hex()}-{t_id}"
                        t = core0.state.urpo[cid]
                        controller_clock["now"] = time.time()
                        trace = gen_trajectory("benign", seed=k,
                                               max_duration_s=30.0, grace_s=5.0)
                        msg, _rec, _verdict = controller.run_redemption(
                            t, requester=courier.pk, witness=wits[courier.pk],
                            evidence={"clock": {"unix_s": time.time()},
                                      "gps": {"lat": template["lat"], "lon": template["lon"]}},
                            trace_frames=trace.frames, region=mask,
                            action_marks={trace.drop_frame: "drop"},
                        )
                        # second on-chain leg; monitoring time is not counted
                        dt += await client.submit_and_time(msg)
                report.samples[op].append(dt)
                if progress and (k + 1) % 20 == 0:
                    progress(f"{op}: {k + 1}/{n_samples}")
    except (TimeoutError, RuntimeError) as exc:
        report.failed = True
        if progress:
            progress(f"bench aborted: {exc}")
    finally:
        client.close()
        for server in servers:
            await server.stop()
        await asyncio.sleep(0.05)  # let transports finish closing inside the loop
    return report


def bench_latency(n_nodes: int = 7, n_samples: int = 100, ops=BENCH_OPS,
                  progress=None) -> LatencyReport:
    """Measure submit-to-commit wall time per operation on a local network."""
    return asyncio.run(_run_bench(n_nodes, n_samples, tuple(ops), progress))
