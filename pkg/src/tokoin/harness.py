"""In-process multi-node cluster over the simulated transport.

The default fixture for everything that needs a running network without
sockets: deterministic under a fixed seed, with configurable link delays.
Validators run full consensus with real signatures; light nodes follow
committed blocks the same way the access-control object does.
"""

from __future__ import annotations

import random
from typing import Callable

from .consensus import Genesis, Validator
from .encoding import canonical_decode, canonical_encode
from .crypto import KeyPair, gen_keypair
from .ledger import Block
from .model import SignedMessage
from .netsim import Scheduler, SimNet
from .node import NodeCore, Send, Timer


def _wire(doc: dict) -> dict:
    """Round-trip through the canonical wire form, as a real client sees it."""
    return canonical_decode(canonical_encode(doc))


class SimHost:
    """Drives one NodeCore from the simulation scheduler."""

    def __init__(self, core: NodeCore, net: SimNet, sched: Scheduler):
        self.core = core
        self.net = net
        self.sched = sched
        net.join(core.node_id, self._on_net)

    def _on_net(self, src, doc) -> None:
        self.dispatch(self.core.receive(src, doc))

    def dispatch(self, actions) -> None:
        for act in actions:
            if isinstance(act, Send):
                if act.dst is None:
                    self.net.broadcast(self.core.node_id, act.doc)
                else:
                    self.net.send(self.core.node_id, act.dst, act.doc)
            elif isinstance(act, Timer):
                self.sched.at(act.delay_s, lambda t=act.token: self._fire(t))

    def _fire(self, token) -> None:
        self.dispatch(self.core.on_timer(token))

    def start(self) -> None:
        self.dispatch(self.core.start())


class Cluster:
    """n validators (plus optional light nodes) on one simulated network."""

    def __init__(
        self,
        n_validators: int = 4,
        seed: int = 0,
        light_nodes: int = 0,
        delay_range_s: tuple[float, float] = (0.001, 0.01),
        empty_block_interval_s: float = 5.0,
        chain_id: str = "sim",
    ):
        self.rng = random.Random(seed)
        self.sched = Scheduler()
        self.net = SimNet(self.sched, self.rng, delay_range_s)
        self.validator_keys = [
            gen_keypair(seed=bytes([10 + i]) + bytes(31)) for i in range(n_validators)
        ]
        self.genesis = Genesis(
            chain_id=chain_id,
            validators=tuple(Validator(kp.pk, 1) for kp in self.validator_keys),
        )
        self.hosts: dict[str, SimHost] = {}
        self.commits: dict[bytes, dict[str, int]] = {}  # tx_hash -> {node: height}
        self.commit_log: list[tuple[str, Block]] = []
        for i, kp in enumerate(self.validator_keys):
            self._add_node(f"v{i}", keypair=kp, validator=True,
                           interval=empty_block_interval_s)
        for i in range(light_nodes):
            self._add_node(f"l{i}", keypair=None, validator=False, light=True,
                           interval=empty_block_interval_s)

    def _add_node(self, node_id: str, keypair: KeyPair | None, validator: bool,
                  interval: float, light: bool = False) -> NodeCore:
        core = NodeCore(
            node_id=node_id,
            genesis=self.genesis,
            keypair=keypair,
            validator=validator,
            light=light,
            wall_clock=lambda: self.sched.now,
            empty_block_interval_s=interval,
        )
        host = SimHost(core, self.net, self.sched)
        core.commit_listeners.append(lambda block, nid=node_id: self._on_commit(nid, block))
        self.hosts[node_id] = host
        return core

    def add_light_node(self, node_id: str) -> NodeCore:
        return self._add_node(node_id, keypair=None, validator=False, light=True, interval=5.0)

    def _on_commit(self, node_id: str, block: Block) -> None:
        self.commit_log.append((node_id, block))
        for tx in block.txs:
            self.commits.setdefault(tx.tx_hash(), {})[node_id] = block.height

    def start(self) -> None:
        for host in self.hosts.values():
            host.start()

    def node(self, node_id: str) -> NodeCore:
        return self.hosts[node_id].core

    @property
    def now(self) -> float:
        return self.sched.now

    def run_for(self, duration_s: float, stop: Callable[[], bool] | None = None) -> None:
        self.sched.run(until_s=self.sched.now + duration_s, stop=stop)

    def submit(self, msg: SignedMessage, to: str = "v0") -> dict:
        host = self.hosts[to]
        resp, actions = host.core.handle_client({"kind": "submit_tx", "msg": msg.to_doc()})
        host.dispatch(actions)
        return _wire(resp)

    def wait_commit(self, msg: SignedMessage, timeout_s: float = 30.0, on: str = "v0") -> bool:
        tx_hash = msg.tx_hash()
        self.run_for(timeout_s, stop=lambda: on in self.commits.get(tx_hash, {}))
        return on in self.commits.get(tx_hash, {})

    def submit_and_commit(self, msg: SignedMessage, to: str = "v0", timeout_s: float = 30.0,
                          on: str = "v0") -> dict:
        resp = self.submit(msg, to)
        if not resp.get("ok"):
            return resp
        if not self.wait_commit(msg, timeout_s, on=on):
            return {"ok": False, "code": "TIMEOUT"}
        resp["height"] = self.commits[msg.tx_hash()][on]
        return resp

    def query(self, doc: dict, node_id: str = "v0") -> dict:
        resp, _ = self.hosts[node_id].core.handle_client(doc)
        return _wire(resp)

    def converged_heights(self, node_ids: list[str] | None = None) -> set[int]:
        ids = node_ids or list(self.hosts)
        return {self.hosts[n].core.state.height for n in ids}
