"""Consensus-only byzantine fault injection cluster.

Runs bare consensus engines over the simulated network with byzantine
validators mixing equivocation and silence, and checks that honest nodes
never commit two different values at one height. Payloads are opaque random
byte strings (their own hash), so a full run of a thousand heights stays
cheap enough to sweep many seeds.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .consensus import (
    BroadcastProposal,
    BroadcastVote,
    Commit,
    Engine,
    Proposal,
    ScheduleTimeout,
    Validator,
    ValidatorSet,
    Vote,
)
from .netsim import Scheduler, SimNet


@dataclass
class SafetyReport:
    heights_done: int
    conflicts: list[tuple[int, set[bytes]]] = field(default_factory=list)
    equivocation_evidence: int = 0

    @property
    def safe(self) -> bool:
        return not self.conflicts


class HonestValidator:
    def __init__(self, pk: bytes, vset: ValidatorSet, net: SimNet, sched: Scheduler,
                 rng: random.Random, trace=None):
        self.pk = pk
        self.net = net
        self.sched = sched
        self.rng = rng
        self.commits: dict[int, bytes] = {}
        self._decided_payload: dict[int, tuple] = {}
        self._decided_buffer: dict[int, tuple] = {}
        self.engine = Engine(
            me=pk,
            vset=vset,
            block_provider=self._provide,
            block_validator=lambda payload: True,
            hash_fn=lambda payload: payload,
            trace=trace,
        )
        net.join(pk, self._on_net)

    def _provide(self, height: int, round_: int) -> bytes:
        # unique proposal per (proposer, height, round): a broken protocol
        # would have distinct values available to commit at one height
        return bytes([7]) + self.pk + height.to_bytes(4, "big") + self.rng.randbytes(8)

    def start(self) -> None:
        self._dispatch(self.engine.start())

    def _on_net(self, src, payload) -> None:
        kind, body = payload
        if kind == "proposal":
            self._dispatch(self.engine.on_proposal(body))
        elif kind == "vote":
            self._dispatch(self.engine.on_vote(body))
        elif kind == "decided":
            height, value, cert = body
            if height < self.engine.state.height:
                return
            self._decided_buffer[height] = (value, cert)
            self._drain_decided()

    def _drain_decided(self) -> None:
        while self.engine.state.height in self._decided_buffer:
            value, cert = self._decided_buffer.pop(self.engine.state.height)
            actions = self.engine.on_decided(value, list(cert))
            if not actions:
                return
            self._dispatch(actions)

    def _dispatch(self, actions) -> None:
        for act in actions:
            if isinstance(act, BroadcastVote):
                self.net.broadcast(self.pk, ("vote", act.vote))
            elif isinstance(act, BroadcastProposal):
                self.net.broadcast(self.pk, ("proposal", act.proposal))
            elif isinstance(act, ScheduleTimeout):
                token = (act.kind, act.height, act.round)
                self.sched.at(act.delay_s, lambda t=token: self._fire_timeout(*t))
            elif isinstance(act, Commit):
                self.commits[act.height] = act.payload_hash
                self._decided_payload[act.height] = (act.payload, act.commit_votes)
                self.net.broadcast(self.pk, ("decided", (act.height, act.payload, act.commit_votes)))
        self._drain_decided()

    def _fire_timeout(self, kind, height, round_) -> None:
        self._dispatch(self.engine.on_timeout(kind, height, round_))


class ByzantineValidator:
    """Equivocation/silence mix under its own identity only (it cannot forge
    other validators' votes, matching the signature assumption)."""

    def __init__(self, pk: bytes, vset: ValidatorSet, net: SimNet, sched: Scheduler,
                 rng: random.Random, silence_p: float = 0.3):
        self.pk = pk
        self.vset = vset
        self.net = net
        self.sched = sched
        self.rng = rng
        self.silence_p = silence_p
        self._voted: set[tuple[int, int, str]] = set()
        self._proposed: set[tuple[int, int]] = set()
        net.join(pk, self._on_net)

    def start(self) -> None:
        self._maybe_equivocate_proposal(0, 0)

    def _split_peers(self) -> tuple[list, list]:
        # independently sampled, usually overlapping groups: some peers see
        # both conflicting messages and must record the equivocation
        peers = self.net.peers_of(self.pk)
        group_a = [p for p in peers if self.rng.random() < 0.7]
        group_b = [p for p in peers if self.rng.random() < 0.7]
        return group_a, group_b

    def _maybe_equivocate_proposal(self, height: int, round_: int) -> None:
        if (height, round_) in self._proposed:
            return
        if self.vset.proposer_for(height, round_) != self.pk:
            return
        self._proposed.add((height, round_))
        if self.rng.random() < self.silence_p:
            return
        group_a, group_b = self._split_peers()
        for group in (group_a, group_b):
            payload = bytes([7]) + self.pk + height.to_bytes(4, "big") + self.rng.randbytes(8)
            proposal = Proposal(height, round_, payload, payload, -1, self.pk)
            for dst in group:
                self.net.send(self.pk, dst, ("proposal", proposal))

    def _on_net(self, src, payload) -> None:
        kind, body = payload
        if kind == "proposal":
            self._chaos_votes(body.height, body.round, body.payload_hash)
        elif kind == "vote":
            self._maybe_equivocate_proposal(body.height, body.round)
            self._chaos_votes(body.height, body.round, body.block_hash)

    def _chaos_votes(self, height: int, round_: int, seen_hash: bytes | None) -> None:
        for step in ("prevote", "precommit"):
            key = (height, round_, step)
            if key in self._voted:
                continue
            self._voted.add(key)
            if self.rng.random() < self.silence_p:
                continue
            group_a, group_b = self._split_peers()
            fake = bytes([7]) + self.pk + self.rng.randbytes(12)
            real = seen_hash if seen_hash is not None else fake
            for group, value in ((group_a, real), (group_b, fake)):
                vote = Vote(height, round_, step, value, self.pk)
                for dst in group:
                    self.net.send(self.pk, dst, ("vote", vote))


def run_safety_sim(
    n_validators: int = 7,
    n_byzantine: int = 2,
    heights: int = 1000,
    seed: int = 0,
    weights: list[int] | None = None,
    delay_range_s: tuple[float, float] = (0.001, 0.03),
    trace=None,
    max_events: int | None = None,
) -> SafetyReport:
    """Run one seeded execution and report any honest-commit conflicts."""
    rng = random.Random(seed)
    pks = [bytes([i + 1]) * 4 for i in range(n_validators)]
    weights = weights or [1] * n_validators
    vset = ValidatorSet([Validator(pk, w) for pk, w in zip(pks, weights)])
    sched = Scheduler()
    net = SimNet(sched, rng, delay_range_s)

    byz_pks = set(rng.sample(pks, n_byzantine)) if n_byzantine else set()
    honest: list[HonestValidator] = []
    byz: list[ByzantineValidator] = []
    for pk in pks:
        if pk in byz_pks:
            byz.append(ByzantineValidator(pk, vset, net, sched, rng))
        else:
            honest.append(HonestValidator(pk, vset, net, sched, rng, trace=trace))
    for node in honest + byz:
        node.start()

    def done() -> bool:
        return all(len(n.commits) >= heights for n in honest)

    sched.run(stop=done, max_events=max_events or heights * 6000)

    min_done = min((len(n.commits) for n in honest), default=0)
    conflicts: list[tuple[int, set[bytes]]] = []
    top = max((max(n.commits, default=-1) for n in honest), default=-1)
    for h in range(top + 1):
        seen = {n.commits[h] for n in honest if h in n.commits}
        if len(seen) > 1:
            conflicts.append((h, seen))
    evidence = sum(len(n.engine.evidence) for n in honest)
    return SafetyReport(heights_done=min_done, conflicts=conflicts,
                        equivocation_evidence=evidence)
