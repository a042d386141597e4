"""Full-node core: mempool, consensus wiring, gossip, and the client surface.

The core is transport-free. Hosts (the asyncio server, the in-process
simulation harness) feed it peer documents, client requests, and timer
expiries; it returns Send/Timer actions. All processing happens in the
single ordered context of whoever drives it, which is what keeps commits
deterministic.

A light node (``light=True``) skips consensus entirely: it validates commit
certificates on gossiped blocks, maintains the same ledger state, and can
submit transactions -- the mode the access-control object runs in.
"""

from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Any, Callable

from .consensus import (
    BroadcastProposal,
    BroadcastVote,
    Commit,
    Engine,
    Genesis,
    Proposal,
    ScheduleTimeout,
    Vote,
)
from .crypto import KeyPair, sign, verify_sig
from .encoding import canonical_encode, strip_none
from .ledger import (
    Block,
    ChainStore,
    LedgerReject,
    LedgerState,
    apply_block,
    apply_message,
    audit_trail,
    build_block,
    validate_block,
)
from .model import MessageError, SignedMessage, verify_message

EMPTY_BLOCK_INTERVAL_S = 0.050
MEMPOOL_LIMIT = 10_000
MEMPOOL_TTL_BLOCKS = 64

REJECT_SIG = "SIG_INVALID"
REJECT_MALFORMED = "MALFORMED"
REJECT_NONCE = "NONCE_REUSED"
REJECT_DUPLICATE = "DUPLICATE"
REJECT_FULL = "MEMPOOL_FULL"


@dataclass(frozen=True)
class Send:
    dst: str | None  # None broadcasts to every peer
    doc: dict


@dataclass(frozen=True)
class Timer:
    delay_s: float
    token: tuple


@dataclass
class _PoolEntry:
    msg: SignedMessage
    added_height: int


class Mempool:
    """FIFO pool, bounded, de-duplicated by tx hash and (caller, nonce)."""

    def __init__(self, limit: int = MEMPOOL_LIMIT):
        self.limit = limit
        self.entries: "OrderedDict[bytes, _PoolEntry]" = OrderedDict()
        self.by_nonce: set[tuple[bytes, int]] = set()

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, tx_hash: bytes) -> bool:
        return tx_hash in self.entries

    def has_nonce(self, caller: bytes, nonce: int) -> bool:
        return (caller, nonce) in self.by_nonce

    def add(self, tx_hash: bytes, msg: SignedMessage, height: int) -> None:
        while len(self.entries) >= self.limit:
            self._pop_oldest()
        self.entries[tx_hash] = _PoolEntry(msg, height)
        self.by_nonce.add((msg.caller, msg.nonce))

    def _pop_oldest(self) -> None:
        tx_hash, entry = self.entries.popitem(last=False)
        self.by_nonce.discard((entry.msg.caller, entry.msg.nonce))

    def remove(self, tx_hash: bytes) -> None:
        entry = self.entries.pop(tx_hash, None)
        if entry is not None:
            self.by_nonce.discard((entry.msg.caller, entry.msg.nonce))

    def messages(self) -> list[SignedMessage]:
        return [e.msg for e in self.entries.values()]

    def prune(self, state: LedgerState, height: int, time_s: float) -> None:
        stale = []
        for tx_hash, entry in self.entries.items():
            if (
                entry.msg.nonce <= state.nonces.get(entry.msg.caller, -1)
                or height - entry.added_height > MEMPOOL_TTL_BLOCKS
            ):
                stale.append(tx_hash)
                continue
            try:
                apply_message(state.copy(), entry.msg, height + 1, time_s)
            except LedgerReject:
                stale.append(tx_hash)
        for tx_hash in stale:
            self.remove(tx_hash)


def verify_block_commit(block: Block, vset) -> int:
    """1 iff the block carries valid precommit signatures from strictly more
    than two thirds of the validator weight."""
    block_hash = block.block_hash()
    seen: set[bytes] = set()
    weight = 0
    for sig_doc in block.commit_sigs:
        voter = sig_doc.get("voter")
        if voter is None or voter in seen or voter not in vset:
            continue
        vote = Vote(
            height=block.height,
            round=int(sig_doc.get("round", 0)),
            step="precommit",
            block_hash=block_hash,
            voter=voter,
        )
        if verify_sig(voter, canonical_encode(vote.body_doc()), sig_doc.get("sig", b"")):
            seen.add(voter)
            weight += vset.weight_of[voter]
    return vset.quorum_met(weight)


def _proposal_body(p: Proposal) -> dict:
    return {
        "height": p.height,
        "round": p.round,
        "valid_round": p.valid_round,
        "proposer": p.proposer,
        "block_hash": p.payload_hash,
    }


class NodeCore:
    def __init__(
        self,
        node_id: str,
        genesis: Genesis,
        keypair: KeyPair | None = None,
        validator: bool = False,
        light: bool = False,
        chain_path: str | None = None,
        wall_clock: Callable[[], float] = time.time,
        empty_block_interval_s: float = EMPTY_BLOCK_INTERVAL_S,
    ):
        if validator and light:
            raise ValueError("a node is either a validator or a light listener")
        if validator and keypair is None:
            raise ValueError("validator needs a keypair")
        self.node_id = node_id
        self.genesis = genesis
        self.vset = genesis.validator_set()
        self.keypair = keypair
        self.validator = validator
        self.light = light
        self.wall_clock = wall_clock
        self.empty_block_interval_s = empty_block_interval_s

        self.state = LedgerState(genesis_hash=genesis.genesis_hash())
        self.chain = ChainStore(chain_path)
        for block in self.chain:
            apply_block(self.state, block)

        self.mempool = Mempool()
        self.seen_txs: set[bytes] = set()
        self.commit_listeners: list[Callable[[Block], None]] = []
        self._decided_buffer: dict[int, Block] = {}
        self._last_block_wall = self.wall_clock()
        self._poke_armed = False

        self.engine: Engine | None = None
        if validator:
            self.engine = Engine(
                me=keypair.pk,
                vset=self.vset,
                block_provider=self._provide_block,
                block_validator=lambda b: bool(validate_block(b, self.state)),
                hash_fn=lambda b: b.block_hash(),
                start_height=self.state.height + 1,
                vote_signer=self._sign_vote,
            )

    # -- wiring ---------------------------------------------------------------

    def start(self) -> list:
        if self.engine is None:
            return []
        return self._run_engine(self.engine.start())

    def _sign_vote(self, vote: Vote) -> Vote:
        return replace(vote, sig=sign(self.keypair.sk, canonical_encode(vote.body_doc())))

    def _provide_block(self, height: int, round_: int) -> Block | None:
        if not self.mempool and (
            self.wall_clock() - self._last_block_wall < self.empty_block_interval_s
        ):
            return None  # wait for traffic or the empty-block interval
        block, skipped = build_block(
            self.state, self.mempool.messages(), self.keypair.pk, self.wall_clock()
        )
        for tx_hash, _code in skipped:
            self.mempool.remove(tx_hash)
        return block

    def _run_engine(self, actions) -> list:
        out: list = []
        for act in actions:
            if isinstance(act, BroadcastVote):
                out.append(Send(None, self._vote_doc(act.vote)))
            elif isinstance(act, BroadcastProposal):
                out.append(Send(None, self._proposal_doc(act.proposal)))
            elif isinstance(act, ScheduleTimeout):
                out.append(Timer(act.delay_s, ("consensus", act.kind, act.height, act.round)))
            elif isinstance(act, Commit):
                out += self._on_engine_commit(act)
        if self.engine is not None and self.engine._proposal_pending and not self._poke_armed:
            self._poke_armed = True
            out.append(Timer(self.empty_block_interval_s, ("poke",)))
        return out

    def _on_engine_commit(self, commit: Commit) -> list:
        block: Block = commit.payload
        block.commit_sigs = [
            {"voter": v.voter, "round": v.round, "sig": v.sig} for v in commit.commit_votes
        ]
        if block.height != self.state.height + 1:  # pragma: no cover - engine keeps lockstep
            return []
        return self._adopt_block(block)

    def _adopt_block(self, block: Block) -> list:
        apply_block(self.state, block)
        self.chain.append(block)
        self._last_block_wall = self.wall_clock()
        self.mempool.prune(self.state, block.height, self.wall_clock())
        for tx in block.txs:
            self.mempool.remove(tx.tx_hash())
        for listener in self.commit_listeners:
            listener(block)
        out = [Send(None, {"t": "decided", "block": block.to_doc()})]
        # drain any buffered follow-up blocks (catch-up path)
        nxt = self._decided_buffer.pop(self.state.height + 1, None)
        if nxt is not None:
            out += self._try_adopt_decided(nxt)
        return out

    # -- peer input -------------------------------------------------------------

    def receive(self, src: str, doc: dict) -> list:
        kind = doc.get("t")
        try:
            if kind == "tx":
                return self._on_tx_gossip(doc)
            if kind == "proposal" and self.engine is not None:
                return self._on_proposal_doc(doc)
            if kind == "vote" and self.engine is not None:
                return self._on_vote_doc(doc)
            if kind == "decided":
                return self._on_decided_doc(src, doc)
            if kind == "want_blocks":
                return self._on_want_blocks(src, doc)
        except (MessageError, KeyError, ValueError, TypeError):
            return []
        return []

    def on_timer(self, token: tuple) -> list:
        if token[0] == "consensus" and self.engine is not None:
            _, kind, height, round_ = token
            return self._run_engine(self.engine.on_timeout(kind, height, round_))
        if token[0] == "poke" and self.engine is not None:
            self._poke_armed = False
            return self._run_engine(self.engine.maybe_propose())
        return []

    def _on_tx_gossip(self, doc: dict) -> list:
        msg = SignedMessage.from_doc(doc["msg"])
        ok, info = self.admit_tx(msg)
        if not ok:
            return []
        out = [Send(None, {"t": "tx", "msg": msg.to_doc()})]
        if self.engine is not None:
            out += self._run_engine(self.engine.maybe_propose())
        return out

    def admit_tx(self, msg: SignedMessage) -> tuple[bool, str]:
        """Admission against the latest committed snapshot (read-only).

        Acceptance is not commitment; the ledger re-judges at apply time, so
        a racing conflict can still drop an admitted message later.
        """
        tx_hash = msg.tx_hash()
        if tx_hash in self.seen_txs or tx_hash in self.mempool:
            return False, REJECT_DUPLICATE
        try:
            msg.check_shape()
        except MessageError:
            return False, REJECT_MALFORMED
        if not verify_message(msg):
            return False, REJECT_SIG
        if msg.nonce <= self.state.nonces.get(msg.caller, -1):
            return False, REJECT_NONCE
        if self.mempool.has_nonce(msg.caller, msg.nonce):
            return False, REJECT_NONCE
        try:
            apply_message(self.state.copy(), msg, self.state.height + 1, self.wall_clock())
        except LedgerReject as exc:
            return False, exc.code
        self.seen_txs.add(tx_hash)
        self.mempool.add(tx_hash, msg, self.state.height)
        return True, tx_hash.hex()

    def _on_proposal_doc(self, doc: dict) -> list:
        block = Block.from_doc(doc["block"])
        proposer = bytes.fromhex(doc["proposer"]) if isinstance(doc["proposer"], str) else doc["proposer"]
        sig = bytes.fromhex(doc["sig"]) if isinstance(doc["sig"], str) else doc["sig"]
        proposal = Proposal(
            height=int(doc["height"]),
            round=int(doc["round"]),
            payload=block,
            payload_hash=block.block_hash(),
            valid_round=int(doc["valid_round"]),
            proposer=proposer,
            sig=sig,
        )
        if proposer not in self.vset:
            return []
        if not verify_sig(proposer, canonical_encode(_proposal_body(proposal)), sig):
            return []
        return self._run_engine(self.engine.on_proposal(proposal))

    def _proposal_doc(self, p: Proposal) -> dict:
        sig = sign(self.keypair.sk, canonical_encode(_proposal_body(p)))
        return {
            "t": "proposal",
            "height": p.height,
            "round": p.round,
            "valid_round": p.valid_round,
            "proposer": p.proposer,
            "sig": sig,
            "block": p.payload.to_doc(),
        }

    def _on_vote_doc(self, doc: dict) -> list:
        def as_bytes(v):
            return bytes.fromhex(v) if isinstance(v, str) else v

        block_hash = as_bytes(doc["block_hash"]) if "block_hash" in doc else None
        vote = Vote(
            height=int(doc["height"]),
            round=int(doc["round"]),
            step=doc["step"],
            block_hash=block_hash,
            voter=as_bytes(doc["voter"]),
            sig=as_bytes(doc["sig"]),
        )
        if vote.voter not in self.vset:
            return []
        if not verify_sig(vote.voter, canonical_encode(vote.body_doc()), vote.sig):
            return []
        return self._run_engine(self.engine.on_vote(vote))

    @staticmethod
    def _vote_doc(vote: Vote) -> dict:
        return strip_none(
            {
                "t": "vote",
                "height": vote.height,
                "round": vote.round,
                "step": vote.step,
                "block_hash": vote.block_hash,
                "voter": vote.voter,
                "sig": vote.sig,
            }
        )

    def _on_decided_doc(self, src: str, doc: dict) -> list:
        block = Block.from_doc(doc["block"])
        if block.height <= self.state.height:
            return []
        if block.height > self.state.height + 1:
            self._decided_buffer[block.height] = block
            return [Send(src, {"t": "want_blocks", "from": self.state.height + 1})]
        return self._try_adopt_decided(block)

    def _try_adopt_decided(self, block: Block) -> list:
        if not verify_block_commit(block, self.vset):
            return []
        if not validate_block(block, self.state):
            return []
        out = self._adopt_block(block)
        if self.engine is not None:
            out += self._run_engine(self.engine.fast_forward(self.state.height + 1))
        return out

    def _on_want_blocks(self, src: str, doc: dict) -> list:
        start = max(int(doc.get("from", 0)), 0)
        out = []
        for block in self.chain:
            if block.height >= start:
                out.append(Send(src, {"t": "decided", "block": block.to_doc()}))
        return out

    # -- client surface --------------------------------------------------------

    def handle_client(self, doc: dict) -> tuple[dict, list]:
        """Process one request; returns (response, peer actions)."""
        kind = doc.get("kind")
        if kind == "submit_tx":
            try:
                msg = SignedMessage.from_doc(doc["msg"])
            except (MessageError, KeyError, TypeError) as exc:
                return {"ok": False, "code": REJECT_MALFORMED, "detail": str(exc)}, []
            ok, info = self.admit_tx(msg)
            if not ok:
                return {"ok": False, "code": info}, []
            out = [Send(None, {"t": "tx", "msg": msg.to_doc()})]
            if self.engine is not None:
                out += self._run_engine(self.engine.maybe_propose())
            return {"ok": True, "tx_hash": info}, out
        if kind == "query_tokoin":
            cid = doc.get("id", "")
            status = self.state.status_of(cid)
            resp = {"ok": True, "id": cid, "status": status}
            t = self.state.urpo.get(cid)
            if t is None and cid in self.state.spent:
                t = self.state.spent[cid].final
            if t is not None:
                resp["tokoin"] = t.to_doc()
            return resp, []
        if kind == "audit_trail":
            trail = audit_trail(self.chain, doc.get("id", ""))
            return {"ok": True, "trail": trail.to_doc()}, []
        if kind == "status":
            resp = {
                "ok": True,
                "node_id": self.node_id,
                "height": self.state.height,
                "validator": self.validator,
                "light": self.light,
                "mempool": len(self.mempool),
            }
            pk_hex = doc.get("pk")
            if pk_hex:
                pk = bytes.fromhex(pk_hex)
                resp["nonce"] = self.state.nonces.get(pk, -1)
                resp["registered"] = pk in self.state.registry
            return resp, []
        return {"ok": False, "code": "UNKNOWN_REQUEST"}, []

    # -- subscriptions -----------------------------------------------------------

    @staticmethod
    def block_events(block: Block) -> list[dict]:
        events = []
        for i, tx in enumerate(block.txs):
            events.append(
                {
                    "height": block.height,
                    "tx_index": i,
                    "tx_hash": tx.tx_hash().hex(),
                    "op": tx.msg.op.value,
                    "cid": tx.msg.cid,
                    "caller": tx.msg.caller.hex(),
                    "events": list(tx.script.events),
                    "tx": tx.to_doc(),
                }
            )
        return events

    @staticmethod
    def event_matches(event: dict, filt: str | None) -> bool:
        if not filt:
            return True
        if event["cid"] == filt or event["caller"] == filt:
            return True
        tx = event["tx"]
        msg = tx["msg"]
        if msg.get("pk_next") == filt:
            return True
        tokoin = tx.get("tokoin")
        if tokoin and (_hex(tokoin["owner"]) == filt or _hex(tokoin["holder"]) == filt):
            return True
        return False

    def mempool_docs(self) -> list[dict]:
        """Pending transactions as wire docs (sent to newly connected peers)."""
        return [{"t": "tx", "msg": e.msg.to_doc()} for e in self.mempool.entries.values()]

    def replay_events(self, filt: str | None, from_height: int) -> list[dict]:
        out = []
        for block in self.chain:
            if block.height < from_height:
                continue
            for event in self.block_events(block):
                if self.event_matches(event, filt):
                    out.append(event)
        return out


def _hex(v: Any) -> str:
    return v if isinstance(v, str) else bytes(v).hex()
