"""Unredeemed-policy-output ledger.

State is a pure fold of the committed block sequence: every coin operation
is one transaction whose script logs the triggering message and resulting
events. A coin id lives in exactly one of {never created, unredeemed set,
spent set} at every height.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable

from .crypto import verify_sig
from .encoding import canonical_decode, canonical_encode, doc_digest, strip_none
from .model import (
    MessageError,
    Opcode,
    PolicyError,
    Role,
    SignedMessage,
    Tokoin,
    VerdictOutcome,
    verify_role,
)

# machine-readable rejection codes surfaced to clients
MALFORMED = "MALFORMED"
SIG_INVALID = "SIG_INVALID"
NONCE_REUSED = "NONCE_REUSED"
NOT_REGISTERED = "NOT_REGISTERED"
ALREADY_REGISTERED = "ALREADY_REGISTERED"
ACO_CONFLICT = "ACO_CONFLICT"
ID_IN_USE = "ID_IN_USE"
POLICY_INVALID = "POLICY_INVALID"
UNKNOWN_TOKOIN = "UNKNOWN_TOKOIN"
TOKOIN_INVALID = "TOKOIN_INVALID"
NOT_OWNER = "NOT_OWNER"
NOT_HOLDER = "NOT_HOLDER"
NOT_SUBJECT = "NOT_SUBJECT"
IN_REDEMPTION = "IN_REDEMPTION"
NOT_IN_REDEMPTION = "NOT_IN_REDEMPTION"
RECEIVER_UNKNOWN = "RECEIVER_UNKNOWN"
NO_ACO = "NO_ACO"
NOT_ACO = "NOT_ACO"


class LedgerReject(Exception):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


class BlockInvalid(Exception):
    pass


@dataclass(frozen=True)
class RegRecord:
    pk: bytes
    kind: str  # "participant" | "aco"
    height: int
    resource_id: str | None = None
    pattern_digest: bytes | None = None

    def to_doc(self) -> dict:
        return strip_none(
            {
                "pk": self.pk,
                "kind": self.kind,
                "height": self.height,
                "resource_id": self.resource_id,
                "pattern_digest": self.pattern_digest,
            }
        )


@dataclass
class TxScript:
    """Per-transaction audit log: message digest plus the events the
    operation caused, and any payloads subjects fetch from the chain."""

    message_digest: bytes
    events: list[str] = field(default_factory=list)
    evidence_digest: bytes | None = None
    refreshed_witnesses: dict[str, dict] | None = None

    def to_doc(self) -> dict:
        return strip_none(
            {
                "message_digest": self.message_digest,
                "events": list(self.events),
                "evidence_digest": self.evidence_digest,
                "refreshed_witnesses": self.refreshed_witnesses,
            }
        )

    @classmethod
    def from_doc(cls, doc: dict) -> "TxScript":
        def as_bytes(v):
            return bytes.fromhex(v) if isinstance(v, str) else v

        return cls(
            message_digest=as_bytes(doc["message_digest"]),
            events=list(doc["events"]),
            evidence_digest=as_bytes(doc["evidence_digest"]) if "evidence_digest" in doc else None,
            refreshed_witnesses=doc.get("refreshed_witnesses"),
        )


@dataclass
class PolicyTransaction:
    msg: SignedMessage
    script: TxScript
    tokoin: Tokoin | None  # resulting coin; None for register

    def to_doc(self) -> dict:
        doc = {"msg": self.msg.to_doc(), "script": self.script.to_doc()}
        if self.tokoin is not None:
            doc["tokoin"] = self.tokoin.to_doc()
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "PolicyTransaction":
        return cls(
            msg=SignedMessage.from_doc(doc["msg"]),
            script=TxScript.from_doc(doc["script"]),
            tokoin=Tokoin.from_doc(doc["tokoin"]) if "tokoin" in doc else None,
        )

    def tx_hash(self) -> bytes:
        return self.msg.tx_hash()


@dataclass
class Block:
    height: int
    prev_hash: bytes
    proposer: bytes
    time_s: float
    txs: list[PolicyTransaction]
    commit_sigs: list[dict] = field(default_factory=list)

    def header_doc(self) -> dict:
        return {
            "height": self.height,
            "prev_hash": self.prev_hash,
            "proposer": self.proposer,
            "time_s": float(self.time_s),
            "txs": [tx.to_doc() for tx in self.txs],
        }

    def block_hash(self) -> bytes:
        # commit signatures sign this hash, so they stay outside the preimage
        return doc_digest(self.header_doc())

    def to_doc(self) -> dict:
        doc = self.header_doc()
        doc["commit_sigs"] = self.commit_sigs
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "Block":
        def as_bytes(v):
            return bytes.fromhex(v) if isinstance(v, str) else v

        sigs = [
            {k: as_bytes(v) if k in ("voter", "sig") else v for k, v in s.items()}
            for s in doc.get("commit_sigs", [])
        ]
        return cls(
            height=int(doc["height"]),
            prev_hash=as_bytes(doc["prev_hash"]),
            proposer=as_bytes(doc["proposer"]),
            time_s=float(doc["time_s"]),
            txs=[PolicyTransaction.from_doc(t) for t in doc["txs"]],
            commit_sigs=sigs,
        )


@dataclass(frozen=True)
class SpentRecord:
    final: Tokoin
    height: int
    tx_index: int


@dataclass
class LedgerState:
    """Materialized view over the chain; keys are composite-id strings."""

    genesis_hash: bytes
    registry: dict[bytes, RegRecord] = field(default_factory=dict)
    aco_by_resource: dict[str, bytes] = field(default_factory=dict)
    urpo: dict[str, Tokoin] = field(default_factory=dict)
    spent: dict[str, SpentRecord] = field(default_factory=dict)
    nonces: dict[bytes, int] = field(default_factory=dict)
    in_redemption: dict[str, bytes] = field(default_factory=dict)
    height: int = -1
    last_block_hash: bytes = b""
    last_time_s: float = 0.0

    def __post_init__(self) -> None:
        if not self.last_block_hash:
            self.last_block_hash = self.genesis_hash

    def copy(self) -> "LedgerState":
        # value types are immutable, shallow dict copies give a snapshot
        return LedgerState(
            genesis_hash=self.genesis_hash,
            registry=dict(self.registry),
            aco_by_resource=dict(self.aco_by_resource),
            urpo=dict(self.urpo),
            spent=dict(self.spent),
            nonces=dict(self.nonces),
            in_redemption=dict(self.in_redemption),
            height=self.height,
            last_block_hash=self.last_block_hash,
            last_time_s=self.last_time_s,
        )

    def digest(self) -> bytes:
        """Digest over the sorted unredeemed set (covers holder, policy,
        validity, remaining uses of every live coin)."""
        return doc_digest({cid: t.to_doc() for cid, t in sorted(self.urpo.items())})

    def status_of(self, cid: str) -> str:
        if cid in self.urpo:
            return "in_redemption" if cid in self.in_redemption else "valid"
        if cid in self.spent:
            return "spent"
        return "unknown"


def redemption_deadline(t: Tokoin) -> float:
    """Latest instant the access object may still finalize; past it the owner
    can revoke even while the coin sits in redemption."""
    return t.policy.when.end + t.policy.how.max_duration_s + t.policy.how.grace_s


def _short(pk: bytes) -> str:
    return pk.hex()[:12]


def _get_live(state: LedgerState, cid: str) -> Tokoin:
    t = state.urpo.get(cid)
    if t is None:
        if cid in state.spent:
            raise LedgerReject(TOKOIN_INVALID, f"{cid} already redeemed or revoked")
        raise LedgerReject(UNKNOWN_TOKOIN, cid)
    return t


def apply_message(
    state: LedgerState, msg: SignedMessage, height: int, time_s: float, tx_index: int = 0
) -> PolicyTransaction:
    """Apply one signed message to the state, mutating it, and return the
    committed transaction. Raises :class:`LedgerReject` without mutating on
    any admission failure."""
    try:
        msg.check_shape()
    except MessageError as exc:
        raise LedgerReject(MALFORMED, str(exc)) from exc
    if not verify_sig(msg.caller, canonical_encode(msg.body_doc()), msg.sig):
        raise LedgerReject(SIG_INVALID)
    if msg.nonce <= state.nonces.get(msg.caller, -1):
        raise LedgerReject(NONCE_REUSED, f"nonce {msg.nonce} not above committed")
    if msg.op is not Opcode.REGISTER and msg.caller not in state.registry:
        raise LedgerReject(NOT_REGISTERED, _short(msg.caller))

    script = TxScript(message_digest=doc_digest(msg.body_doc()))
    cid = msg.cid
    handler = _HANDLERS[msg.op]
    tokoin = handler(state, msg, cid, script, height, time_s, tx_index)
    state.nonces[msg.caller] = msg.nonce
    return PolicyTransaction(msg=msg, script=script, tokoin=tokoin)


def _apply_register(state, msg, cid, script, height, time_s, tx_index):
    if msg.caller in state.registry:
        raise LedgerReject(ALREADY_REGISTERED, _short(msg.caller))
    reg = msg.reg
    if reg.kind == "aco":
        bound = state.aco_by_resource.get(reg.resource_id)
        if bound is not None and bound != msg.caller:
            raise LedgerReject(ACO_CONFLICT, f"resource {reg.resource_id} already has an access object")
        state.aco_by_resource[reg.resource_id] = msg.caller
        script.events.append(f"registered access object for resource {reg.resource_id}")
        if reg.pattern_digest:
            script.events.append(f"background pattern {reg.pattern_digest.hex()[:16]}")
    else:
        script.events.append(f"registered participant {_short(msg.caller)}")
    state.registry[msg.caller] = RegRecord(
        pk=msg.caller,
        kind=reg.kind,
        height=height,
        resource_id=reg.resource_id,
        pattern_digest=reg.pattern_digest,
    )
    return None


def _apply_create(state, msg, cid, script, height, time_s, tx_index):
    if cid in state.urpo or cid in state.spent:
        raise LedgerReject(ID_IN_USE, cid)
    try:
        msg.policy.validate()
    except PolicyError as exc:
        raise LedgerReject(POLICY_INVALID, str(exc)) from exc
    t = Tokoin(t_id=msg.t_id, pk_o=msg.caller, pk_h=msg.caller, policy=msg.policy)
    state.urpo[cid] = t
    script.events.append(f"created by owner {_short(msg.caller)}")
    return t


def _apply_transfer(state, msg, cid, script, height, time_s, tx_index):
    t = _get_live(state, cid)
    if cid in state.in_redemption:
        raise LedgerReject(IN_REDEMPTION, "cannot transfer while redemption is in progress")
    if not verify_role(t, msg.caller, Role.HOLDER):
        raise LedgerReject(NOT_HOLDER, _short(msg.caller))
    if msg.pk_next not in state.registry:
        raise LedgerReject(RECEIVER_UNKNOWN, _short(msg.pk_next))
    t = t.with_holder(msg.pk_next)
    state.urpo[cid] = t
    script.events.append(f"holder {_short(msg.caller)} -> {_short(msg.pk_next)}")
    return t


def _apply_modify(state, msg, cid, script, height, time_s, tx_index):
    t = _get_live(state, cid)
    if not verify_role(t, msg.caller, Role.OWNER):
        raise LedgerReject(NOT_OWNER, "only the owner modifies the policy")
    try:
        msg.policy.validate()
    except PolicyError as exc:
        raise LedgerReject(POLICY_INVALID, str(exc)) from exc
    t = t.with_policy(msg.policy)
    state.urpo[cid] = t
    script.events.append("policy replaced by owner")
    if msg.witness_blobs:
        script.refreshed_witnesses = dict(msg.witness_blobs)
        script.events.append(f"re-issued {len(msg.witness_blobs)} subject witnesses")
    return t


def _apply_revoke(state, msg, cid, script, height, time_s, tx_index):
    t = _get_live(state, cid)
    if not verify_role(t, msg.caller, Role.OWNER):
        raise LedgerReject(NOT_OWNER, "only the owner revokes")
    if cid in state.in_redemption:
        if time_s <= redemption_deadline(t):
            raise LedgerReject(IN_REDEMPTION, "redemption in progress and deadline not passed")
        script.events.append("revoked past finalize deadline while in redemption")
        del state.in_redemption[cid]
    final = t.invalidated()
    del state.urpo[cid]
    state.spent[cid] = SpentRecord(final=final, height=height, tx_index=tx_index)
    script.events.append("revoked by owner; coin is now null")
    return final


def _apply_redeem(state, msg, cid, script, height, time_s, tx_index):
    t = _get_live(state, cid)
    if cid in state.in_redemption:
        raise LedgerReject(IN_REDEMPTION, "already being redeemed")
    if not verify_role(t, msg.caller, Role.SUBJECT, msg.witness):
        raise LedgerReject(NOT_SUBJECT, "accumulator membership proof failed")
    aco = state.aco_by_resource.get(t.policy.what.resource_id)
    if aco is None:
        raise LedgerReject(NO_ACO, f"no access object registered for {t.policy.what.resource_id}")
    t = t.with_holder(aco)
    state.urpo[cid] = t
    state.in_redemption[cid] = msg.caller
    script.events.append(f"redeem requested by subject {_short(msg.caller)}")
    script.events.append(f"coin handed to access object {_short(aco)}")
    return t


def _apply_redeem_finalize(state, msg, cid, script, height, time_s, tx_index):
    t = _get_live(state, cid)
    requester = state.in_redemption.get(cid)
    if requester is None:
        raise LedgerReject(NOT_IN_REDEMPTION, cid)
    if msg.caller != t.pk_h:
        raise LedgerReject(NOT_ACO, "finalize must come from the holding access object")
    verdict = msg.verdict
    script.evidence_digest = verdict.evidence_digest
    script.events.append(f"verdict {verdict.outcome.value}")
    if verdict.reasons:
        script.events.append("reasons " + ",".join(verdict.reasons))
    del state.in_redemption[cid]
    if verdict.outcome is VerdictOutcome.SUCCESS:
        uses = t.policy.uses_remaining - 1
        t = t.with_holder(requester).with_policy(replace(t.policy, uses_remaining=uses))
        if uses <= 0:
            final = t.invalidated()
            del state.urpo[cid]
            state.spent[cid] = SpentRecord(final=final, height=height, tx_index=tx_index)
            script.events.append("all uses consumed; coin spent")
            return final
        state.urpo[cid] = t
        script.events.append(f"{uses} use(s) remaining; returned to subject")
        return t
    t = t.with_holder(requester)
    state.urpo[cid] = t
    script.events.append("redemption failed; coin returned to subject")
    return t


_HANDLERS = {
    Opcode.REGISTER: _apply_register,
    Opcode.CREATE: _apply_create,
    Opcode.TRANSFER: _apply_transfer,
    Opcode.MODIFY: _apply_modify,
    Opcode.REVOKE: _apply_revoke,
    Opcode.REDEEM: _apply_redeem,
    Opcode.REDEEM_FINALIZE: _apply_redeem_finalize,
}


# ---------------------------------------------------------------------------
# blocks


def build_block(
    state: LedgerState,
    candidates: Iterable[SignedMessage],
    proposer: bytes,
    time_s: float,
) -> tuple[Block, list[tuple[bytes, str]]]:
    """Assemble a block from whatever candidate messages apply cleanly in
    sequence from the current state. Returns the block and the list of
    (tx_hash, reject code) for candidates that were skipped."""
    working = state.copy()
    height = state.height + 1
    time_s = max(float(time_s), state.last_time_s)
    txs: list[PolicyTransaction] = []
    skipped: list[tuple[bytes, str]] = []
    for msg in candidates:
        try:
            txs.append(apply_message(working, msg, height, time_s, len(txs)))
        except LedgerReject as exc:
            skipped.append((msg.tx_hash(), exc.code))
    block = Block(
        height=height,
        prev_hash=state.last_block_hash,
        proposer=proposer,
        time_s=time_s,
        txs=txs,
    )
    return block, skipped


def apply_block(state: LedgerState, block: Block) -> None:
    """Fold one committed block into the state, recomputing every script and
    resulting coin; any divergence from what the proposer claimed makes the
    whole block invalid."""
    if block.height != state.height + 1:
        raise BlockInvalid(f"height {block.height}, expected {state.height + 1}")
    if block.prev_hash != state.last_block_hash:
        raise BlockInvalid("previous-block hash mismatch")
    if block.time_s < state.last_time_s:
        raise BlockInvalid("block time went backwards")
    for i, tx in enumerate(block.txs):
        try:
            recomputed = apply_message(state, tx.msg, block.height, block.time_s, i)
        except LedgerReject as exc:
            raise BlockInvalid(f"tx {i} inadmissible: {exc.code}") from exc
        if canonical_encode(recomputed.to_doc()) != canonical_encode(tx.to_doc()):
            raise BlockInvalid(f"tx {i} result differs from proposer's claim")
    state.height = block.height
    state.last_block_hash = block.block_hash()
    state.last_time_s = block.time_s


def validate_block(block: Block, state: LedgerState) -> int:
    """1 iff every transaction is admissible in order from ``state``."""
    try:
        apply_block(state.copy(), block)
        return 1
    except BlockInvalid:
        return 0


def replay_chain(genesis_hash: bytes, blocks: Iterable[Block]) -> LedgerState:
    state = LedgerState(genesis_hash=genesis_hash)
    for block in blocks:
        apply_block(state, block)
    return state


# ---------------------------------------------------------------------------
# audit surface


@dataclass(frozen=True)
class AuditEntry:
    height: int
    tx_index: int
    tx: PolicyTransaction

    def to_doc(self) -> dict:
        return {"height": self.height, "tx_index": self.tx_index, "tx": self.tx.to_doc()}

    @classmethod
    def from_doc(cls, doc: dict) -> "AuditEntry":
        return cls(
            height=int(doc["height"]),
            tx_index=int(doc["tx_index"]),
            tx=PolicyTransaction.from_doc(doc["tx"]),
        )


@dataclass
class AuditTrail:
    cid: str
    found: bool
    entries: list[AuditEntry]

    def to_doc(self) -> dict:
        return {
            "cid": self.cid,
            "found": self.found,
            "entries": [e.to_doc() for e in self.entries],
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "AuditTrail":
        return cls(
            cid=doc["cid"],
            found=bool(doc["found"]),
            entries=[AuditEntry.from_doc(e) for e in doc["entries"]],
        )


def audit_trail(blocks: Iterable[Block], cid: str) -> AuditTrail:
    """Complete ordered lifecycle of one coin (register steps excluded);
    unknown ids come back empty with found=False."""
    entries: list[AuditEntry] = []
    for block in blocks:
        for i, tx in enumerate(block.txs):
            if tx.msg.op is not Opcode.REGISTER and tx.msg.cid == cid:
                entries.append(AuditEntry(height=block.height, tx_index=i, tx=tx))
    return AuditTrail(cid=cid, found=bool(entries), entries=entries)


def render_audit_trail(trail: AuditTrail) -> str:
    """Single text rendering shared by node responses and the CLI."""
    if not trail.found:
        return f"{trail.cid}: no transactions found\n"
    lines = [f"audit trail for {trail.cid} ({len(trail.entries)} transactions)"]
    for e in trail.entries:
        msg = e.tx.msg
        lines.append(f"  height {e.height} tx {e.tx_index}: {msg.op.value} by {_short(msg.caller)}")
        for event in e.tx.script.events:
            lines.append(f"    - {event}")
        if e.tx.script.evidence_digest:
            lines.append(f"    - evidence digest {e.tx.script.evidence_digest.hex()}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# chain persistence: append-only file of length-prefixed canonical blocks


class ChainStore:
    """In-memory block list, optionally mirrored to an append-only file."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = os.fspath(path) if path is not None else None
        self.blocks: list[Block] = []
        if self.path and os.path.exists(self.path):
            self.blocks = list(self._read_file(self.path))

    @staticmethod
    def _read_file(path: str) -> Iterable[Block]:
        with open(path, "rb") as fh:
            while True:
                header = fh.read(4)
                if not header:
                    return
                (length,) = struct.unpack(">I", header)
                payload = fh.read(length)
                if len(payload) != length:
                    raise BlockInvalid("truncated chain file")
                yield Block.from_doc(canonical_decode(payload))

    def append(self, block: Block) -> None:
        self.blocks.append(block)
        if self.path:
            payload = canonical_encode(block.to_doc())
            with open(self.path, "ab") as fh:
                fh.write(struct.pack(">I", len(payload)))
                fh.write(payload)

    def __len__(self) -> int:
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)
