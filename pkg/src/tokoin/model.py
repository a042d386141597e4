"""Core data model: access coins, 4W1H policies, and signed request messages.

A coin (tokoin) is identified by the pair (owner pk, owner-scoped id) and
carries the owner's access policy. Every operation on a coin travels as one
signed message whose optional fields are fixed by the opcode; those messages
are what get audited on-chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Iterator

from .accumulator import MembershipWitness, acc_verify_member
from .crypto import PK_LEN, sign, verify_sig
from .encoding import canonical_encode, doc_digest, strip_none

EARTH_RADIUS_M = 6_371_000.0


class PolicyError(ValueError):
    pass


class MessageError(ValueError):
    pass


class MissingEvidence(LookupError):
    """A condition leaf needs an environment reading that was not supplied."""

    def __init__(self, kind: str):
        super().__init__(kind)
        self.kind = kind


class Role(Enum):
    OWNER = "owner"
    HOLDER = "holder"  # circulator: whoever currently holds the coin
    SUBJECT = "subject"
    ACO = "aco"


class Opcode(Enum):
    REGISTER = "register"
    CREATE = "create"
    TRANSFER = "transfer"
    MODIFY = "modify"
    REVOKE = "revoke"
    REDEEM = "redeem"
    REDEEM_FINALIZE = "redeem_finalize"


class VerdictOutcome(Enum):
    SUCCESS = "SUCCESS"
    OVERTIME = "OVERTIME"
    OVER_PRIVILEGED = "OVER-PRIVILEGED PATTERN"
    CONDITION_FAIL = "CONDITION-FAIL"


PREDICATES = ("SubjectInGroup", "TimeInWindow", "GeoWithinRadius", "ResourceMatch")

# reason codes reported when a leaf fails
_LEAF_REASON = {
    "SubjectInGroup": "SUBJECT",
    "TimeInWindow": "TIME",
    "GeoWithinRadius": "GEO",
    "ResourceMatch": "RESOURCE",
}


def haversine_m(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in meters on a spherical Earth."""
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = math.radians(lat2 - lat1)
    dlam = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(math.sqrt(a))


# ---------------------------------------------------------------------------
# condition expressions


@dataclass(frozen=True)
class ConditionExpr:
    """Boolean tree over the four W predicates.

    Internal nodes carry ``op`` in {AND, OR, NOT}; leaves carry ``leaf`` as
    one of the predicate names. AND/OR require at least two children, NOT
    exactly one.
    """

    op: str | None = None
    children: tuple["ConditionExpr", ...] = ()
    leaf: str | None = None

    @staticmethod
    def of(leaf: str) -> "ConditionExpr":
        return ConditionExpr(leaf=leaf)

    @staticmethod
    def all_of(*children: "ConditionExpr") -> "ConditionExpr":
        return ConditionExpr(op="AND", children=tuple(children))

    @staticmethod
    def any_of(*children: "ConditionExpr") -> "ConditionExpr":
        return ConditionExpr(op="OR", children=tuple(children))

    @staticmethod
    def negate(child: "ConditionExpr") -> "ConditionExpr":
        return ConditionExpr(op="NOT", children=(child,))

    def validate(self) -> None:
        if self.leaf is not None:
            if self.op is not None or self.children:
                raise PolicyError("leaf node must not carry op/children")
            if self.leaf not in PREDICATES:
                raise PolicyError(f"unknown predicate {self.leaf!r}")
            return
        if self.op == "NOT":
            if len(self.children) != 1:
                raise PolicyError("NOT takes exactly one child")
        elif self.op in ("AND", "OR"):
            if len(self.children) < 2:
                raise PolicyError(f"{self.op} takes at least two children")
        else:
            raise PolicyError(f"unknown operator {self.op!r}")
        for child in self.children:
            child.validate()

    def leaves(self) -> Iterator[str]:
        if self.leaf is not None:
            yield self.leaf
        else:
            for child in self.children:
                yield from child.leaves()

    def to_doc(self) -> dict:
        if self.leaf is not None:
            return {"leaf": self.leaf}
        return {"op": self.op, "children": [c.to_doc() for c in self.children]}

    @classmethod
    def from_doc(cls, doc: Any) -> "ConditionExpr":
        if not isinstance(doc, dict):
            raise PolicyError("condition node must be an object")
        if "leaf" in doc:
            return cls(leaf=doc["leaf"])
        return cls(
            op=doc.get("op"),
            children=tuple(cls.from_doc(c) for c in doc.get("children", ())),
        )


@dataclass(frozen=True)
class EvalEnv:
    """Environment snapshot a condition is evaluated against."""

    subject_ok: bool | None = None
    time_s: float | None = None
    pos: tuple[float, float] | None = None
    resource: str | None = None


def _eval_leaf(leaf: str, env: EvalEnv, policy: "AccessPolicy") -> bool:
    if leaf == "SubjectInGroup":
        if env.subject_ok is None:
            raise MissingEvidence("subject")
        return env.subject_ok
    if leaf == "TimeInWindow":
        if env.time_s is None:
            raise MissingEvidence("clock")
        return policy.when.start <= env.time_s <= policy.when.end
    if leaf == "GeoWithinRadius":
        if env.pos is None:
            raise MissingEvidence("gps")
        dist = haversine_m(env.pos[0], env.pos[1], policy.where.lat, policy.where.lon)
        return dist <= policy.where.radius_m
    if leaf == "ResourceMatch":
        if env.resource is None:
            raise MissingEvidence("resource")
        return env.resource == policy.what.resource_id
    raise PolicyError(f"unknown predicate {leaf!r}")


def _eval_node(node: ConditionExpr, env: EvalEnv, policy: "AccessPolicy") -> bool:
    if node.leaf is not None:
        return _eval_leaf(node.leaf, env, policy)
    if node.op == "AND":
        return all(_eval_node(c, env, policy) for c in node.children)
    if node.op == "OR":
        return any(_eval_node(c, env, policy) for c in node.children)
    return not _eval_node(node.children[0], env, policy)


def eval_condition(expr: ConditionExpr, env: EvalEnv, policy: "AccessPolicy") -> int:
    """Evaluate a condition tree; 1/0. Raises on malformed trees or missing
    evidence (the caller decides how to report those)."""
    expr.validate()
    return 1 if _eval_node(expr, env, policy) else 0


def failed_leaf_reasons(expr: ConditionExpr, env: EvalEnv, policy: "AccessPolicy") -> list[str]:
    """Reason codes for every distinct leaf predicate that evaluates false."""
    reasons: list[str] = []
    for leaf in expr.leaves():
        try:
            ok = _eval_leaf(leaf, env, policy)
        except MissingEvidence:
            ok = False
        code = _LEAF_REASON[leaf]
        if not ok and code not in reasons:
            reasons.append(code)
    return sorted(reasons)


# ---------------------------------------------------------------------------
# policy


@dataclass(frozen=True)
class SubjectGroup:
    """Public accumulator triple for the subject group (the "who")."""

    n: int
    g: int
    value: int

    def to_doc(self) -> dict:
        return {"n": format(self.n, "x"), "g": format(self.g, "x"), "value": format(self.value, "x")}

    @classmethod
    def from_doc(cls, doc: dict) -> "SubjectGroup":
        return cls(n=int(doc["n"], 16), g=int(doc["g"], 16), value=int(doc["value"], 16))


@dataclass(frozen=True)
class ResourceSpec:
    resource_id: str
    action: str

    def to_doc(self) -> dict:
        return {"resource_id": self.resource_id, "action": self.action}

    @classmethod
    def from_doc(cls, doc: dict) -> "ResourceSpec":
        return cls(resource_id=doc["resource_id"], action=doc["action"])


@dataclass(frozen=True)
class TimeWindow:
    start: int
    end: int

    def to_doc(self) -> dict:
        return {"start": self.start, "end": self.end}

    @classmethod
    def from_doc(cls, doc: dict) -> "TimeWindow":
        return cls(start=int(doc["start"]), end=int(doc["end"]))


@dataclass(frozen=True)
class GeoFence:
    lat: float
    lon: float
    radius_m: float

    def to_doc(self) -> dict:
        return {"lat": float(self.lat), "lon": float(self.lon), "radius_m": float(self.radius_m)}

    @classmethod
    def from_doc(cls, doc: dict) -> "GeoFence":
        return cls(lat=float(doc["lat"]), lon=float(doc["lon"]), radius_m=float(doc["radius_m"]))


@dataclass(frozen=True)
class ProcedureSpec:
    """The "how": ordered atomic actions plus spatial and time bounds."""

    actions: tuple[str, ...]
    allowed_region: str
    max_duration_s: float
    grace_s: float = 0.0

    def to_doc(self) -> dict:
        return {
            "actions": list(self.actions),
            "allowed_region": self.allowed_region,
            "max_duration_s": float(self.max_duration_s),
            "grace_s": float(self.grace_s),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "ProcedureSpec":
        return cls(
            actions=tuple(doc["actions"]),
            allowed_region=doc["allowed_region"],
            max_duration_s=float(doc["max_duration_s"]),
            grace_s=float(doc.get("grace_s", 0.0)),
        )


@dataclass(frozen=True)
class AccessPolicy:
    who: SubjectGroup
    what: ResourceSpec
    when: TimeWindow
    where: GeoFence
    how: ProcedureSpec
    condition: ConditionExpr
    uses_remaining: int = 1

    def validate(self) -> None:
        if self.when.start >= self.when.end:
            raise PolicyError("time window start must precede end")
        if self.where.radius_m <= 0:
            raise PolicyError("geofence radius must be positive")
        if self.uses_remaining < 1:
            raise PolicyError("uses_remaining must be at least 1")
        if not self.how.actions:
            raise PolicyError("procedure must list at least one action")
        if self.how.max_duration_s <= 0:
            raise PolicyError("max_duration_s must be positive")
        if self.how.grace_s < 0:
            raise PolicyError("grace_s must be non-negative")
        self.condition.validate()

    def to_doc(self) -> dict:
        return {
            "who": self.who.to_doc(),
            "what": self.what.to_doc(),
            "when": self.when.to_doc(),
            "where": self.where.to_doc(),
            "how": self.how.to_doc(),
            "condition": self.condition.to_doc(),
            "uses_remaining": self.uses_remaining,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "AccessPolicy":
        try:
            return cls(
                who=SubjectGroup.from_doc(doc["who"]),
                what=ResourceSpec.from_doc(doc["what"]),
                when=TimeWindow.from_doc(doc["when"]),
                where=GeoFence.from_doc(doc["where"]),
                how=ProcedureSpec.from_doc(doc["how"]),
                condition=ConditionExpr.from_doc(doc["condition"]),
                uses_remaining=int(doc["uses_remaining"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise PolicyError(f"malformed policy document: {exc}") from exc


# ---------------------------------------------------------------------------
# tokoin


def composite_id(pk_o: bytes, t_id: int) -> str:
    """Globally unique display id: owner pk hex, dash, decimal coin id."""
    return f"{pk_o.hex()}-{t_id}"


def parse_composite_id(cid: str) -> tuple[bytes, int]:
    pk_hex, _, t_id = cid.rpartition("-")
    if not pk_hex or not t_id.isdigit():
        raise MessageError(f"malformed composite id {cid!r}")
    pk = bytes.fromhex(pk_hex)
    if len(pk) != PK_LEN:
        raise MessageError("composite id owner key has wrong length")
    return pk, int(t_id)


@dataclass(frozen=True)
class Tokoin:
    t_id: int
    pk_o: bytes
    pk_h: bytes
    policy: AccessPolicy
    is_valid: bool = True

    @property
    def cid(self) -> str:
        return composite_id(self.pk_o, self.t_id)

    def to_doc(self) -> dict:
        return {
            "t_id": self.t_id,
            "owner": self.pk_o,
            "holder": self.pk_h,
            "policy": self.policy.to_doc(),
            "is_valid": self.is_valid,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "Tokoin":
        return cls(
            t_id=int(doc["t_id"]),
            pk_o=bytes.fromhex(doc["owner"]) if isinstance(doc["owner"], str) else doc["owner"],
            pk_h=bytes.fromhex(doc["holder"]) if isinstance(doc["holder"], str) else doc["holder"],
            policy=AccessPolicy.from_doc(doc["policy"]),
            is_valid=bool(doc["is_valid"]),
        )

    def with_holder(self, pk: bytes) -> "Tokoin":
        return replace(self, pk_h=pk)

    def with_policy(self, policy: AccessPolicy) -> "Tokoin":
        return replace(self, policy=policy)

    def invalidated(self) -> "Tokoin":
        return replace(self, is_valid=False)


def verify_role(t: Tokoin, pk: bytes, role: Role, witness: MembershipWitness | None = None) -> int:
    """Role check against ledger state only; caller claims are never trusted.

    Owner and holder are direct key comparisons; subject membership is an
    accumulator verification against the policy's public triple.
    """
    if role is Role.OWNER:
        return 1 if pk == t.pk_o else 0
    if role is Role.HOLDER:
        return 1 if pk == t.pk_h else 0
    if role is Role.SUBJECT:
        if witness is None:
            return 0
        who = t.policy.who
        return acc_verify_member(who.n, who.g, who.value, pk, witness)
    raise ValueError("the aco role is resolved against the on-chain registry, not the coin")


# ---------------------------------------------------------------------------
# signed messages


@dataclass(frozen=True)
class RegistrationInfo:
    """Payload of a register message: plain participant, or an access-control
    object binding itself to one resource (with its background-pattern digest)."""

    kind: str = "participant"  # "participant" | "aco"
    resource_id: str | None = None
    pattern_digest: bytes | None = None

    def validate(self) -> None:
        if self.kind not in ("participant", "aco"):
            raise MessageError(f"unknown registration kind {self.kind!r}")
        if self.kind == "aco" and not self.resource_id:
            raise MessageError("aco registration must name its resource")
        if self.kind == "participant" and (self.resource_id or self.pattern_digest):
            raise MessageError("participant registration carries no resource binding")

    def to_doc(self) -> dict:
        return strip_none(
            {"kind": self.kind, "resource_id": self.resource_id, "pattern_digest": self.pattern_digest}
        )

    @classmethod
    def from_doc(cls, doc: dict) -> "RegistrationInfo":
        pattern = doc.get("pattern_digest")
        return cls(
            kind=doc.get("kind", "participant"),
            resource_id=doc.get("resource_id"),
            pattern_digest=bytes.fromhex(pattern) if isinstance(pattern, str) else pattern,
        )


@dataclass(frozen=True)
class RedeemVerdict:
    """Access-control object's signed redemption outcome."""

    outcome: VerdictOutcome
    evidence_digest: bytes
    violation_pattern: dict | None = None  # bitmap doc, present iff over-privileged
    reasons: tuple[str, ...] = ()

    def validate(self) -> None:
        has_pattern = self.violation_pattern is not None
        if has_pattern != (self.outcome is VerdictOutcome.OVER_PRIVILEGED):
            raise MessageError("violation pattern present iff outcome is over-privileged")

    def to_doc(self) -> dict:
        return strip_none(
            {
                "outcome": self.outcome.value,
                "evidence_digest": self.evidence_digest,
                "violation_pattern": self.violation_pattern,
                "reasons": list(self.reasons) if self.reasons else None,
            }
        )

    @classmethod
    def from_doc(cls, doc: dict) -> "RedeemVerdict":
        ed = doc["evidence_digest"]
        return cls(
            outcome=VerdictOutcome(doc["outcome"]),
            evidence_digest=bytes.fromhex(ed) if isinstance(ed, str) else ed,
            violation_pattern=doc.get("violation_pattern"),
            reasons=tuple(doc.get("reasons", ())),
        )


# option-field presence per opcode: field name -> set of opcodes requiring it
_REQUIRED_WITH = {
    "policy": {Opcode.CREATE, Opcode.MODIFY},
    "pk_next": {Opcode.TRANSFER},
    "witness": {Opcode.REDEEM},
    "verdict": {Opcode.REDEEM_FINALIZE},
    "reg": {Opcode.REGISTER},
}
# fields that may additionally appear for an opcode without being required
_ALLOWED_EXTRA = {"witness_blobs": {Opcode.MODIFY}}


@dataclass(frozen=True)
class SignedMessage:
    """One ledger request: coin reference, opcode, opcode-specific payload,
    per-caller anti-replay nonce, and the caller's signature."""

    caller: bytes
    owner: bytes
    t_id: int
    op: Opcode
    nonce: int
    policy: AccessPolicy | None = None
    pk_next: bytes | None = None
    witness: MembershipWitness | None = None
    verdict: RedeemVerdict | None = None
    witness_blobs: dict[str, dict] | None = None
    reg: RegistrationInfo | None = None
    sig: bytes = b""

    @property
    def cid(self) -> str:
        return composite_id(self.owner, self.t_id)

    def body_doc(self) -> dict:
        return strip_none(
            {
                "caller": self.caller,
                "owner": self.owner,
                "t_id": self.t_id,
                "op": self.op.value,
                "nonce": self.nonce,
                "policy": self.policy.to_doc() if self.policy else None,
                "pk_next": self.pk_next,
                "witness": self.witness.to_doc() if self.witness else None,
                "verdict": self.verdict.to_doc() if self.verdict else None,
                "witness_blobs": self.witness_blobs,
                "reg": self.reg.to_doc() if self.reg else None,
            }
        )

    def to_doc(self) -> dict:
        doc = self.body_doc()
        doc["sig"] = self.sig
        return doc

    def tx_hash(self) -> bytes:
        return doc_digest(self.to_doc())

    @classmethod
    def from_doc(cls, doc: dict) -> "SignedMessage":
        def as_bytes(v):
            return bytes.fromhex(v) if isinstance(v, str) else v

        try:
            witness = doc.get("witness")
            return cls(
                caller=as_bytes(doc["caller"]),
                owner=as_bytes(doc["owner"]),
                t_id=int(doc["t_id"]),
                op=Opcode(doc["op"]),
                nonce=int(doc["nonce"]),
                policy=AccessPolicy.from_doc(doc["policy"]) if "policy" in doc else None,
                pk_next=as_bytes(doc.get("pk_next")) if "pk_next" in doc else None,
                witness=MembershipWitness.from_doc(witness) if witness else None,
                verdict=RedeemVerdict.from_doc(doc["verdict"]) if "verdict" in doc else None,
                witness_blobs=doc.get("witness_blobs"),
                reg=RegistrationInfo.from_doc(doc["reg"]) if "reg" in doc else None,
                sig=as_bytes(doc.get("sig", b"")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MessageError(f"malformed message document: {exc}") from exc

    def check_shape(self) -> None:
        """Structural validation: option-field presence must match the opcode."""
        if len(self.caller) != PK_LEN or len(self.owner) != PK_LEN:
            raise MessageError("malformed participant key")
        if self.t_id < 0 or self.t_id >= 1 << 64:
            raise MessageError("coin id out of range")
        if self.nonce < 0:
            raise MessageError("negative nonce")
        for fname, ops in _REQUIRED_WITH.items():
            present = getattr(self, fname) is not None
            if present != (self.op in ops):
                state = "missing" if not present else "unexpected"
                raise MessageError(f"{state} field {fname!r} for op {self.op.value}")
        for fname, ops in _ALLOWED_EXTRA.items():
            if getattr(self, fname) is not None and self.op not in ops:
                raise MessageError(f"unexpected field {fname!r} for op {self.op.value}")
        if self.op in (Opcode.REGISTER, Opcode.CREATE) and self.caller != self.owner:
            raise MessageError(f"{self.op.value} must reference the caller itself")
        if self.pk_next is not None and len(self.pk_next) != PK_LEN:
            raise MessageError("malformed receiver key")
        if self.reg is not None:
            self.reg.validate()
        if self.verdict is not None:
            self.verdict.validate()


def sign_message(msg: SignedMessage, sk: bytes) -> SignedMessage:
    return replace(msg, sig=sign(sk, canonical_encode(msg.body_doc())))


def verify_message(msg: SignedMessage) -> int:
    """1 iff option fields match the opcode and the signature verifies over
    the canonical body; never raises for bad input."""
    try:
        msg.check_shape()
    except MessageError:
        return 0
    return verify_sig(msg.caller, canonical_encode(msg.body_doc()), msg.sig)
