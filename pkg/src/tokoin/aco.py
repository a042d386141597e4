"""Simulated trusted access-control object.

Holds a device key in place of real secure-enclave hardware: every
environment sample is signed at capture, the 4W conditions are checked
against the coin's policy, the smart lock is driven through the procedure's
ordered actions, and the camera stream is differenced against the registered
background to catch out-of-region movement. The verdict goes back on-chain
as a finalize message; the full evidence bundle stays local, retrievable by
the digest the chain records.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .accumulator import MembershipWitness, acc_verify_member
from .client import Participant
from .crypto import sha256, sign, verify_sig
from .encoding import canonical_encode, strip_none
from .model import (
    EvalEnv,
    MissingEvidence,
    RedeemVerdict,
    Tokoin,
    VerdictOutcome,
    eval_condition,
    failed_leaf_reasons,
)
from .vision import (
    DEFAULT_TAU,
    DENOISE_MIN_PIXELS,
    StandardPattern,
    accumulate,
    bitmap_to_doc,
    frame_diff,
    frame_digest,
)


class AcoError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvidenceRecord:
    """One signed environment sample or controller event."""

    kind: str  # gps | clock | frame | action | event
    payload: dict
    sample_time: float
    sig: bytes = b""

    def body_doc(self) -> dict:
        return {"kind": self.kind, "payload": self.payload, "sample_time": float(self.sample_time)}

    def to_doc(self) -> dict:
        doc = self.body_doc()
        doc["sig"] = self.sig
        return doc


def make_evidence(device_sk: bytes, kind: str, payload: dict, sample_time: float) -> EvidenceRecord:
    record = EvidenceRecord(kind=kind, payload=payload, sample_time=sample_time)
    return EvidenceRecord(kind=kind, payload=payload, sample_time=sample_time,
                          sig=sign(device_sk, canonical_encode(record.body_doc())))


def verify_evidence(device_pk: bytes, record: EvidenceRecord) -> int:
    return verify_sig(device_pk, canonical_encode(record.body_doc()), record.sig)


def bundle_bytes(records: Iterable[EvidenceRecord]) -> bytes:
    return b"\n".join(canonical_encode(r.to_doc()) for r in records)


class EvidenceStore:
    """Local persistence for sealed evidence bundles, addressed by digest."""

    def __init__(self, root: str | os.PathLike | None = None):
        self.root = Path(root) if root is not None else None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def persist(self, records: list[EvidenceRecord]) -> bytes:
        data = bundle_bytes(records)
        digest = sha256(data)
        if self.root is not None:
            (self.root / (digest.hex() + ".evidence")).write_bytes(data)
        return digest

    def retrieve(self, digest: bytes) -> bytes:
        if self.root is None:
            raise AcoError("no evidence directory configured")
        path = self.root / (digest.hex() + ".evidence")
        if not path.exists():
            raise AcoError(f"no bundle for digest {digest.hex()}")
        return path.read_bytes()


class SmartLock:
    """Simulated resource: a lock that is either locked or unlocked."""

    def __init__(self):
        self.state = "locked"
        self.log: list[tuple[float, str]] = []

    def apply(self, action: str, now: float) -> bool:
        ok = (
            (action == "unlock" and self.state == "locked")
            or (action == "lock" and self.state == "unlocked")
            or (action == "drop" and self.state == "unlocked")
        )
        if ok:
            if action == "unlock":
                self.state = "unlocked"
            elif action == "lock":
                self.state = "locked"
            self.log.append((now, action))
        else:
            self.log.append((now, f"refused:{action}"))
        return ok


@dataclass
class ConditionResult:
    passed: bool
    reasons: tuple[str, ...] = ()


@dataclass
class AcoConfig:
    tau: int = DEFAULT_TAU
    min_component: int = DENOISE_MIN_PIXELS
    fps: float = 4.0
    still_frames: int = 3  # consecutive all-clear frames after the drop => done


@dataclass
class _Session:
    tokoin: Tokoin
    requester: bytes
    records: list[EvidenceRecord] = field(default_factory=list)
    conditions_passed: bool = False
    action_cursor: int = 0
    violation: np.ndarray | None = None


class AccessController:
    """One access-control object bound to one resource.

    A single session runs at a time; the lock is exclusive to it. The unlock
    action is unreachable until the session's condition check has passed.
    """

    def __init__(
        self,
        device: Participant,
        resource_id: str,
        standard: StandardPattern,
        masks: dict[str, np.ndarray],
        evidence_root: str | os.PathLike | None = None,
        config: AcoConfig | None = None,
        clock: Callable[[], float] = time.time,
    ):
        self.device = device
        self.resource_id = resource_id
        self.standard = standard
        self.masks = dict(masks)
        self.store = EvidenceStore(evidence_root)
        self.config = config or AcoConfig()
        self.clock = clock
        self.lock = SmartLock()
        self.session: _Session | None = None

    # -- session -----------------------------------------------------------------

    def begin_session(self, t: Tokoin, requester: bytes) -> None:
        if self.session is not None:
            raise AcoError("a monitoring session is already active on this lock")
        if t.pk_h != self.device.pk:
            raise AcoError("coin is not held by this access object")
        self.session = _Session(tokoin=t, requester=requester)
        self._event("session_start", {"cid": t.cid, "requester": requester.hex()})

    def _end_session(self) -> list[EvidenceRecord]:
        records = self.session.records
        self.session = None
        return records

    def _record(self, kind: str, payload: dict, sample_time: float | None = None) -> EvidenceRecord:
        record = make_evidence(
            self.device.keypair.sk, kind, payload,
            self.clock() if sample_time is None else sample_time,
        )
        self.session.records.append(record)
        return record

    def _event(self, name: str, extra: dict | None = None, sample_time: float | None = None) -> None:
        self._record("event", strip_none({"name": name, **(extra or {})}), sample_time)

    # -- condition verification ------------------------------------------------------

    def check_conditions(
        self,
        t: Tokoin,
        evidence: dict[str, dict],
        subject_pk: bytes,
        witness: MembershipWitness | None,
    ) -> ConditionResult:
        """Evaluate the policy's condition tree against sampled evidence.

        ``evidence`` maps kind to a raw reading: ``{"clock": {"unix_s": ...},
        "gps": {"lat": ..., "lon": ...}}``; each reading is signed into the
        session log at capture.
        """
        if self.session is None:
            raise AcoError("no active session")
        who = t.policy.who
        subject_ok = bool(acc_verify_member(who.n, who.g, who.value, subject_pk, witness))
        env_kw: dict = {"subject_ok": subject_ok, "resource": self.resource_id}
        if "clock" in evidence:
            self._record("clock", evidence["clock"])
            env_kw["time_s"] = float(evidence["clock"]["unix_s"])
        if "gps" in evidence:
            self._record("gps", evidence["gps"])
            env_kw["pos"] = (float(evidence["gps"]["lat"]), float(evidence["gps"]["lon"]))
        env = EvalEnv(**env_kw)
        try:
            ok = eval_condition(t.policy.condition, env, t.policy)
        except MissingEvidence as exc:
            self._event("condition_fail", {"reasons": ["EVIDENCE_MISSING"], "missing": exc.kind})
            return ConditionResult(False, ("EVIDENCE_MISSING",))
        if ok:
            self.session.conditions_passed = True
            self._event("conditions_pass", {})
            return ConditionResult(True)
        reasons = tuple(failed_leaf_reasons(t.policy.condition, env, t.policy))
        self._event("condition_fail", {"reasons": list(reasons)})
        return ConditionResult(False, reasons)

    # -- actuation ----------------------------------------------------------------------

    def actuate(self, action: str, sample_time: float | None = None) -> bool:
        """Drive the lock through the procedure's actions, in listed order only."""
        if self.session is None:
            raise AcoError("no active session")
        session = self.session
        expected = session.tokoin.policy.how.actions
        now = self.clock() if sample_time is None else sample_time
        if action == "unlock" and not session.conditions_passed:
            self._record("action", {"action": action, "applied": False, "why": "conditions not met"}, now)
            return False
        if session.action_cursor >= len(expected) or expected[session.action_cursor] != action:
            self._record("action", {"action": action, "applied": False, "why": "out of order"}, now)
            return False
        applied = self.lock.apply(action, now)
        self._record("action", {"action": action, "applied": applied}, now)
        if applied:
            session.action_cursor += 1
        return applied

    # -- procedure monitoring ---------------------------------------------------------------

    def monitor_procedure(
        self,
        t: Tokoin,
        frames: Iterable[np.ndarray],
        region: np.ndarray,
        start_time: float,
        action_marks: dict[int, str] | None = None,
    ) -> RedeemVerdict:
        """Watch the camera stream until a verdict is reached.

        The accumulated motion pattern only ever gains bits; the first
        accumulated bit outside the permitted region decides over-privileged
        access on the spot. Overstaying the procedure budget (plus grace)
        decides overtime; the scene returning to the background for a few
        consecutive frames after the drop decides success.
        """
        if self.session is None:
            raise AcoError("no active session")
        cfg = self.config
        how = t.policy.how
        action_marks = action_marks or {}
        pattern: np.ndarray | None = None
        still = 0
        alarm_rung = False
        outcome: VerdictOutcome | None = None
        reasons: tuple[str, ...] = ()

        for k, frame in enumerate(frames):
            ts = start_time + k / cfg.fps
            live = frame_diff(self.standard.frame, frame, cfg.tau, cfg.min_component)
            pattern = accumulate(pattern, live)
            self._record("frame", {"idx": k, "digest": frame_digest(frame).hex()}, ts)

            if bool((pattern & ~region).any()):
                self.session.violation = pattern.copy()
                self._event("violation_out_of_region", {"frame": k}, ts)
                self._event("door_lock", {}, ts)
                self._event("police_call", {}, ts)
                outcome = VerdictOutcome.OVER_PRIVILEGED
                break

            if k in action_marks:
                self.actuate(action_marks[k], ts)

            elapsed = ts - start_time
            if not alarm_rung and elapsed > how.max_duration_s:
                alarm_rung = True
                self._event("alarm_bell", {"elapsed_s": elapsed}, ts)
            if elapsed > how.max_duration_s + how.grace_s:
                self._event("police_call", {"elapsed_s": elapsed}, ts)
                outcome = VerdictOutcome.OVERTIME
                break

            if self.session.action_cursor >= 2 and not bool(live.any()):
                still += 1
                if still >= cfg.still_frames:
                    outcome = VerdictOutcome.SUCCESS
                    break
            else:
                still = 0

        if outcome is None:
            self._event("sensor_lost", {})
            outcome = VerdictOutcome.CONDITION_FAIL
            reasons = ("SENSOR_LOST",)

        # close the procedure: the door ends locked whatever happened
        if self.lock.state == "unlocked":
            self.actuate("lock")
            if self.lock.state == "unlocked":  # out-of-order tail, force it shut
                self.lock.apply("lock", self.clock())
                self._record("action", {"action": "lock", "applied": True, "why": "forced"})
        self._event("verdict", {"outcome": outcome.value})

        violation_doc = None
        if outcome is VerdictOutcome.OVER_PRIVILEGED:
            violation_doc = _hex_doc(bitmap_to_doc(self.session.violation))
        digest = self.store.persist(self.session.records)
        return RedeemVerdict(
            outcome=outcome,
            evidence_digest=digest,
            violation_pattern=violation_doc,
            reasons=reasons,
        )

    def fail_conditions_verdict(self, result: ConditionResult) -> RedeemVerdict:
        """Seal a condition-check failure into a verdict without monitoring."""
        if self.session is None:
            raise AcoError("no active session")
        self._event("verdict", {"outcome": VerdictOutcome.CONDITION_FAIL.value})
        digest = self.store.persist(self.session.records)
        return RedeemVerdict(
            outcome=VerdictOutcome.CONDITION_FAIL,
            evidence_digest=digest,
            reasons=result.reasons,
        )

    # -- finalize ---------------------------------------------------------------------------

    def finalize(self, t: Tokoin, verdict: RedeemVerdict):
        """Build the signed on-chain finalize message and end the session."""
        if self.session is None:
            raise AcoError("no active session")
        records = self._end_session()
        msg = self.device.redeem_finalize(t.pk_o, t.t_id, verdict)
        return msg, records

    def run_redemption(
        self,
        t: Tokoin,
        requester: bytes,
        witness: MembershipWitness | None,
        evidence: dict[str, dict],
        trace_frames: Iterable[np.ndarray],
        region: np.ndarray,
        action_marks: dict[int, str] | None = None,
    ):
        """Full redemption: verify conditions, open, monitor, decide, sign."""
        self.begin_session(t, requester)
        check = self.check_conditions(t, evidence, requester, witness)
        if not check.passed:
            verdict = self.fail_conditions_verdict(check)
            return self.finalize(t, verdict) + (verdict,)
        self.actuate("unlock")
        verdict = self.monitor_procedure(
            t, trace_frames, region, start_time=self.clock(), action_marks=action_marks
        )
        return self.finalize(t, verdict) + (verdict,)


def _hex_doc(doc: dict) -> dict:
    return {k: (v.hex() if isinstance(v, bytes) else v) for k, v in doc.items()}


def submit_with_retry(
    submit: Callable[[dict], dict],
    msg_doc: dict,
    deadline_s: float,
    now: Callable[[], float] = time.time,
    sleep: Callable[[float], None] = time.sleep,
    base_backoff_s: float = 0.2,
) -> bool:
    """Push the finalize message until it is accepted or the deadline passes."""
    attempt = 0
    while True:
        try:
            resp = submit(msg_doc)
            if resp.get("ok"):
                return True
        except Exception:
            pass
        attempt += 1
        delay = base_backoff_s * (2 ** min(attempt, 8))
        if now() + delay > deadline_s:
            return False
        sleep(delay)
