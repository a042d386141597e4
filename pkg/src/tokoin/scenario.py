"""End-to-end delivery scenario harness.

A scenario script names the actors, the subject group, a policy template,
and an ordered step list (create, transfers, optional modify/revoke, redeem
with a trajectory label). It runs against the in-process cluster with the
access-control object attached to a light node, and produces a transcript
whose digest is reproducible bit-for-bit under a fixed seed.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .accumulator import AccumulatorState, MembershipWitness, acc_build, new_group
from .aco import AccessController, AcoConfig
from .client import Participant
from .crypto import gen_keypair
from .encoding import doc_digest
from .harness import Cluster
from .ledger import audit_trail
from .model import (
    AccessPolicy,
    ConditionExpr,
    GeoFence,
    ProcedureSpec,
    ResourceSpec,
    SubjectGroup,
    TimeWindow,
    composite_id,
)
from .trajectory import background, default_region_mask, gen_trajectory
from .vision import StandardPattern, mask_ref

DEFAULT_POLICY_TEMPLATE = {
    "window_s": 3600.0,
    "radius_m": 80.0,
    "uses": 1,
    "max_duration_s": 20.0,
    "grace_s": 4.0,
    "lat": 38.8997,
    "lon": -77.0486,
    "action": "in-home-delivery",
}

FULL_CONDITION = ConditionExpr.all_of(
    ConditionExpr.of("SubjectInGroup"),
    ConditionExpr.of("TimeInWindow"),
    ConditionExpr.of("GeoWithinRadius"),
    ConditionExpr.of("ResourceMatch"),
)


class ScenarioFailure(AssertionError):
    pass


def build_policy(group: AccumulatorState | SubjectGroup, resource: str, region_ref: str,
                 template: dict, start_s: float = 0.0) -> AccessPolicy:
    """Instantiate the 4W1H policy from a scenario template."""
    who = (
        group if isinstance(group, SubjectGroup)
        else SubjectGroup(n=group.n, g=group.g, value=group.value)
    )
    return AccessPolicy(
        who=who,
        what=ResourceSpec(resource_id=resource, action=template["action"]),
        when=TimeWindow(start=int(start_s), end=int(start_s + template["window_s"])),
        where=GeoFence(lat=template["lat"], lon=template["lon"], radius_m=template["radius_m"]),
        how=ProcedureSpec(
            actions=("unlock", "drop", "lock"),
            allowed_region=region_ref,
            max_duration_s=template["max_duration_s"],
            grace_s=template["grace_s"],
        ),
        condition=FULL_CONDITION,
        uses_remaining=int(template["uses"]),
    )


@dataclass
class Transcript:
    name: str
    seed: int
    cid: str
    final_status: str
    verdicts: list[dict]
    steps: list[dict]
    trail_ops: list[str]
    state_digest: str
    event_log: list[str] = field(default_factory=list)

    def to_doc(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "cid": self.cid,
            "final_status": self.final_status,
            "verdicts": self.verdicts,
            "steps": self.steps,
            "trail_ops": self.trail_ops,
            "state_digest": self.state_digest,
            "event_log": self.event_log,
        }

    def digest(self) -> bytes:
        return doc_digest(self.to_doc())


def _expectation(step: dict) -> tuple[str, str | None]:
    expect = step.get("expect", "commit")
    if expect == "commit":
        return "commit", None
    if expect.startswith("reject:"):
        return "reject", expect.split(":", 1)[1]
    raise ScenarioFailure(f"unknown expectation {expect!r}")


class ScenarioRun:
    """Mutable run state for one scripted scenario."""

    def __init__(self, script: dict, group_setup: AccumulatorState | None = None,
                 modulus_bits: int = 2048):
        self.script = script
        self.seed = int(script.get("seed", 0))
        self.rng = random.Random(self.seed)
        self.name = script.get("name", "scenario")
        self.resource = script.get("resource", "front-door")
        self.template = {**DEFAULT_POLICY_TEMPLATE, **script.get("policy", {})}

        self.cluster = Cluster(
            n_validators=int(script.get("validators", 4)),
            seed=self.seed,
        )
        self.aco_core = self.cluster.add_light_node("aco-node")
        self.cluster.start()

        self.actors: dict[str, Participant] = {}
        for i, actor_name in enumerate(script["actors"]):
            self.actors[actor_name] = Participant(
                gen_keypair(seed=bytes([50 + i]) + self.seed.to_bytes(4, "big") + bytes(27))
            )
        subject_names = script.get("subjects") or [
            a for a in script["actors"] if a.startswith("courier")
        ]
        setup = group_setup or new_group(modulus_bits=modulus_bits, rng=self.rng)
        self.group, self.witnesses = acc_build(
            setup, [self.actors[s].pk for s in subject_names]
        )

        self.mask = default_region_mask()
        self.standard = StandardPattern(background())
        self.device = Participant(
            gen_keypair(seed=bytes([49]) + self.seed.to_bytes(4, "big") + bytes(27))
        )
        self.controller = AccessController(
            device=self.device,
            resource_id=self.resource,
            standard=self.standard,
            masks={mask_ref(self.mask): self.mask},
            config=AcoConfig(),
            clock=lambda: self.cluster.sched.now,
        )
        self.owner: Participant | None = None
        self.t_id: int | None = None
        self.transcript_steps: list[dict] = []
        self.verdicts: list[dict] = []
        self.event_log: list[str] = []

    # -- helpers -------------------------------------------------------------

    @property
    def cid(self) -> str:
        return composite_id(self.owner.pk, self.t_id)

    def _register_everyone(self) -> None:
        for participant in self.actors.values():
            resp = self.cluster.submit_and_commit(participant.register())
            if not resp.get("ok"):
                raise ScenarioFailure(f"registration failed: {resp}")
        resp = self.cluster.submit_and_commit(
            self.device.register(
                kind="aco", resource_id=self.resource, pattern_digest=self.standard.digest
            )
        )
        if not resp.get("ok"):
            raise ScenarioFailure(f"access object registration failed: {resp}")

    def _submit_step(self, step: dict, msg) -> None:
        want, want_code = _expectation(step)
        resp = self.cluster.submit_and_commit(msg)
        if resp.get("ok"):
            outcome, code = "commit", None
        else:
            outcome, code = "reject", resp.get("code")
            if code == "TIMEOUT":
                raise ScenarioFailure(f"step {step} timed out waiting for commit")
        got = {"op": step["op"], "outcome": outcome}
        if code:
            got["code"] = code
        self.transcript_steps.append(got)
        if want != outcome or (want_code is not None and want_code != code):
            raise ScenarioFailure(
                f"step {step} expected {want}{':' + want_code if want_code else ''}, "
                f"got {outcome}{':' + str(code) if code else ''}"
            )
        self.event_log.append(f"{step['op']}:{outcome}" + (f":{code}" if code else ""))

    # -- steps ----------------------------------------------------------------

    def _step_create(self, step: dict) -> None:
        actor = self.actors[step["actor"]]
        self.owner = actor
        self.t_id = int(step.get("t_id", 1))
        policy = build_policy(
            self.group, self.resource, mask_ref(self.mask), self.template,
            start_s=0.0,
        )
        self._submit_step(step, actor.create(self.t_id, policy))

    def _step_transfer(self, step: dict) -> None:
        actor = self.actors[step["actor"]]
        to = self.actors[step["to"]]
        self._submit_step(step, actor.transfer(self.owner.pk, self.t_id, to.pk))

    def _step_modify(self, step: dict) -> None:
        actor = self.actors[step["actor"]]
        template = {**self.template, **step.get("policy", {})}
        policy = build_policy(
            self.group, self.resource, mask_ref(self.mask), template, start_s=0.0
        )
        self._submit_step(step, actor.modify(self.owner.pk, self.t_id, policy))

    def _step_revoke(self, step: dict) -> None:
        actor = self.actors[step["actor"]]
        self._submit_step(step, actor.revoke(self.owner.pk, self.t_id))

    def _step_redeem(self, step: dict) -> None:
        actor = self.actors[step["actor"]]
        witness = self.witnesses.get(actor.pk)
        if witness is None:
            witness = MembershipWitness(witness=2, member_prime=3)  # non-subject: bound to fail
        self._submit_step(step, actor.redeem(self.owner.pk, self.t_id, witness))
        if self.transcript_steps[-1]["outcome"] != "commit":
            return

        # hand-off committed: the access object now holds the coin and drives
        # the physical procedure off-chain
        self.cluster.run_for(0.3)
        t = self.aco_core.state.urpo[self.cid]
        if t.pk_h != self.device.pk:
            raise ScenarioFailure("coin not held by the access object after redeem commit")

        label = step.get("trajectory", "benign")
        trace = gen_trajectory(
            label,
            seed=self.seed * 1000 + len(self.transcript_steps),
            max_duration_s=t.policy.how.max_duration_s,
            grace_s=t.policy.how.grace_s,
            fps=self.controller.config.fps,
        )
        evidence = {
            "clock": {"unix_s": step.get("clock_s", self.cluster.sched.now)},
            "gps": step.get(
                "gps", {"lat": t.policy.where.lat, "lon": t.policy.where.lon}
            ),
        }
        msg, _records, verdict = self.controller.run_redemption(
            t,
            requester=actor.pk,
            witness=witness,
            evidence=evidence,
            trace_frames=trace.frames,
            region=self.mask,
            action_marks={trace.drop_frame: "drop"} if trace.drop_frame is not None else None,
        )
        self.verdicts.append(
            {
                "outcome": verdict.outcome.value,
                "reasons": list(verdict.reasons),
                "trajectory": label,
                "evidence_digest": verdict.evidence_digest.hex(),
            }
        )
        finalize_step = {"op": "redeem_finalize", "expect": step.get("finalize_expect", "commit")}
        self._submit_step(finalize_step, msg)

    # -- run --------------------------------------------------------------------

    def run(self) -> Transcript:
        self._register_everyone()
        handlers = {
            "create": self._step_create,
            "transfer": self._step_transfer,
            "modify": self._step_modify,
            "revoke": self._step_revoke,
            "redeem": self._step_redeem,
        }
        for step in self.script["steps"]:
            handlers[step["op"]](step)
        self.cluster.run_for(0.5)

        v0 = self.cluster.node("v0")
        trail = audit_trail(v0.chain, self.cid)
        return Transcript(
            name=self.name,
            seed=self.seed,
            cid=self.cid,
            final_status=v0.state.status_of(self.cid),
            verdicts=self.verdicts,
            steps=self.transcript_steps,
            trail_ops=[e.tx.msg.op.value for e in trail.entries],
            state_digest=v0.state.digest().hex(),
            event_log=self.event_log,
        )


def run_scenario(script: dict, group_setup: AccumulatorState | None = None,
                 modulus_bits: int = 2048) -> Transcript:
    """Execute one scripted delivery end to end; deterministic per seed."""
    return ScenarioRun(script, group_setup=group_setup, modulus_bits=modulus_bits).run()


def benign_delivery_script(seed: int = 7, label: str = "benign", **policy) -> dict:
    """The reference in-home delivery flow: create, hand to the seller, hand
    to a courier, redeem at the door."""
    return {
        "name": f"delivery-{label}",
        "seed": seed,
        "actors": ["customer", "seller", "courier1", "courier2"],
        "subjects": ["courier1", "courier2"],
        "resource": "front-door",
        "policy": policy,
        "steps": [
            {"op": "create", "actor": "customer", "t_id": 1},
            {"op": "transfer", "actor": "customer", "to": "seller"},
            {"op": "transfer", "actor": "seller", "to": "courier1"},
            {"op": "redeem", "actor": "courier1", "trajectory": label},
        ],
    }
