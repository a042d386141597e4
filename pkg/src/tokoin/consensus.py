"""Weighted BFT consensus: propose / prevote / precommit with locking.

One engine instance drives one node through successive heights. The engine is
a pure state machine: feed it proposals, votes, and timeout events; it returns
actions (broadcast, schedule timeout, commit). It never touches sockets,
clocks, or signatures -- the hosting layer authenticates messages before
delivery and signs what the engine asks to broadcast. Fork-free as long as
less than one third of the total validator weight misbehaves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable

from .encoding import doc_digest, strip_none

TIMEOUT_PROPOSE_S = 0.100
TIMEOUT_PREVOTE_S = 0.050
TIMEOUT_PRECOMMIT_S = 0.050
_TIMEOUT_CAP_DOUBLINGS = 12


class Step(Enum):
    PROPOSE = "propose"
    PREVOTE = "prevote"
    PRECOMMIT = "precommit"


@dataclass(frozen=True)
class Validator:
    pk: bytes
    weight: int

    def __post_init__(self) -> None:
        if self.weight <= 0:
            raise ValueError("validator weight must be positive")


class ValidatorSet:
    """Fixed-at-genesis validator set with a deterministic weighted proposer
    schedule: over any window of total-weight consecutive slots, each
    validator proposes exactly its weight many times."""

    def __init__(self, validators: list[Validator]):
        if not validators:
            raise ValueError("validator set must be non-empty")
        self.validators = sorted(validators, key=lambda v: v.pk)
        if len({v.pk for v in self.validators}) != len(self.validators):
            raise ValueError("duplicate validator key")
        self.total_weight = sum(v.weight for v in self.validators)
        self.weight_of = {v.pk: v.weight for v in self.validators}
        self._schedule = self._build_schedule()

    def _build_schedule(self) -> list[bytes]:
        # smooth weighted round-robin, tie-broken by key order
        credit = {v.pk: 0 for v in self.validators}
        schedule: list[bytes] = []
        for _ in range(self.total_weight):
            for v in self.validators:
                credit[v.pk] += v.weight
            pick = max(self.validators, key=lambda v: (credit[v.pk], v.pk))
            credit[pick.pk] -= self.total_weight
            schedule.append(pick.pk)
        return schedule

    def __contains__(self, pk: bytes) -> bool:
        return pk in self.weight_of

    def __len__(self) -> int:
        return len(self.validators)

    def quorum_met(self, weight: int) -> int:
        """Strictly more than two thirds of the total weight."""
        return 1 if 3 * weight > 2 * self.total_weight else 0

    def one_third_exceeded(self, weight: int) -> bool:
        return 3 * weight > self.total_weight

    def proposer_for(self, height: int, round_: int) -> bytes:
        return self._schedule[(height + round_) % self.total_weight]


def quorum_met(tally_weight: int, vset: ValidatorSet) -> int:
    return vset.quorum_met(tally_weight)


@dataclass(frozen=True)
class Genesis:
    chain_id: str
    validators: tuple[Validator, ...]

    def to_doc(self) -> dict:
        return {
            "chain_id": self.chain_id,
            "validators": [{"pk": v.pk, "weight": v.weight} for v in self.validators],
        }

    def genesis_hash(self) -> bytes:
        return doc_digest(self.to_doc())

    def validator_set(self) -> ValidatorSet:
        return ValidatorSet([Validator(v.pk, v.weight) for v in self.validators])

    @classmethod
    def from_doc(cls, doc: dict) -> "Genesis":
        vals = tuple(
            Validator(
                pk=bytes.fromhex(v["pk"]) if isinstance(v["pk"], str) else v["pk"],
                weight=int(v["weight"]),
            )
            for v in doc["validators"]
        )
        return cls(chain_id=doc["chain_id"], validators=vals)


@dataclass(frozen=True)
class Vote:
    height: int
    round: int
    step: str  # "prevote" | "precommit"
    block_hash: bytes | None  # None votes nil
    voter: bytes
    sig: bytes = b""

    def body_doc(self) -> dict:
        return strip_none(
            {
                "height": self.height,
                "round": self.round,
                "step": self.step,
                "block_hash": self.block_hash,
                "voter": self.voter,
            }
        )


@dataclass(frozen=True)
class Proposal:
    height: int
    round: int
    payload: Any  # opaque block object; hashed/validated via engine callbacks
    payload_hash: bytes
    valid_round: int  # -1 when proposing fresh
    proposer: bytes
    sig: bytes = b""


# engine output actions ------------------------------------------------------


@dataclass(frozen=True)
class BroadcastVote:
    vote: Vote


@dataclass(frozen=True)
class BroadcastProposal:
    proposal: Proposal


@dataclass(frozen=True)
class ScheduleTimeout:
    kind: str  # "propose" | "prevote" | "precommit"
    height: int
    round: int
    delay_s: float


@dataclass(frozen=True)
class Commit:
    height: int
    payload: Any
    payload_hash: bytes
    round: int
    commit_votes: tuple[Vote, ...]


@dataclass
class RoundState:
    """Everything one height of consensus tracks."""

    height: int
    round: int = 0
    step: Step = Step.PROPOSE
    started: bool = False  # round 0 entered; events before that are buffered
    locked_hash: bytes | None = None
    locked_round: int = -1
    valid_hash: bytes | None = None
    valid_round: int = -1
    proposals: dict[int, Proposal] = field(default_factory=dict)
    payloads: dict[bytes, Any] = field(default_factory=dict)
    prevotes: dict[int, dict[bytes, Vote]] = field(default_factory=dict)
    precommits: dict[int, dict[bytes, Vote]] = field(default_factory=dict)
    fired: set = field(default_factory=set)  # once-only triggers


def _timeout(base: float, round_: int) -> float:
    return base * (2 ** min(round_, _TIMEOUT_CAP_DOUBLINGS))


class Engine:
    """Single-node consensus state machine.

    ``block_provider(height, round) -> payload | None`` supplies a fresh block
    when this node is the scheduled proposer (None defers the proposal;
    call :meth:`maybe_propose` to retry). ``block_validator`` and ``hash_fn``
    interpret the opaque payloads.
    """

    def __init__(
        self,
        me: bytes,
        vset: ValidatorSet,
        block_provider: Callable[[int, int], Any],
        block_validator: Callable[[Any], bool],
        hash_fn: Callable[[Any], bytes],
        start_height: int = 0,
        trace: Callable[[str, dict], None] | None = None,
        vote_signer: Callable[[Vote], Vote] | None = None,
    ):
        self.me = me
        self.vset = vset
        self.block_provider = block_provider
        self.block_validator = block_validator
        self.hash_fn = hash_fn
        self.trace = trace
        self.vote_signer = vote_signer
        self.evidence: list[tuple[Vote, Vote]] = []
        self.decided: dict[int, bytes] = {}
        self.state = RoundState(height=start_height)
        self._proposal_pending = False
        # events for heights we have not reached yet; replayed on entry
        self._future: dict[int, list] = {}
        self._future_window = 4

    # -- helpers ------------------------------------------------------------

    def _emit(self, kind: str, **info) -> None:
        if self.trace is not None:
            self.trace(kind, {"node": self.me, "height": self.state.height, **info})

    def _votes(self, step: str, round_: int) -> dict[bytes, Vote]:
        book = self.state.prevotes if step == "prevote" else self.state.precommits
        return book.setdefault(round_, {})

    def _tally(self, step: str, round_: int, block_hash: bytes | None) -> int:
        return sum(
            self.vset.weight_of[v.voter]
            for v in self._votes(step, round_).values()
            if v.block_hash == block_hash
        )

    def _tally_any(self, step: str, round_: int) -> int:
        return sum(self.vset.weight_of[v.voter] for v in self._votes(step, round_).values())

    def _quorum_hash(self, step: str, round_: int) -> bytes | None:
        """The specific non-nil hash holding a quorum at (step, round), if any."""
        weights: dict[bytes, int] = {}
        for v in self._votes(step, round_).values():
            if v.block_hash is not None:
                weights[v.block_hash] = weights.get(v.block_hash, 0) + self.vset.weight_of[v.voter]
        for h, w in weights.items():
            if self.vset.quorum_met(w):
                return h
        return None

    def _once(self, key) -> bool:
        if key in self.state.fired:
            return False
        self.state.fired.add(key)
        return True

    # -- lifecycle ------------------------------------------------------------

    def start(self) -> list:
        return self._start_round(0)

    def _start_round(self, round_: int) -> list:
        st = self.state
        st.round = round_
        st.step = Step.PROPOSE
        st.started = True
        self._proposal_pending = False
        actions: list = []
        if self.vset.proposer_for(st.height, round_) == self.me:
            payload = None
            valid_round = -1
            if st.valid_hash is not None:
                payload = st.payloads.get(st.valid_hash)
                valid_round = st.valid_round
            if payload is None:
                payload = self.block_provider(st.height, round_)
                valid_round = -1
            if payload is None:
                self._proposal_pending = True
            else:
                actions += self._broadcast_proposal(payload, valid_round)
        actions.append(
            ScheduleTimeout("propose", st.height, round_, _timeout(TIMEOUT_PROPOSE_S, round_))
        )
        return actions + self._recheck()

    def maybe_propose(self) -> list:
        """Retry a deferred proposal (mempool became non-empty or the empty-
        block interval elapsed)."""
        st = self.state
        if not self._proposal_pending or st.step is not Step.PROPOSE:
            return []
        payload = self.block_provider(st.height, st.round)
        if payload is None:
            return []
        self._proposal_pending = False
        return self._broadcast_proposal(payload, -1) + self._recheck()

    def _broadcast_proposal(self, payload: Any, valid_round: int) -> list:
        st = self.state
        proposal = Proposal(
            height=st.height,
            round=st.round,
            payload=payload,
            payload_hash=self.hash_fn(payload),
            valid_round=valid_round,
            proposer=self.me,
        )
        # deliver to self immediately; the transport only reaches peers
        actions = [BroadcastProposal(proposal)]
        return actions + self.on_proposal(proposal)

    # -- event handlers -------------------------------------------------------

    def _stash_future(self, height: int, event) -> None:
        pending_here = height == self.state.height and not self.state.started
        if pending_here or self.state.height < height <= self.state.height + self._future_window:
            self._future.setdefault(height, []).append(event)

    def _drain_future(self) -> list:
        actions: list = []
        self._future = {h: ev for h, ev in self._future.items() if h >= self.state.height}
        for event in self._future.pop(self.state.height, []):
            if isinstance(event, Proposal):
                actions += self.on_proposal(event)
            else:
                actions += self.on_vote(event)
        return actions

    def fast_forward(self, height: int) -> list:
        """Jump to a height decided out-of-band (block sync); resets the round."""
        if height <= self.state.height:
            return []
        self.state = RoundState(height=height)
        return self._start_round(0) + self._drain_future()

    def on_proposal(self, proposal: Proposal) -> list:
        st = self.state
        if proposal.height != st.height or not st.started:
            self._stash_future(proposal.height, proposal)
            return []
        if proposal.proposer != self.vset.proposer_for(proposal.height, proposal.round):
            return []
        if proposal.round in st.proposals:
            existing = st.proposals[proposal.round]
            if existing.payload_hash != proposal.payload_hash:
                self._emit("proposal_equivocation", round=proposal.round)
            return []
        st.proposals[proposal.round] = proposal
        st.payloads[proposal.payload_hash] = proposal.payload
        return self._recheck()

    def on_vote(self, vote: Vote) -> list:
        st = self.state
        if vote.step not in ("prevote", "precommit"):
            return []
        if vote.height != st.height or not st.started:
            self._stash_future(vote.height, vote)
            return []
        if vote.voter not in self.vset:
            return []
        book = self._votes(vote.step, vote.round)
        existing = book.get(vote.voter)
        if existing is not None:
            if existing.block_hash != vote.block_hash:
                self.evidence.append((existing, vote))
                self._emit("equivocation", voter=vote.voter, round=vote.round, step=vote.step)
            return []
        book[vote.voter] = vote
        return self._recheck()

    def on_timeout(self, kind: str, height: int, round_: int) -> list:
        st = self.state
        if kind == "newheight":
            if height == st.height and not st.started:
                return self._start_round(0) + self._drain_future()
            return []
        if height != st.height or round_ != st.round or not st.started:
            return []
        if kind == "propose" and st.step is Step.PROPOSE:
            return self._cast_prevote(None) + self._recheck()
        if kind == "prevote" and st.step is Step.PREVOTE:
            return self._cast_precommit(None) + self._recheck()
        if kind == "precommit":
            return self._start_round(round_ + 1)
        return []

    def on_decided(self, payload: Any, commit_votes: list[Vote]) -> list:
        """Adopt an externally announced decision if its commit certificate
        carries a precommit quorum for exactly this payload."""
        st = self.state
        if not commit_votes:
            return []
        height = commit_votes[0].height
        if height != st.height:
            return []
        payload_hash = self.hash_fn(payload)
        seen: set[bytes] = set()
        weight = 0
        for v in commit_votes:
            if (
                v.step == "precommit"
                and v.height == height
                and v.block_hash == payload_hash
                and v.voter in self.vset
                and v.voter not in seen
            ):
                seen.add(v.voter)
                weight += self.vset.weight_of[v.voter]
        if not self.vset.quorum_met(weight):
            return []
        return self._commit(payload, payload_hash, commit_votes[0].round, tuple(commit_votes))

    # -- rule evaluation --------------------------------------------------------

    def _recheck(self) -> list:
        """Run every enabled rule until quiescent."""
        actions: list = []
        progressed = True
        while progressed:
            progressed = False
            for rule in (
                self._rule_prevote_on_proposal,
                self._rule_lock_and_precommit,
                self._rule_prevote_timeout_armed,
                self._rule_precommit_nil_on_nil_quorum,
                self._rule_precommit_timeout_armed,
                self._rule_commit,
                self._rule_round_skip,
            ):
                out = rule()
                if out:
                    actions += out
                    progressed = True
                    break
        return actions

    def _rule_prevote_on_proposal(self) -> list:
        st = self.state
        if st.step is not Step.PROPOSE:
            return []
        proposal = st.proposals.get(st.round)
        if proposal is None:
            return []
        h = proposal.payload_hash
        ok = self.block_validator(proposal.payload)
        if proposal.valid_round == -1:
            may = st.locked_round == -1 or st.locked_hash == h
        else:
            if not (0 <= proposal.valid_round < st.round):
                return []
            pol_weight = self._tally("prevote", proposal.valid_round, h)
            if not self.vset.quorum_met(pol_weight):
                return []  # re-proposal needs its proof-of-lock; wait for votes
            may = st.locked_round <= proposal.valid_round or st.locked_hash == h
        return self._cast_prevote(h if (ok and may) else None)

    def _rule_lock_and_precommit(self) -> list:
        st = self.state
        if st.step is Step.PROPOSE:
            return []
        h = self._quorum_hash("prevote", st.round)
        if h is None or h not in st.payloads:
            return []
        if not self._once(("prevote_quorum", st.round, h)):
            return []
        self._emit("prevote_quorum", round=st.round, block_hash=h)
        actions: list = []
        if st.step is Step.PREVOTE:
            st.locked_hash = h
            st.locked_round = st.round
            self._emit("lock", round=st.round, block_hash=h)
            actions += self._cast_precommit(h)
        st.valid_hash = h
        st.valid_round = st.round
        return actions

    def _rule_prevote_timeout_armed(self) -> list:
        st = self.state
        if st.step is not Step.PREVOTE:
            return []
        if not self.vset.quorum_met(self._tally_any("prevote", st.round)):
            return []
        if not self._once(("prevote_timeout", st.round)):
            return []
        return [
            ScheduleTimeout("prevote", st.height, st.round, _timeout(TIMEOUT_PREVOTE_S, st.round))
        ]

    def _rule_precommit_nil_on_nil_quorum(self) -> list:
        st = self.state
        if st.step is not Step.PREVOTE:
            return []
        if not self.vset.quorum_met(self._tally("prevote", st.round, None)):
            return []
        return self._cast_precommit(None)

    def _rule_precommit_timeout_armed(self) -> list:
        st = self.state
        if not self.vset.quorum_met(self._tally_any("precommit", st.round)):
            return []
        if not self._once(("precommit_timeout", st.round)):
            return []
        return [
            ScheduleTimeout(
                "precommit", st.height, st.round, _timeout(TIMEOUT_PRECOMMIT_S, st.round)
            )
        ]

    def _rule_commit(self) -> list:
        st = self.state
        for round_, votes in st.precommits.items():
            h = self._quorum_hash("precommit", round_)
            if h is None or h not in st.payloads:
                continue
            certificate = tuple(v for v in votes.values() if v.block_hash == h)
            return self._commit(st.payloads[h], h, round_, certificate)
        return []

    def _rule_round_skip(self) -> list:
        st = self.state
        rounds = set(st.prevotes) | set(st.precommits) | set(st.proposals)
        for round_ in sorted(rounds):
            if round_ <= st.round:
                continue
            voters: set[bytes] = set()
            for step in ("prevote", "precommit"):
                voters.update(self._votes(step, round_).keys())
            weight = sum(self.vset.weight_of[v] for v in voters)
            if self.vset.one_third_exceeded(weight):
                return self._start_round(round_)
        return []

    # -- vote casting / commit ---------------------------------------------------

    def _cast_prevote(self, block_hash: bytes | None) -> list:
        st = self.state
        if not self._once(("cast", "prevote", st.round)):
            return []
        st.step = Step.PREVOTE
        vote = Vote(st.height, st.round, "prevote", block_hash, self.me)
        if self.vote_signer is not None:
            vote = self.vote_signer(vote)
        self._emit("prevote_cast", round=st.round, block_hash=block_hash)
        out = [BroadcastVote(vote)]
        return out + self.on_vote(vote)

    def _cast_precommit(self, block_hash: bytes | None) -> list:
        st = self.state
        if not self._once(("cast", "precommit", st.round)):
            return []
        st.step = Step.PRECOMMIT
        vote = Vote(st.height, st.round, "precommit", block_hash, self.me)
        if self.vote_signer is not None:
            vote = self.vote_signer(vote)
        self._emit("precommit_cast", round=st.round, block_hash=block_hash)
        out = [BroadcastVote(vote)]
        return out + self.on_vote(vote)

    def _commit(self, payload: Any, payload_hash: bytes, round_: int, certificate: tuple) -> list:
        st = self.state
        if st.height in self.decided:  # pragma: no cover - defensive
            return []
        self.decided[st.height] = payload_hash
        self._emit("commit", round=round_, block_hash=payload_hash)
        commit = Commit(st.height, payload, payload_hash, round_, certificate)
        self.state = RoundState(height=st.height + 1)
        return [commit, ScheduleTimeout("newheight", self.state.height, 0, 0.0)]
