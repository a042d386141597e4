"""Dynamic subject-group accumulator.

An RSA-style exponent accumulator: the group commitment is
``g ** (product of member primes) mod n`` where each member prime is
derived from the member's public key via :func:`tokoin.crypto.hash_to_prime`.
The group owner generates the modulus and keeps its factorization as a
trapdoor, which is what makes deletion and witness refresh cheap; verifiers
only ever see the public triple ``(n, g, value)``.

Membership is commutative in the member set -- building from any permutation
of the same members yields the same commitment.
"""

from __future__ import annotations

import math
import random
import secrets
from dataclasses import dataclass, replace

from .crypto import gen_prime, hash_to_prime

DEFAULT_MODULUS_BITS = 2048


class AccumulatorError(ValueError):
    pass


@dataclass(frozen=True)
class Trapdoor:
    p: int
    q: int

    @property
    def phi(self) -> int:
        return (self.p - 1) * (self.q - 1)


@dataclass(frozen=True)
class MembershipWitness:
    """Per-member proof: ``witness ** member_prime == acc value (mod n)``."""

    witness: int
    member_prime: int

    def to_doc(self) -> dict:
        return {"w": format(self.witness, "x"), "prime": format(self.member_prime, "x")}

    @classmethod
    def from_doc(cls, doc: dict) -> "MembershipWitness":
        return cls(witness=int(doc["w"], 16), member_prime=int(doc["prime"], 16))


@dataclass(frozen=True)
class AccumulatorState:
    """Immutable accumulator snapshot.

    ``trapdoor`` and ``members`` are owner-side bookkeeping; everything a
    verifier needs is the (n, g, value) triple. Updates return new values.
    """

    n: int
    g: int
    value: int
    trapdoor: Trapdoor | None = None
    members: tuple[bytes, ...] = ()

    def public_doc(self) -> dict:
        return {"n": format(self.n, "x"), "g": format(self.g, "x"), "value": format(self.value, "x")}

    def has_member(self, pk: bytes) -> bool:
        return pk in self.members

    def _require_trapdoor(self) -> Trapdoor:
        if self.trapdoor is None:
            raise AccumulatorError("owner-only operation: trapdoor not held")
        return self.trapdoor


def new_group(modulus_bits: int = DEFAULT_MODULUS_BITS, rng: random.Random | None = None) -> AccumulatorState:
    """Owner-side setup: fresh modulus with known factorization, empty group."""
    rand_bits = rng.getrandbits if rng is not None else secrets.randbits
    half = modulus_bits // 2
    p = gen_prime(half, rand_bits)
    q = gen_prime(half, rand_bits)
    while q == p:  # pragma: no cover - vanishing probability
        q = gen_prime(half, rand_bits)
    n = p * q
    while True:
        h = rand_bits(modulus_bits) % n
        g = pow(h, 2, n)
        if g not in (0, 1) and math.gcd(g, n) == 1:
            break
    return AccumulatorState(n=n, g=g, value=g, trapdoor=Trapdoor(p, q))


def _exp_inverse(prime: int, phi: int) -> int:
    if math.gcd(prime, phi) != 1:  # pragma: no cover - negligible for random moduli
        raise AccumulatorError("member prime divides phi(n); regenerate modulus")
    return pow(prime, -1, phi)


def acc_build(setup: AccumulatorState, members: list[bytes]) -> tuple[AccumulatorState, dict[bytes, MembershipWitness]]:
    """Accumulate a member set and issue every witness in one pass.

    Requires the trapdoor. The commitment depends only on the member set,
    not the list order.
    """
    if not members:
        raise AccumulatorError("member set must be non-empty")
    if len(set(members)) != len(members):
        raise AccumulatorError("duplicate member public key")
    trapdoor = setup._require_trapdoor()
    phi = trapdoor.phi
    primes = {pk: hash_to_prime(pk) for pk in members}
    product = 1
    for prime in primes.values():
        product = product * prime % phi
    value = pow(setup.g, product, setup.n)
    witnesses = {
        pk: MembershipWitness(
            witness=pow(setup.g, product * _exp_inverse(prime, phi) % phi, setup.n),
            member_prime=prime,
        )
        for pk, prime in primes.items()
    }
    state = replace(setup, value=value, members=tuple(members))
    return state, witnesses


def acc_add_member(state: AccumulatorState, pk: bytes) -> tuple[AccumulatorState, MembershipWitness]:
    """Add one member; the pre-add commitment is exactly the new witness.

    Existing members' witnesses go stale; the owner re-issues via
    :func:`refresh_witnesses`.
    """
    if state.has_member(pk):
        raise AccumulatorError("already a member")
    prime = hash_to_prime(pk)
    new_value = pow(state.value, prime, state.n)
    witness = MembershipWitness(witness=state.value, member_prime=prime)
    return replace(state, value=new_value, members=state.members + (pk,)), witness


def acc_del_member(state: AccumulatorState, pk: bytes) -> AccumulatorState:
    """Remove a member by exponent inversion; owner-only (needs the trapdoor)."""
    trapdoor = state._require_trapdoor()
    if not state.has_member(pk):
        raise AccumulatorError("not a member")
    prime = hash_to_prime(pk)
    inv = _exp_inverse(prime, trapdoor.phi)
    new_value = pow(state.value, inv, state.n)
    members = tuple(m for m in state.members if m != pk)
    return replace(state, value=new_value, members=members)


def refresh_witnesses(state: AccumulatorState) -> dict[bytes, MembershipWitness]:
    """Recompute every current member's witness from the trapdoor."""
    trapdoor = state._require_trapdoor()
    out: dict[bytes, MembershipWitness] = {}
    for pk in state.members:
        prime = hash_to_prime(pk)
        inv = _exp_inverse(prime, trapdoor.phi)
        out[pk] = MembershipWitness(witness=pow(state.value, inv, state.n), member_prime=prime)
    return out


def acc_verify_member(n: int, g: int, acc_value: int, pk: bytes, witness: MembershipWitness | None) -> int:
    """1 iff ``witness ** hash_to_prime(pk) == acc_value (mod n)``.

    Uses only public values; malformed inputs yield 0, never an exception.
    The member prime is re-derived from the public key, so a witness cannot
    smuggle in a different exponent.
    """
    if witness is None or not isinstance(pk, bytes):
        return 0
    try:
        w = int(witness.witness)
        if not (1 < w < n) or not (0 < acc_value < n) or n <= 3:
            return 0
        prime = hash_to_prime(pk)
        return 1 if pow(w, prime, n) == acc_value else 0
    except (TypeError, ValueError):
        return 0
