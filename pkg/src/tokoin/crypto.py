"""Keys, signatures, and the hash-to-prime member encoding.

ECDSA over NIST P-256: 33-byte compressed public keys, 32-byte secret
scalars, raw 64-byte (r, s) signatures over SHA-256 digests. Participants
are identified by their public key everywhere in the system.
"""

from __future__ import annotations

import hashlib
import secrets
from dataclasses import dataclass
from functools import lru_cache

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)

_CURVE = ec.SECP256R1()
# Order of the P-256 base point; secret scalars live in [1, order-1].
_CURVE_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551

PK_LEN = 33
SK_LEN = 32
SIG_LEN = 64

MEMBER_PRIME_BITS = 128
_PRIME_NONCE_CAP = 1 << 20


class KeyGenError(RuntimeError):
    """Fatal key setup failure (bad seed, entropy unavailable)."""


@dataclass(frozen=True)
class KeyPair:
    pk: bytes
    sk: bytes

    def __post_init__(self) -> None:
        if len(self.pk) != PK_LEN or len(self.sk) != SK_LEN:
            raise KeyGenError("malformed key material")


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def _keypair_from_scalar(scalar: int) -> KeyPair:
    priv = ec.derive_private_key(scalar, _CURVE)
    pk = priv.public_key().public_bytes(
        serialization.Encoding.X962, serialization.PublicFormat.CompressedPoint
    )
    return KeyPair(pk=pk, sk=scalar.to_bytes(SK_LEN, "big"))


def gen_keypair(seed: bytes | None = None) -> KeyPair:
    """Generate a keypair, deterministically when a 32-byte seed is given."""
    if seed is not None:
        if len(seed) != SK_LEN:
            raise KeyGenError(f"seed must be {SK_LEN} bytes, got {len(seed)}")
        scalar = (int.from_bytes(sha256(seed), "big") % (_CURVE_ORDER - 1)) + 1
        return _keypair_from_scalar(scalar)
    while True:
        scalar = int.from_bytes(secrets.token_bytes(SK_LEN), "big")
        if 0 < scalar < _CURVE_ORDER:
            return _keypair_from_scalar(scalar)


def _load_private(sk: bytes) -> ec.EllipticCurvePrivateKey:
    scalar = int.from_bytes(sk, "big")
    if not 0 < scalar < _CURVE_ORDER:
        raise KeyGenError("secret scalar out of range")
    return ec.derive_private_key(scalar, _CURVE)


def sign(sk: bytes, message: bytes) -> bytes:
    """Sign a canonical message byte string; returns the raw 64-byte (r, s).

    Deterministic nonces (RFC 6979): the same key and message always produce
    the same signature, which keeps replays and recorded transcripts bit-exact.
    """
    der = _load_private(sk).sign(message, ec.ECDSA(hashes.SHA256(), deterministic_signing=True))
    r, s = decode_dss_signature(der)
    return r.to_bytes(32, "big") + s.to_bytes(32, "big")


def verify_sig(pk: bytes, message: bytes, sig: bytes) -> int:
    """1 iff ``sig`` is a valid signature by ``pk`` over ``message``.

    Malformed keys or signatures yield 0, never an exception.
    """
    if not isinstance(pk, bytes) or not isinstance(sig, bytes) or len(sig) != SIG_LEN:
        return 0
    try:
        pub = ec.EllipticCurvePublicKey.from_encoded_point(_CURVE, pk)
        der = encode_dss_signature(
            int.from_bytes(sig[:32], "big"), int.from_bytes(sig[32:], "big")
        )
        pub.verify(der, message, ec.ECDSA(hashes.SHA256()))
        return 1
    except (ValueError, InvalidSignature):
        return 0


_SMALL_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61)


def is_probable_prime(n: int, rounds: int = 64) -> bool:
    """Miller-Rabin with bases derived by hashing n; deterministic per n."""
    if n < 2:
        return False
    for p in _SMALL_PRIMES:
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    seed = n.to_bytes((n.bit_length() + 7) // 8, "big")
    for i in range(rounds):
        h = hashlib.sha256(seed + i.to_bytes(4, "big")).digest()
        a = 2 + int.from_bytes(h, "big") % (n - 3)
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@lru_cache(maxsize=65536)
def hash_to_prime(pk: bytes) -> int:
    """Deterministic 128-bit odd probable prime derived from a public key.

    Hashes pk together with an incrementing nonce until Miller-Rabin (64
    rounds) accepts; the nonce search is capped so a pathological input
    fails loudly instead of spinning.
    """
    for nonce in range(_PRIME_NONCE_CAP):
        h = sha256(pk + nonce.to_bytes(4, "big"))
        candidate = int.from_bytes(h[:MEMBER_PRIME_BITS // 8], "big")
        candidate |= (1 << (MEMBER_PRIME_BITS - 1)) | 1
        if is_probable_prime(candidate):
            return candidate
    raise RuntimeError("no prime found within nonce cap")  # pragma: no cover


def gen_prime(bits: int, rand_bits) -> int:
    """Random prime of exactly ``bits`` bits; ``rand_bits(k)`` supplies entropy."""
    while True:
        candidate = rand_bits(bits) | (1 << (bits - 1)) | 1
        if is_probable_prime(candidate, rounds=40):
            return candidate
