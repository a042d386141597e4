import random

import pytest
import sympy

from tokoin.crypto import (
    KeyGenError,
    gen_keypair,
    gen_prime,
    hash_to_prime,
    is_probable_prime,
    sign,
    verify_sig,
)

from conftest import keypair_for


def test_fixed_seed_reproduces_keypair():
    a = gen_keypair(seed=b"\x01" * 32)
    b = gen_keypair(seed=b"\x01" * 32)
    assert a == b
    assert len(a.pk) == 33 and len(a.sk) == 32


def test_fresh_keypairs_are_distinct():
    assert gen_keypair().pk != gen_keypair().pk


def test_short_seed_rejected():
    with pytest.raises(KeyGenError):
        gen_keypair(seed=b"\x02" * 31)


def test_sign_verify_round_trip():
    kp = keypair_for(1)
    msg = b"canonical-bytes"
    sig = sign(kp.sk, msg)
    assert len(sig) == 64
    assert verify_sig(kp.pk, msg, sig) == 1


def test_wrong_key_fails():
    kp, other = keypair_for(2), keypair_for(3)
    sig = sign(kp.sk, b"m")
    assert verify_sig(other.pk, b"m", sig) == 0


def test_flipped_message_bit_fails():
    kp = keypair_for(4)
    msg = bytearray(b"payload-bytes")
    sig = sign(kp.sk, bytes(msg))
    msg[3] ^= 0x01
    assert verify_sig(kp.pk, bytes(msg), sig) == 0


def test_malformed_inputs_return_zero_not_raise():
    kp = keypair_for(5)
    sig = sign(kp.sk, b"m")
    assert verify_sig(kp.pk, b"m", sig[:40]) == 0  # truncated
    assert verify_sig(b"\x02" + b"\x00" * 32, b"m", sig) == 0  # not a curve point
    assert verify_sig(b"junk", b"m", sig) == 0
    assert verify_sig(kp.pk, b"m", b"\x00" * 64) == 0


def test_signature_soundness_sweep():
    # 10^4 (message, key) pairs: own key verifies, a different key never does
    rng = random.Random(99)
    keys = [keypair_for(100 + i) for i in range(100)]
    for i in range(100):
        kp = keys[i]
        foreign = keys[(i + 1) % len(keys)]
        for j in range(100):
            msg = rng.randbytes(24)
            sig = sign(kp.sk, msg)
            assert verify_sig(kp.pk, msg, sig) == 1
            assert verify_sig(foreign.pk, msg, sig) == 0


def test_hash_to_prime_deterministic():
    pk = keypair_for(6).pk
    assert hash_to_prime(pk) == hash_to_prime(pk)


def test_hash_to_prime_output_is_prime_by_independent_oracle():
    for i in range(40):
        p = hash_to_prime(keypair_for(200 + i).pk)
        assert p.bit_length() == 128 and p % 2 == 1
        assert sympy.isprime(p)


def test_hash_to_prime_collision_scan():
    primes = [hash_to_prime(keypair_for(1000 + i).pk) for i in range(256)]
    assert len(set(primes)) == 256


def test_gen_prime_and_miller_rabin_agree_with_oracle():
    rng = random.Random(7)
    p = gen_prime(96, rng.getrandbits)
    assert p.bit_length() == 96
    assert sympy.isprime(p)
    # 561 is the first Carmichael number; a weak test would pass it
    for n in [0, 1, 2, 3, 4, 17, 561, 7919, 104729, 2**61 - 1]:
        assert is_probable_prime(n) == bool(sympy.isprime(n))
