import random

import pytest

from tokoin.encoding import EncodingError, canonical_decode, canonical_encode, doc_digest


def test_encoding_is_deterministic():
    doc = {"b": 2, "a": [1, "x", {"k": b"\x01\x02"}], "c": 3.5}
    assert canonical_encode(doc) == canonical_encode(doc)


def test_key_order_is_insignificant():
    first = {"alpha": 1, "beta": [True, False], "gamma": "s"}
    second = {"gamma": "s", "beta": [True, False], "alpha": 1}
    assert canonical_encode(first) == canonical_encode(second)


def test_exact_surface_form():
    doc = {"n": 10, "blob": b"\xab\xcd", "s": "hi", "t": True}
    assert canonical_encode(doc) == b'{"blob":"abcd","n":10,"s":"hi","t":true}'


def test_unicode_goes_through_utf8():
    data = canonical_encode({"name": "домик"})
    assert "домик".encode("utf-8") in data
    assert canonical_decode(data) == {"name": "домик"}


@pytest.mark.parametrize(
    "bad",
    [None, float("nan"), float("inf"), {1: "int key"}, {"x": object()}, {"x": None}],
)
def test_unencodable_documents_raise(bad):
    with pytest.raises(EncodingError):
        canonical_encode(bad)


def _random_doc(rng: random.Random, depth: int = 0):
    choices = ["int", "float", "str", "bytes", "bool"]
    if depth < 3:
        choices += ["list", "dict", "dict"]
    kind = rng.choice(choices)
    if kind == "int":
        return rng.randint(-(2**63), 2**63)
    if kind == "float":
        return rng.choice([0.0, -1.5, 3.14159, rng.random() * 10**rng.randint(-8, 8)])
    if kind == "str":
        alphabet = "abc XYZ\"\\\n\t日本語🙂"
        return "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 12)))
    if kind == "bytes":
        return rng.randbytes(rng.randint(0, 16))
    if kind == "bool":
        return rng.random() < 0.5
    if kind == "list":
        return [_random_doc(rng, depth + 1) for _ in range(rng.randint(0, 4))]
    return {
        f"k{rng.randint(0, 30)}_{i}": _random_doc(rng, depth + 1)
        for i in range(rng.randint(0, 5))
    }


def test_round_trip_fixpoint_over_random_documents():
    # encode -> decode -> encode must be byte-identical (bytes re-enter as hex text)
    rng = random.Random(1234)
    for _ in range(1000):
        doc = {"root": _random_doc(rng)}
        once = canonical_encode(doc)
        again = canonical_encode(canonical_decode(once))
        assert once == again


def test_doc_digest_is_stable():
    assert doc_digest({"a": 1}) == doc_digest({"a": 1})
    assert doc_digest({"a": 1}) != doc_digest({"a": 2})
