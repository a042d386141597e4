"""Canonical key-value document encoding.

Every byte string that gets signed or hashed in this system (messages, blocks,
policies, state digests) goes through :func:`canonical_encode`, so two nodes
always agree bit-for-bit on what a logical document looks like.

Rules: JSON surface syntax, object keys sorted by code point, no insignificant
whitespace, integers as plain decimals, byte strings as lowercase hex, text as
UTF-8. ``None`` is not encodable -- optional fields are omitted, never null.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any


class EncodingError(ValueError):
    """Raised for documents that have no canonical form."""


def _write(obj: Any, out: list[str]) -> None:
    if obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        if obj != obj or obj in (float("inf"), float("-inf")):
            raise EncodingError("non-finite float is not encodable")
        if obj.is_integer():
            # integral values encode as plain integers: this is the one form
            # JavaScript and Python shortest-repr printers agree on
            out.append(str(int(obj)))
        else:
            # repr is the shortest round-trip form; json.loads inverts it
            out.append(repr(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, (bytes, bytearray)):
        out.append('"' + bytes(obj).hex() + '"')
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, item in enumerate(obj):
            if i:
                out.append(",")
            _write(item, out)
        out.append("]")
    elif isinstance(obj, dict):
        out.append("{")
        last = None
        for i, key in enumerate(sorted(obj.keys())):
            if not isinstance(key, str):
                raise EncodingError(f"object key must be str, got {type(key).__name__}")
            if key == last:
                raise EncodingError(f"duplicate key {key!r}")
            last = key
            if i:
                out.append(",")
            out.append(json.dumps(key, ensure_ascii=False))
            out.append(":")
            _write(obj[key], out)
        out.append("}")
    elif obj is None:
        raise EncodingError("None is not encodable; omit the field instead")
    else:
        raise EncodingError(f"unencodable type {type(obj).__name__}")


def canonical_encode(doc: Any) -> bytes:
    """Encode a document to its unique canonical byte string."""
    out: list[str] = []
    _write(doc, out)
    return "".join(out).encode("utf-8")


def canonical_decode(data: bytes | str) -> Any:
    """Parse a canonical (or any JSON) byte string back into a document.

    Byte-string fields come back as their hex text form; re-encoding the
    result reproduces the original bytes exactly.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return json.loads(data)


def doc_digest(doc: Any) -> bytes:
    """SHA-256 over the canonical encoding of ``doc``."""
    return hashlib.sha256(canonical_encode(doc)).digest()


def strip_none(doc: dict[str, Any]) -> dict[str, Any]:
    """Drop keys whose value is None (optional fields are absent, not null)."""
    return {k: v for k, v in doc.items() if v is not None}
