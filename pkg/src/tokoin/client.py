"""Client-side message construction and the node wire client.

``Participant`` owns a keypair and a monotone nonce, and turns intents
(create, transfer, ...) into signed messages. ``TcpNodeClient`` speaks the
newline-delimited document protocol to a running node.
"""

from __future__ import annotations

import json
import socket
from typing import Any, Iterator

from .accumulator import MembershipWitness
from .crypto import KeyPair
from .encoding import canonical_encode
from .model import (
    AccessPolicy,
    Opcode,
    RedeemVerdict,
    RegistrationInfo,
    SignedMessage,
    sign_message,
)


class Participant:
    """Builds and signs ledger messages on behalf of one keypair."""

    def __init__(self, keypair: KeyPair, start_nonce: int = 0):
        self.keypair = keypair
        self.nonce = start_nonce

    @property
    def pk(self) -> bytes:
        return self.keypair.pk

    def _next_nonce(self) -> int:
        n = self.nonce
        self.nonce += 1
        return n

    def resync_nonce(self, committed: int) -> None:
        self.nonce = max(self.nonce, committed + 1)

    def _sign(self, msg: SignedMessage) -> SignedMessage:
        return sign_message(msg, self.keypair.sk)

    def register(
        self,
        kind: str = "participant",
        resource_id: str | None = None,
        pattern_digest: bytes | None = None,
    ) -> SignedMessage:
        reg = RegistrationInfo(kind=kind, resource_id=resource_id, pattern_digest=pattern_digest)
        return self._sign(
            SignedMessage(
                caller=self.pk, owner=self.pk, t_id=0, op=Opcode.REGISTER,
                nonce=self._next_nonce(), reg=reg,
            )
        )

    def create(self, t_id: int, policy: AccessPolicy) -> SignedMessage:
        return self._sign(
            SignedMessage(
                caller=self.pk, owner=self.pk, t_id=t_id, op=Opcode.CREATE,
                nonce=self._next_nonce(), policy=policy,
            )
        )

    def transfer(self, owner: bytes, t_id: int, to: bytes) -> SignedMessage:
        return self._sign(
            SignedMessage(
                caller=self.pk, owner=owner, t_id=t_id, op=Opcode.TRANSFER,
                nonce=self._next_nonce(), pk_next=to,
            )
        )

    def modify(
        self,
        owner: bytes,
        t_id: int,
        policy: AccessPolicy,
        witness_blobs: dict[str, dict] | None = None,
    ) -> SignedMessage:
        return self._sign(
            SignedMessage(
                caller=self.pk, owner=owner, t_id=t_id, op=Opcode.MODIFY,
                nonce=self._next_nonce(), policy=policy, witness_blobs=witness_blobs,
            )
        )

    def revoke(self, owner: bytes, t_id: int) -> SignedMessage:
        return self._sign(
            SignedMessage(
                caller=self.pk, owner=owner, t_id=t_id, op=Opcode.REVOKE,
                nonce=self._next_nonce(),
            )
        )

    def redeem(self, owner: bytes, t_id: int, witness: MembershipWitness) -> SignedMessage:
        return self._sign(
            SignedMessage(
                caller=self.pk, owner=owner, t_id=t_id, op=Opcode.REDEEM,
                nonce=self._next_nonce(), witness=witness,
            )
        )

    def redeem_finalize(self, owner: bytes, t_id: int, verdict: RedeemVerdict) -> SignedMessage:
        return self._sign(
            SignedMessage(
                caller=self.pk, owner=owner, t_id=t_id, op=Opcode.REDEEM_FINALIZE,
                nonce=self._next_nonce(), verdict=verdict,
            )
        )


class TcpNodeClient:
    """Blocking newline-delimited document client for the node's client port."""

    def __init__(self, addr: str, timeout_s: float = 10.0):
        host, _, port = addr.rpartition(":")
        self.host = host or "127.0.0.1"
        self.port = int(port)
        self.timeout_s = timeout_s

    def request(self, doc: dict) -> dict:
        with socket.create_connection((self.host, self.port), timeout=self.timeout_s) as sock:
            sock.sendall(canonical_encode(doc) + b"\n")
            data = b""
            while not data.endswith(b"\n"):
                chunk = sock.recv(65536)
                if not chunk:
                    break
                data += chunk
        return json.loads(data.decode("utf-8"))

    def subscribe(self, filt: str | None = None, from_height: int = 0,
                  timeout_s: float | None = None) -> Iterator[dict]:
        """Yields committed transaction events in order; ends on disconnect."""
        doc: dict[str, Any] = {"kind": "subscribe", "from": from_height}
        if filt:
            doc["filter"] = filt
        sock = socket.create_connection((self.host, self.port), timeout=timeout_s or self.timeout_s)
        try:
            sock.sendall(canonical_encode(doc) + b"\n")
            buf = b""
            while True:
                chunk = sock.recv(65536)
                if not chunk:
                    return
                buf += chunk
                while b"\n" in buf:
                    line, buf = buf.split(b"\n", 1)
                    if line.strip():
                        yield json.loads(line.decode("utf-8"))
        finally:
            sock.close()
