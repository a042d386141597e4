"""Wallet file: passphrase-encrypted secret key plus client bookkeeping.

The secret key is never written in the clear; it is sealed with a key
derived from the passphrase (scrypt) under an authenticated cipher
(Fernet). Witnesses picked up from the chain are cached per coin id.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from cryptography.fernet import Fernet, InvalidToken
from cryptography.hazmat.primitives.kdf.scrypt import Scrypt

from .crypto import KeyPair

_SCRYPT_N = 2**14
_SCRYPT_R = 8
_SCRYPT_P = 1


class WalletError(RuntimeError):
    pass


def _derive(passphrase: str, salt: bytes) -> bytes:
    kdf = Scrypt(salt=salt, length=32, n=_SCRYPT_N, r=_SCRYPT_R, p=_SCRYPT_P)
    return base64.urlsafe_b64encode(kdf.derive(passphrase.encode("utf-8")))


@dataclass
class Wallet:
    path: Path
    keypair: KeyPair
    node_addr: str | None = None
    next_nonce: int = 0
    witnesses: dict[str, dict] = field(default_factory=dict)

    @property
    def pk_hex(self) -> str:
        return self.keypair.pk.hex()

    def save(self, passphrase: str) -> None:
        salt = os.urandom(16)
        token = Fernet(_derive(passphrase, salt)).encrypt(self.keypair.sk)
        doc = {
            "pk": self.pk_hex,
            "sk_sealed": token.decode("ascii"),
            "kdf": {"scheme": "scrypt", "salt": salt.hex(), "n": _SCRYPT_N,
                    "r": _SCRYPT_R, "p": _SCRYPT_P},
            "node_addr": self.node_addr,
            "next_nonce": self.next_nonce,
            "witnesses": self.witnesses,
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
        tmp.replace(self.path)

    @classmethod
    def load(cls, path: str | os.PathLike, passphrase: str) -> "Wallet":
        path = Path(path)
        if not path.exists():
            raise WalletError(f"no wallet at {path}")
        doc = json.loads(path.read_text())
        salt = bytes.fromhex(doc["kdf"]["salt"])
        try:
            sk = Fernet(_derive(passphrase, salt)).decrypt(doc["sk_sealed"].encode("ascii"))
        except InvalidToken as exc:
            raise WalletError("wrong passphrase or corrupted wallet") from exc
        return cls(
            path=path,
            keypair=KeyPair(pk=bytes.fromhex(doc["pk"]), sk=sk),
            node_addr=doc.get("node_addr"),
            next_nonce=int(doc.get("next_nonce", 0)),
            witnesses=dict(doc.get("witnesses", {})),
        )
