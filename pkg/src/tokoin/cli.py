"""Wallet-style command line client.

Every participant action is a subcommand that builds the signed message,
submits it to the node, and waits for it to land in a block. Exit codes:
0 the transaction committed, 1 it was rejected (reason printed), 2 the
wait timed out. ``--json`` switches every output to machine-readable
documents. The node address comes from --node or the TOKOIN_NODE variable.
"""

from __future__ import annotations

import argparse
import getpass
import json
import os
import sys
import time
from pathlib import Path

from .accumulator import MembershipWitness
from .client import Participant, TcpNodeClient
from .crypto import gen_keypair
from .ledger import AuditTrail, render_audit_trail
from .model import AccessPolicy, PolicyError, SignedMessage, parse_composite_id
from .wallet import Wallet, WalletError

EXIT_COMMITTED = 0
EXIT_REJECTED = 1
EXIT_TIMEOUT = 2

DEFAULT_TIMEOUT_S = 15.0


class CliError(RuntimeError):
    def __init__(self, message: str, code: int = EXIT_REJECTED):
        super().__init__(message)
        self.code = code


def _passphrase(args) -> str:
    # never sent over the wire; cached so a command prompts at most once
    if getattr(args, "_passphrase_cache", None) is None:
        if os.environ.get("TOKOIN_PASSPHRASE") is not None:
            args._passphrase_cache = os.environ["TOKOIN_PASSPHRASE"]
        elif args.passphrase_file:
            args._passphrase_cache = Path(args.passphrase_file).read_text().strip()
        else:
            args._passphrase_cache = getpass.getpass("wallet passphrase: ")
    return args._passphrase_cache


def _emit(args, doc: dict, human: str) -> None:
    if args.json:
        print(json.dumps(doc, sort_keys=True))
    else:
        print(human)


def _node(args) -> TcpNodeClient:
    addr = args.node or os.environ.get("TOKOIN_NODE")
    if not addr:
        raise CliError("no node address: pass --node or set TOKOIN_NODE", EXIT_REJECTED)
    return TcpNodeClient(addr, timeout_s=args.timeout)


def _wallet(args) -> Wallet:
    try:
        return Wallet.load(args.wallet, _passphrase(args))
    except WalletError as exc:
        raise CliError(str(exc)) from exc


def _participant(args, node: TcpNodeClient, wallet: Wallet) -> Participant:
    status = node.request({"kind": "status", "pk": wallet.pk_hex})
    committed = int(status.get("nonce", -1))
    participant = Participant(wallet.keypair, start_nonce=max(wallet.next_nonce, committed + 1))
    return participant


def _submit_and_wait(args, node: TcpNodeClient, wallet: Wallet, msg: SignedMessage) -> dict:
    """Submit, then watch the event stream until the transaction commits."""
    tx_hash = msg.tx_hash().hex()
    status = node.request({"kind": "status"})
    from_height = max(int(status.get("height", 0)), 0)
    resp = node.request({"kind": "submit_tx", "msg": _hex_doc(msg.to_doc())})
    if not resp.get("ok"):
        raise CliError(f"rejected: {resp.get('code')}"
                       + (f" ({resp['detail']})" if resp.get("detail") else ""))
    deadline = time.monotonic() + args.timeout
    try:
        for event in node.subscribe(filt=msg.caller.hex(), from_height=from_height,
                                    timeout_s=args.timeout):
            if event.get("tx_hash") == tx_hash:
                wallet.next_nonce = msg.nonce + 1
                wallet.save(_passphrase(args))
                return event
            if time.monotonic() > deadline:
                break
    except (OSError, TimeoutError):
        pass
    raise CliError(f"timed out waiting for commit of {tx_hash}", EXIT_TIMEOUT)


def _hex_doc(doc):
    if isinstance(doc, dict):
        return {k: _hex_doc(v) for k, v in doc.items()}
    if isinstance(doc, (list, tuple)):
        return [_hex_doc(v) for v in doc]
    if isinstance(doc, bytes):
        return doc.hex()
    return doc


def _load_policy(path: str) -> AccessPolicy:
    try:
        doc = json.loads(Path(path).read_text())
        policy = AccessPolicy.from_doc(doc)
        policy.validate()
        return policy
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read policy file: {exc}")
    except PolicyError as exc:
        raise CliError(f"policy validation failed: {exc}")


# -- commands -------------------------------------------------------------------


def cmd_keygen(args) -> int:
    seed = bytes.fromhex(args.seed) if args.seed else None
    keypair = gen_keypair(seed=seed)
    wallet = Wallet(path=Path(args.wallet), keypair=keypair, node_addr=args.node)
    wallet.save(_passphrase(args))
    _emit(args, {"pk": keypair.pk.hex(), "wallet": str(wallet.path)},
          f"pk {keypair.pk.hex()}\nwallet written to {wallet.path}")
    return EXIT_COMMITTED


def cmd_register(args) -> int:
    node = _node(args)
    wallet = _wallet(args)
    participant = _participant(args, node, wallet)
    pattern_digest = None
    if args.pattern:
        from .vision import frame_digest, read_pgm

        pattern_digest = frame_digest(read_pgm(args.pattern))
    msg = participant.register(
        kind="aco" if args.aco else "participant",
        resource_id=args.resource,
        pattern_digest=pattern_digest,
    )
    event = _submit_and_wait(args, node, wallet, msg)
    _emit(args, {"registered": wallet.pk_hex, "height": event["height"]},
          f"registered {wallet.pk_hex} at height {event['height']}")
    return EXIT_COMMITTED


def cmd_create(args) -> int:
    node = _node(args)
    wallet = _wallet(args)
    policy = _load_policy(args.policy)  # validated before any network call
    participant = _participant(args, node, wallet)
    msg = participant.create(args.id, policy)
    event = _submit_and_wait(args, node, wallet, msg)
    _emit(args, {"cid": msg.cid, "height": event["height"]},
          f"{msg.cid}\ncommitted at height {event['height']}")
    return EXIT_COMMITTED


def _coin_op(args, build):
    node = _node(args)
    wallet = _wallet(args)
    owner, t_id = parse_composite_id(args.cid)
    participant = _participant(args, node, wallet)
    msg = build(participant, owner, t_id)
    event = _submit_and_wait(args, node, wallet, msg)
    return node, wallet, msg, event


def cmd_transfer(args) -> int:
    to = bytes.fromhex(args.to)
    _, _, msg, event = _coin_op(args, lambda p, o, t: p.transfer(o, t, to))
    _emit(args, {"cid": msg.cid, "to": args.to, "height": event["height"]},
          f"{msg.cid} transferred to {args.to} at height {event['height']}")
    return EXIT_COMMITTED


def cmd_modify(args) -> int:
    policy = _load_policy(args.policy)
    blobs = None
    if args.witnesses:
        blobs = json.loads(Path(args.witnesses).read_text())
    _, _, msg, event = _coin_op(args, lambda p, o, t: p.modify(o, t, policy, witness_blobs=blobs))
    _emit(args, {"cid": msg.cid, "height": event["height"]},
          f"{msg.cid} policy updated at height {event['height']}")
    return EXIT_COMMITTED


def cmd_revoke(args) -> int:
    _, _, msg, event = _coin_op(args, lambda p, o, t: p.revoke(o, t))
    _emit(args, {"cid": msg.cid, "revoked": True, "height": event["height"]},
          f"{msg.cid} revoked at height {event['height']}")
    return EXIT_COMMITTED


def cmd_redeem(args) -> int:
    node = _node(args)
    wallet = _wallet(args)
    owner, t_id = parse_composite_id(args.cid)
    if args.witness:
        witness_doc = json.loads(Path(args.witness).read_text())
    elif args.cid in wallet.witnesses:
        witness_doc = wallet.witnesses[args.cid]
    else:
        raise CliError("no witness: pass --witness or fetch-witness first")
    witness = MembershipWitness.from_doc(witness_doc)
    participant = _participant(args, node, wallet)
    msg = participant.redeem(owner, t_id, witness)
    event = _submit_and_wait(args, node, wallet, msg)
    _emit(args, {"cid": msg.cid, "height": event["height"], "in_redemption": True},
          f"{msg.cid} redemption requested at height {event['height']}; "
          "the access object takes it from here")
    return EXIT_COMMITTED


def cmd_fetch_witness(args) -> int:
    node = _node(args)
    wallet = _wallet(args)
    trail_doc = node.request({"kind": "audit_trail", "id": args.cid})["trail"]
    found = None
    for entry in trail_doc["entries"]:
        refreshed = entry["tx"]["script"].get("refreshed_witnesses") or {}
        if wallet.pk_hex in refreshed:
            found = refreshed[wallet.pk_hex]  # keep scanning: latest wins
    if found is None:
        raise CliError(f"no witness for {wallet.pk_hex} in the audit trail of {args.cid}")
    wallet.witnesses[args.cid] = found
    wallet.save(_passphrase(args))
    _emit(args, {"cid": args.cid, "witness": found}, f"witness for {args.cid} cached in wallet")
    return EXIT_COMMITTED


def cmd_status(args) -> int:
    node = _node(args)
    resp = node.request({"kind": "query_tokoin", "id": args.cid})
    human = f"{args.cid}: {resp['status']}"
    if "tokoin" in resp:
        human += f"\n  holder {resp['tokoin']['holder']}"
        human += f"\n  uses remaining {resp['tokoin']['policy']['uses_remaining']}"
    _emit(args, resp, human)
    return EXIT_COMMITTED


def cmd_audit(args) -> int:
    node = _node(args)
    resp = node.request({"kind": "audit_trail", "id": args.cid})
    trail = AuditTrail.from_doc(resp["trail"])
    if args.json:
        print(json.dumps(resp["trail"], sort_keys=True))
    else:
        sys.stdout.write(render_audit_trail(trail))
    return EXIT_COMMITTED


def cmd_watch(args) -> int:
    node = _node(args)
    count_left = args.count
    try:
        for event in node.subscribe(filt=args.filter, from_height=args.from_height,
                                    timeout_s=args.timeout if args.count else None):
            if args.json:
                print(json.dumps(event, sort_keys=True), flush=True)
            else:
                print(f"height {event['height']} {event['op']} {event['cid']} "
                      f"by {event['caller'][:12]}", flush=True)
            if count_left is not None:
                count_left -= 1
                if count_left <= 0:
                    break
    except KeyboardInterrupt:
        pass
    except (OSError, TimeoutError):
        if count_left:
            raise CliError("stream ended before the expected events", EXIT_TIMEOUT)
    return EXIT_COMMITTED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokoin", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--node", help="node address host:port (or TOKOIN_NODE)")
    parser.add_argument("--wallet", default=os.environ.get("TOKOIN_WALLET", "wallet.json"))
    parser.add_argument("--passphrase-file", help="read the wallet passphrase from a file")
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    parser.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT_S)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate a keypair into an encrypted wallet")
    p.add_argument("--seed", help="32-byte hex seed for a reproducible key")
    p.set_defaults(fn=cmd_keygen)

    p = sub.add_parser("register", help="announce this wallet's key on-chain")
    p.add_argument("--aco", action="store_true", help="register as an access object")
    p.add_argument("--resource", help="resource id (access object only)")
    p.add_argument("--pattern", help="background PGM whose digest to register")
    p.set_defaults(fn=cmd_register)

    p = sub.add_parser("create", help="mint a coin carrying a policy")
    p.add_argument("--policy", required=True, help="policy document file")
    p.add_argument("--id", type=int, required=True, help="owner-scoped coin id")
    p.set_defaults(fn=cmd_create)

    p = sub.add_parser("transfer", help="hand the coin to another holder")
    p.add_argument("cid")
    p.add_argument("--to", required=True, help="receiver public key (hex)")
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("modify", help="replace the coin's policy (owner only)")
    p.add_argument("cid")
    p.add_argument("--policy", required=True)
    p.add_argument("--witnesses", help="refreshed witness blobs file to log on-chain")
    p.set_defaults(fn=cmd_modify)

    p = sub.add_parser("revoke", help="nullify the coin (owner only)")
    p.add_argument("cid")
    p.set_defaults(fn=cmd_revoke)

    p = sub.add_parser("redeem", help="request redemption as a subject")
    p.add_argument("cid")
    p.add_argument("--witness", help="membership witness file")
    p.set_defaults(fn=cmd_redeem)

    p = sub.add_parser("fetch-witness", help="pull a refreshed witness from the audit trail")
    p.add_argument("cid")
    p.set_defaults(fn=cmd_fetch_witness)

    p = sub.add_parser("status", help="query a coin")
    p.add_argument("cid")
    p.set_defaults(fn=cmd_status)

    p = sub.add_parser("audit", help="print the complete lifecycle of a coin")
    p.add_argument("cid")
    p.set_defaults(fn=cmd_audit)

    p = sub.add_parser("watch", help="stream committed events for a coin or key")
    p.add_argument("filter", help="composite id or public key hex")
    p.add_argument("--from-height", type=int, default=0)
    p.add_argument("--count", type=int, help="stop after this many events")
    p.set_defaults(fn=cmd_watch)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConnectionError as exc:
        print(f"error: node unreachable ({exc})", file=sys.stderr)
        return EXIT_TIMEOUT


if __name__ == "__main__":
    sys.exit(main())
