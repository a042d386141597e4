"""Access-control object attach mode for the node binary.

Runs a light node plus one controller bound to a resource: watches committed
redeem transactions for that resource, drives the simulated procedure from a
frame source (a directory of PGM frames, or a generated trajectory), and
pushes the finalize verdict back on-chain with retry until the deadline.
Redemptions that committed while the daemon was down are picked up from the
ledger's in-redemption set at startup.
"""

from __future__ import annotations

import asyncio
import json
import time
from pathlib import Path

from .accumulator import MembershipWitness
from .aco import AccessController, AcoConfig, AcoError, submit_with_retry
from .client import Participant
from .ledger import redemption_deadline
from .model import Opcode
from .server import NodeServer, load_keypair
from .trajectory import background, default_region_mask, gen_trajectory
from .vision import StandardPattern, mask_ref, read_pbm, read_pgm


def _load_frames(config: dict, policy_how) -> tuple[list, dict[int, str]]:
    if "frames_dir" in config:
        paths = sorted(Path(config["frames_dir"]).glob("*.pgm"))
        frames = [read_pgm(p) for p in paths]
        marks = {int(config["drop_frame"]): "drop"} if "drop_frame" in config else {}
        return frames, marks
    spec = config.get("trajectory", {"label": "benign", "seed": 0})
    trace = gen_trajectory(
        spec.get("label", "benign"),
        seed=int(spec.get("seed", 0)),
        max_duration_s=policy_how.max_duration_s,
        grace_s=policy_how.grace_s,
    )
    marks = {trace.drop_frame: "drop"} if trace.drop_frame is not None else {}
    return trace.frames, marks


async def run_aco(server: NodeServer, key_file: str, config_path: str) -> None:
    config = json.loads(Path(config_path).read_text())
    device = Participant(load_keypair(key_file))
    resource = config["resource"]

    standard = StandardPattern(
        read_pgm(config["standard_pgm"]) if "standard_pgm" in config else background()
    )
    mask = read_pbm(config["mask_pbm"]) if "mask_pbm" in config else default_region_mask()
    controller = AccessController(
        device=device,
        resource_id=resource,
        standard=standard,
        masks={mask_ref(mask): mask},
        evidence_root=config.get("evidence_dir"),
        config=AcoConfig(),
    )
    core = server.core

    async def client(doc: dict) -> dict:
        return await server._client_doc(doc)

    # watch first, register second: a redemption must never slip between the
    # registration commit and the subscription start
    queue: asyncio.Queue = asyncio.Queue()

    def on_block(block) -> None:
        for event in core.block_events(block):
            if event["op"] == Opcode.REDEEM.value:
                queue.put_nowait(event)

    core.commit_listeners.append(on_block)

    # self-registration, retried until the chain reflects it
    submitted = False
    while True:
        status = await client({"kind": "status", "pk": device.pk.hex()})
        if status.get("registered"):
            break
        if not submitted:
            device.resync_nonce(int(status.get("nonce", -1)))
            msg = device.register(kind="aco", resource_id=resource,
                                  pattern_digest=standard.digest)
            resp = await client({"kind": "submit_tx", "msg": msg.to_doc()})
            submitted = resp.get("ok", False) or resp.get("code") == "DUPLICATE"
        await asyncio.sleep(0.3)

    # redemptions committed before this process was watching (or across a
    # crash/restart) are still pending in the ledger state
    async with server.lock:
        backlog = core.replay_events(None, 0)
    pending = set(core.state.in_redemption)
    for event in backlog:
        if event["op"] == Opcode.REDEEM.value and event["cid"] in pending:
            queue.put_nowait(event)

    print(f"access object for {resource!r} watching as {device.pk.hex()[:12]}", flush=True)

    handled: set[str] = set()
    while True:
        event = await queue.get()
        cid = event["cid"]
        if event["tx_hash"] in handled:
            continue
        t = core.state.urpo.get(cid)
        if (
            t is None
            or cid not in core.state.in_redemption
            or t.pk_h != device.pk
            or t.policy.what.resource_id != resource
        ):
            continue
        handled.add(event["tx_hash"])
        requester = bytes.fromhex(event["caller"])
        witness_doc = event["tx"]["msg"].get("witness")
        witness = MembershipWitness.from_doc(witness_doc) if witness_doc else None
        frames, marks = _load_frames(config, t.policy.how)
        evidence = {
            "clock": {"unix_s": config.get("clock_s", time.time())},
            "gps": config.get("gps", {"lat": t.policy.where.lat, "lon": t.policy.where.lon}),
        }
        try:
            msg, _records, verdict = controller.run_redemption(
                t, requester=requester, witness=witness, evidence=evidence,
                trace_frames=frames, region=mask, action_marks=marks,
            )
        except AcoError as exc:
            print(f"cannot run redemption of {cid}: {exc}", flush=True)
            continue
        print(f"redemption of {cid}: {verdict.outcome.value}", flush=True)

        deadline = redemption_deadline(t)
        loop = asyncio.get_running_loop()

        def submit_sync(doc: dict) -> dict:
            return asyncio.run_coroutine_threadsafe(
                client({"kind": "submit_tx", "msg": doc}), loop
            ).result(timeout=10)

        ok = await asyncio.to_thread(
            submit_with_retry, submit_sync, msg.to_doc(), deadline
        )
        if not ok:
            print(f"ALARM: could not finalize {cid} before the deadline; "
                  f"evidence kept at digest {verdict.evidence_digest.hex()}", flush=True)
