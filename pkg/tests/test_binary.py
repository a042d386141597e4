import json
import os
import socket
import subprocess
import sys
import time

import pytest

from tokoin.accumulator import acc_build
from tokoin.client import Participant, TcpNodeClient
from tokoin.consensus import Genesis, Validator
from tokoin.crypto import gen_keypair
from tokoin.scenario import DEFAULT_POLICY_TEMPLATE, build_policy
from tokoin.trajectory import background, default_region_mask
from tokoin.vision import StandardPattern, mask_ref, write_pbm, write_pgm

from conftest import keypair_for
from test_server import _wait_registered


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def wait_port(port: int, timeout=20):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            with socket.create_connection(("127.0.0.1", port), timeout=1):
                return
        except OSError:
            time.sleep(0.05)
    raise TimeoutError(f"port {port} never opened")


def test_node_binary_with_attached_access_object(tmp_path, small_group_setup):
    validator_key = gen_keypair(seed=bytes([77]) + bytes(31))
    device_key = gen_keypair(seed=bytes([78]) + bytes(31))
    genesis = Genesis(chain_id="bin", validators=(Validator(validator_key.pk, 1),))
    genesis_file = tmp_path / "genesis.json"
    genesis_file.write_text(json.dumps({
        "chain_id": "bin",
        "validators": [{"pk": validator_key.pk.hex(), "weight": 1}],
    }))
    vkey_file = tmp_path / "validator-key.json"
    vkey_file.write_text(json.dumps({"pk": validator_key.pk.hex(), "sk": validator_key.sk.hex()}))
    dkey_file = tmp_path / "device-key.json"
    dkey_file.write_text(json.dumps({"pk": device_key.pk.hex(), "sk": device_key.sk.hex()}))

    standard = StandardPattern(background())
    mask = default_region_mask()
    write_pgm(tmp_path / "standard.pgm", standard.frame)
    write_pbm(tmp_path / "mask.pbm", mask)

    v_port, aco_port = free_port(), free_port()
    aco_config = tmp_path / "aco.json"
    aco_config.write_text(json.dumps({
        "resource": "bin-door",
        "standard_pgm": str(tmp_path / "standard.pgm"),
        "mask_pbm": str(tmp_path / "mask.pbm"),
        "trajectory": {"label": "benign", "seed": 5},
        "evidence_dir": str(tmp_path / "evidence"),
    }))
    aco_node_config = tmp_path / "aco-node.json"
    aco_node_config.write_text(json.dumps({
        "node_id": "aco-node",
        "genesis": str(genesis_file),
        "peers": [f"127.0.0.1:{v_port}"],
    }))

    procs = []
    logs = [open(tmp_path / "validator.log", "w+"), open(tmp_path / "aco.log", "w+")]
    validator_env = {**os.environ, "TOKOIN_DATA_DIR": str(tmp_path / "vdata")}
    try:
        procs.append(subprocess.Popen(
            [sys.executable, "-m", "tokoin.server",
             "--genesis", genesis_file, "--key", vkey_file, "--validator",
             "--listen", f"127.0.0.1:{v_port}"],
            stdout=logs[0], stderr=subprocess.STDOUT, text=True, env=validator_env,
        ))
        wait_port(v_port)
        procs.append(subprocess.Popen(
            [sys.executable, "-m", "tokoin.server",
             "--config", aco_node_config, "--listen", f"127.0.0.1:{aco_port}",
             "--aco", dkey_file, aco_config],
            stdout=logs[1], stderr=subprocess.STDOUT, text=True,
        ))
        wait_port(aco_port)

        client = TcpNodeClient(f"127.0.0.1:{v_port}", timeout_s=20)
        _wait_registered(client, device_key.pk.hex(), timeout=30)  # daemon self-registers

        owner = Participant(keypair_for(9300))
        courier = Participant(keypair_for(9301))
        group, wits = acc_build(small_group_setup, [courier.pk])
        for participant in (owner, courier):
            assert client.request(
                {"kind": "submit_tx", "msg": participant.register().to_doc()}
            )["ok"]
            _wait_registered(client, participant.pk.hex(), timeout=30)

        policy = build_policy(
            group, "bin-door", mask_ref(mask),
            {**DEFAULT_POLICY_TEMPLATE, "window_s": 3600.0},
            start_s=time.time() - 60,
        )
        create = owner.create(1, policy)
        assert client.request({"kind": "submit_tx", "msg": create.to_doc()})["ok"]
        cid = create.cid

        deadline = time.monotonic() + 30
        while client.request({"kind": "query_tokoin", "id": cid})["status"] != "valid":
            assert time.monotonic() < deadline
            time.sleep(0.05)

        transfer = owner.transfer(owner.pk, 1, courier.pk)
        assert client.request({"kind": "submit_tx", "msg": transfer.to_doc()})["ok"]
        redeem = courier.redeem(owner.pk, 1, wits[courier.pk])
        deadline = time.monotonic() + 30
        while True:
            resp = client.request({"kind": "submit_tx", "msg": redeem.to_doc()})
            if resp.get("ok"):
                break
            assert time.monotonic() < deadline, resp

        # the attached access object sees the hand-off, runs the benign
        # procedure, and finalizes: the single-use coin ends up spent
        deadline = time.monotonic() + 60
        while client.request({"kind": "query_tokoin", "id": cid})["status"] != "spent":
            if time.monotonic() >= deadline:
                for log in logs:
                    log.flush()
                    log.seek(0)
                    print(f"--- {log.name} ---\n{log.read()}")
                aco_client = TcpNodeClient(f"127.0.0.1:{aco_port}", timeout_s=5)
                print("validator:", client.request({"kind": "status"}))
                print("aco node:", aco_client.request({"kind": "status"}))
                print("aco sees:", aco_client.request({"kind": "query_tokoin", "id": cid}))
                assert False, client.request({"kind": "query_tokoin", "id": cid})
            time.sleep(0.1)

        trail = client.request({"kind": "audit_trail", "id": cid})["trail"]
        ops = [e["tx"]["msg"]["op"] for e in trail["entries"]]
        assert ops == ["create", "transfer", "redeem", "redeem_finalize"]
        final = trail["entries"][-1]["tx"]["msg"]["verdict"]
        assert final["outcome"] == "SUCCESS"
        # TOKOIN_DATA_DIR put an append-only chain file on disk
        chain_file = tmp_path / "vdata" / "chain.blocks"
        assert chain_file.exists() and chain_file.stat().st_size > 0
    finally:
        for proc in procs:
            proc.terminate()
        for proc in procs:
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
        for log in logs:
            log.close()
