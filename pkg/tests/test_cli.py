import json

import pytest

from tokoin.accumulator import acc_build
from tokoin.cli import main
from tokoin.client import Participant, TcpNodeClient
from tokoin.ledger import AuditTrail, render_audit_trail
from tokoin.scenario import DEFAULT_POLICY_TEMPLATE, build_policy
from tokoin.trajectory import default_region_mask
from tokoin.vision import mask_ref
from tokoin.wallet import Wallet, WalletError

from conftest import keypair_for
from test_server import LiveNet, _wait_registered

PASS = "correct horse battery"


@pytest.fixture(scope="module")
def env(small_group_setup, tmp_path_factory):
    net = LiveNet(3)
    root = tmp_path_factory.mktemp("cli")
    courier = Participant(keypair_for(9200))
    group, wits = acc_build(small_group_setup, [courier.pk])
    client = TcpNodeClient(net.addr)
    client.request({"kind": "submit_tx", "msg": courier.register().to_doc()})
    _wait_registered(client, courier.pk.hex())
    policy_doc = build_policy(
        group, "cli-door", mask_ref(default_region_mask()),
        {**DEFAULT_POLICY_TEMPLATE, "window_s": 10_000_000.0}, start_s=0,
    ).to_doc()
    policy_file = root / "policy.json"
    policy_file.write_text(json.dumps(policy_doc))
    yield {
        "net": net, "root": root, "policy_file": policy_file,
        "courier": courier, "wits": wits, "client": client,
    }
    net.stop()


@pytest.fixture
def cli(env, monkeypatch):
    monkeypatch.setenv("TOKOIN_NODE", env["net"].addr)
    monkeypatch.setenv("TOKOIN_PASSPHRASE", PASS)

    def run(*argv):
        return main([str(a) for a in argv])

    return run


def test_keygen_writes_encrypted_wallet(env, cli, capsys):
    wallet_path = env["root"] / "alice.json"
    assert cli("--wallet", wallet_path, "keygen", "--seed", "aa" * 32) == 0
    out = capsys.readouterr().out
    assert "pk " in out
    raw = wallet_path.read_text()
    loaded = Wallet.load(wallet_path, PASS)
    assert loaded.keypair.sk.hex() not in raw  # sealed, never plaintext
    with pytest.raises(WalletError):
        Wallet.load(wallet_path, "wrong passphrase")


def test_full_owner_flow_over_cli(env, cli, capsys):
    wallet = env["root"] / "owner.json"
    assert cli("--wallet", wallet, "keygen") == 0
    assert cli("--wallet", wallet, "register") == 0
    capsys.readouterr()
    assert cli("--wallet", wallet, "create", "--policy", env["policy_file"], "--id", 1) == 0
    cid = capsys.readouterr().out.splitlines()[0].strip()
    assert cid.endswith("-1")

    assert cli("status", cid) == 0
    assert "valid" in capsys.readouterr().out

    # audit output is byte-identical to rendering the node's own trail
    assert cli("audit", cid) == 0
    cli_rendering = capsys.readouterr().out
    trail_doc = env["client"].request({"kind": "audit_trail", "id": cid})["trail"]
    assert cli_rendering == render_audit_trail(AuditTrail.from_doc(trail_doc))

    # transfer to the courier, then watch the historical stream
    assert cli("--wallet", wallet, "transfer", cid, "--to", env["courier"].pk.hex()) == 0
    capsys.readouterr()
    assert cli("watch", cid, "--count", 2) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and "create" in lines[0] and "transfer" in lines[1]


def test_invalid_policy_fails_before_any_network_call(env, cli, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("TOKOIN_NODE", "127.0.0.1:1")  # nothing listens there
    wallet = env["root"] / "validator-of-policies.json"
    cli("--wallet", wallet, "keygen")
    bad = tmp_path / "bad-policy.json"
    doc = json.loads(env["policy_file"].read_text())
    doc["when"] = {"start": 10, "end": 5}
    bad.write_text(json.dumps(doc))
    capsys.readouterr()
    assert cli("--wallet", wallet, "create", "--policy", bad, "--id", 9) == 1
    err = capsys.readouterr().err
    assert "policy validation failed" in err and "start must precede end" in err


def test_non_holder_transfer_rejected_with_ledger_reason(env, cli, capsys):
    owner_wallet = env["root"] / "o2.json"
    thief_wallet = env["root"] / "thief.json"
    cli("--wallet", owner_wallet, "keygen")
    cli("--wallet", owner_wallet, "register")
    cli("--wallet", thief_wallet, "keygen")
    cli("--wallet", thief_wallet, "register")
    capsys.readouterr()
    assert cli("--wallet", owner_wallet, "create", "--policy", env["policy_file"], "--id", 2) == 0
    cid = capsys.readouterr().out.splitlines()[0].strip()
    code = cli("--wallet", thief_wallet, "transfer", cid, "--to", env["courier"].pk.hex())
    assert code == 1
    assert "NOT_HOLDER" in capsys.readouterr().err


def test_unreachable_node_times_out_with_exit_2(env, cli, monkeypatch, capsys):
    monkeypatch.setenv("TOKOIN_NODE", "127.0.0.1:1")
    wallet = env["root"] / "offline.json"
    cli("--wallet", wallet, "keygen")
    capsys.readouterr()
    assert cli("--wallet", wallet, "register") == 2


def test_redeem_via_cli_with_witness_file(env, cli, capsys, tmp_path):
    # the device must exist on-chain for redeem admission to find an ACO
    aco_wallet = env["root"] / "aco.json"
    cli("--wallet", aco_wallet, "keygen")
    assert cli("--wallet", aco_wallet, "register", "--aco", "--resource", "cli-door") == 0

    owner_wallet = env["root"] / "o3.json"
    cli("--wallet", owner_wallet, "keygen")
    cli("--wallet", owner_wallet, "register")
    capsys.readouterr()
    assert cli("--wallet", owner_wallet, "create", "--policy", env["policy_file"], "--id", 3) == 0
    cid = capsys.readouterr().out.splitlines()[0].strip()

    courier_wallet = env["root"] / "courier.json"
    courier_seed = (9200).to_bytes(4, "big") + bytes(28)  # matches keypair_for(9200)
    cli("--wallet", courier_wallet, "keygen", "--seed", courier_seed.hex())
    loaded = Wallet.load(courier_wallet, PASS)
    assert loaded.keypair.pk == env["courier"].pk  # same key as the registered courier

    witness_file = tmp_path / "witness.json"
    witness_file.write_text(json.dumps(env["wits"][env["courier"].pk].to_doc()))
    assert cli("--wallet", courier_wallet, "redeem", cid, "--witness", witness_file) == 0
    capsys.readouterr()
    assert cli("status", cid) == 0
    assert "in_redemption" in capsys.readouterr().out
