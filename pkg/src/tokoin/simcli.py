"""Scenario, benchmark, and network-bootstrap command line."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import BENCH_OPS, bench_latency
from .crypto import gen_keypair
from .scenario import ScenarioFailure, run_scenario


def cmd_run(args) -> int:
    script = json.loads(Path(args.script).read_text())
    try:
        transcript = run_scenario(script, modulus_bits=args.modulus_bits)
    except ScenarioFailure as exc:
        print(f"scenario failed: {exc}", file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps(transcript.to_doc(), sort_keys=True))
    else:
        print(f"scenario  {transcript.name} (seed {transcript.seed})")
        print(f"coin      {transcript.cid}")
        print(f"status    {transcript.final_status}")
        for verdict in transcript.verdicts:
            print(f"verdict   {verdict['outcome']} (trajectory {verdict['trajectory']})")
        print(f"trail     {' -> '.join(transcript.trail_ops)}")
        print(f"digest    {transcript.digest().hex()}")
    return 0


def cmd_bench(args) -> int:
    report = bench_latency(
        n_nodes=args.nodes,
        n_samples=args.samples,
        ops=tuple(args.ops.split(",")) if args.ops else BENCH_OPS,
        progress=(None if args.quiet else lambda line: print(line, flush=True)),
    )
    print(report.table())
    print("\nreference band for the native prototype this reproduces: 40-60 ms per op")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
        print(f"csv written to {args.csv}")
    if args.json:
        print(json.dumps(report.to_doc(), sort_keys=True))
    return 1 if report.failed else 0


def cmd_genesis(args) -> int:
    """Bootstrap a local network: genesis, validator keys, node configs."""
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    validators = []
    base_port = args.base_port
    for i in range(args.validators):
        kp = gen_keypair()
        validators.append({"pk": kp.pk.hex(), "weight": args.weight})
        (out / f"validator-{i}.key.json").write_text(
            json.dumps({"pk": kp.pk.hex(), "sk": kp.sk.hex()}, indent=2)
        )
    genesis = {"chain_id": args.chain_id, "validators": validators}
    (out / "genesis.json").write_text(json.dumps(genesis, indent=2))
    addrs = [f"127.0.0.1:{base_port + i}" for i in range(args.validators)]
    for i in range(args.validators):
        config = {
            "node_id": f"v{i}",
            "genesis": str(out / "genesis.json"),
            "key_file": str(out / f"validator-{i}.key.json"),
            "validator": True,
            "listen": addrs[i],
            "http": f"127.0.0.1:{base_port + 100 + i}",
            "peers": [a for j, a in enumerate(addrs) if j != i],
        }
        (out / f"node-{i}.json").write_text(json.dumps(config, indent=2))
    print(f"wrote genesis + {args.validators} validator configs under {out}")
    print(f"start each with: tokoin-node --config {out}/node-<i>.json")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="tokoin-sim")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("genesis", help="bootstrap genesis, keys, and node configs")
    p.add_argument("--validators", type=int, default=4)
    p.add_argument("--weight", type=int, default=1)
    p.add_argument("--chain-id", default="local")
    p.add_argument("--base-port", type=int, default=26600)
    p.add_argument("--out-dir", default="net")
    p.set_defaults(fn=cmd_genesis)

    p = sub.add_parser("run", help="execute a scripted delivery scenario")
    p.add_argument("script", help="scenario document (json)")
    p.add_argument("--modulus-bits", type=int, default=2048)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("bench", help="confirmation latency benchmark")
    p.add_argument("--nodes", type=int, default=7)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--ops", help="comma-separated subset of ops")
    p.add_argument("--csv", help="write per-op percentiles to this file")
    p.add_argument("--json", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_bench)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
