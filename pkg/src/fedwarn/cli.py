"""Command line entry point: ``fedwarn run | sweep | verify``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from fedwarn import ledger
from fedwarn.config import ConfigError, load_config
from fedwarn.harness import InvariantViolation, latency_sweep, run_scenario

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_INVARIANT = 3

log = logging.getLogger("fedwarn")


def _endorser_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("endorser list is empty")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedwarn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and write its CSV/chain outputs")
    run.add_argument("--scenario", required=True, type=Path)
    run.add_argument("--out", required=True, type=Path)
    run.add_argument("--seed", type=int)
    run.add_argument("--mode", choices=["dlt", "conventional"])

    sweep = sub.add_parser("sweep", help="latency sweep over endorser counts")
    sweep.add_argument("--scenario", required=True, type=Path)
    sweep.add_argument("--endorsers", type=_endorser_list, default=[1, 2, 3, 4])
    sweep.add_argument("--out", required=True, type=Path)
    sweep.add_argument("--seed", type=int)

    verify = sub.add_parser("verify", help="check an exported chain; exit 0 iff it is valid")
    verify.add_argument("--chain", required=True, type=Path)
    return parser


def _cmd_run(args) -> int:
    cfg = load_config(args.scenario, {"seed": args.seed, "mode": args.mode})
    outputs = run_scenario(cfg)
    for path in outputs.write(args.out):
        log.info("wrote %s", path)
    print(f"{len(outputs.traces)} messages, {len(outputs.warnings)} warnings -> {args.out}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = load_config(args.scenario, {"seed": args.seed})
    table = latency_sweep(cfg, args.endorsers)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "sweep.csv").write_text(table.to_csv())
    for row in table.rows:
        print(f"n={row.n_endorsers}  mean e2e {row.mean_e2e_s:.4f} s  (sd {row.sd_e2e_s:.4f})")
    print(f"conventional mean e2e {table.conventional.mean_e2e_s:.4f} s")
    print(f"slope {table.slope:.4f} s/peer, intercept {table.intercept:.4f} s")
    return EXIT_OK


def _cmd_verify(args) -> int:
    try:
        lg = ledger.load_chain(args.chain.read_text())
    except OSError as exc:
        print(f"cannot read chain: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (ValueError, KeyError, TypeError, ledger.LedgerError) as exc:
        print(f"malformed chain: {exc}", file=sys.stderr)
        return EXIT_FAIL
    ok = ledger.verify_chain(lg)
    print(f"{len(lg.chain)} blocks: {'valid' if ok else 'INVALID'}")
    return EXIT_OK if ok else EXIT_FAIL


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    handler = {"run": _cmd_run, "sweep": _cmd_sweep, "verify": _cmd_verify}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
