"""Command line entry point.

    wfmatch --role a|b (--listen ADDR | --connect ADDR) --ids FILE --id-columns c1,c2 ...
    wfmatch accountant --epsilon 2 --delta 1e-5 --executions 6
    wfmatch leakage --mode exact|dp --epsilon 2 --executions 20 --trials 100 --out curve.json
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Sequence

from . import ahe
from .accountant import DEFAULT_NX, AccountantError, delta_curve, find_min_tau
from .group import TagWidth
from .leakage import leakage_curve
from .protocol import PlanError, SessionAbort, Variant, make_plan
from .runner import IngestError, ingest_csv, run_role
from .transport import TransportError, tcp_connect, tcp_listen

log = logging.getLogger("wfmatch")

EXIT_USAGE, EXIT_INPUT, EXIT_ABORT = 2, 3, 4


def _csv_list(text: str) -> list[str]:
    items = [x.strip() for x in text.split(",") if x.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a comma separated list")
    return items


def _hex_seed(text: str) -> bytes:
    try:
        seed = bytes.fromhex(text)
    except ValueError:
        raise argparse.ArgumentTypeError("seed must be hex") from None
    if len(seed) < 16:
        raise argparse.ArgumentTypeError("seed must be at least 16 bytes (32 hex digits)")
    return seed


def _party_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wfmatch", description="Run one party of a private waterfall matching session.")
    p.add_argument("--role", required=True, choices=["a", "b"], type=str.lower)
    addr = p.add_mutually_exclusive_group(required=True)
    addr.add_argument("--listen", metavar="HOST:PORT")
    addr.add_argument("--connect", metavar="HOST:PORT")
    p.add_argument("--ids", required=True, metavar="FILE", help="CSV with a header row")
    p.add_argument("--id-columns", required=True, type=_csv_list, help="identifier columns in priority order")
    p.add_argument("--payload", type=_csv_list, default=[], help="payload column(s)")
    p.add_argument("--variant", choices=[v.value for v in Variant], default=Variant.SUM.value)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--executions", type=int, default=1, help="number of runs the budget must cover")
    p.add_argument("--tau", type=int, help="explicit dummy size, overrides the accountant")
    p.add_argument("--no-dp", action="store_true", help="no padding, exact sizes (testing only)")
    p.add_argument("--tag-width", choices=[w.value for w in TagWidth], default=TagWidth.FULL.value)
    p.add_argument("--seed", type=_hex_seed, help="shared dummy seed, same value on both sides")
    p.add_argument("--rng-seed", type=int, help="deterministic private randomness (testing only)")
    p.add_argument("--ahe-bits", type=int, choices=[ahe.TEST_BITS, ahe.PROD_BITS], default=ahe.PROD_BITS)
    p.add_argument("--skip-last-update", action="store_true", help="skip the key update on the last column")
    p.add_argument("--nx", type=int, default=DEFAULT_NX, help="accountant grid size")
    p.add_argument("--timeout", type=float, default=600.0, help="seconds to wait for the peer")
    p.add_argument("--report", metavar="FILE", help="write the JSON run report here")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _accountant_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wfmatch accountant", description="Minimum dummy size for a DP budget.")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--executions", type=int, default=1)
    p.add_argument("--nx", type=int, default=DEFAULT_NX)
    p.add_argument("--curve", type=float, nargs="*", default=[0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0],
                   help="epsilon values for the delta curve")
    return p


def _leakage_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wfmatch leakage", description="Membership inference simulation.")
    p.add_argument("--mode", choices=["exact", "dp"], required=True)
    p.add_argument("--epsilon", type=float, default=2.0)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--executions", type=int, default=20)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--candidates", type=int, default=10_000)
    p.add_argument("--member-rate", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", metavar="FILE")
    return p


def _emit(obj: dict, path: str | None) -> None:
    text = json.dumps(obj, indent=2)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)


def cmd_accountant(argv: Sequence[str]) -> int:
    args = _accountant_parser().parse_args(argv)
    try:
        tau = find_min_tau(args.epsilon, args.delta, args.executions, args.nx)
        curve = delta_curve(tau, args.executions, args.curve, args.nx)
    except AccountantError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _emit({"tau": tau, "epsilon": args.epsilon, "delta": args.delta,
           "executions": args.executions, "nx": args.nx, "curve": curve}, None)
    return 0


def cmd_leakage(argv: Sequence[str]) -> int:
    args = _leakage_parser().parse_args(argv)
    if args.trials < 1 or args.executions < 1:
        print("error: trials and executions must be positive", file=sys.stderr)
        return EXIT_USAGE
    curve = leakage_curve(args.mode, args.executions, args.trials, n=args.candidates,
                          member_rate=args.member_rate, eps=args.epsilon, delta=args.delta, seed=args.seed)
    _emit(curve, args.out)
    return 0


def cmd_party(argv: Sequence[str]) -> int:
    parser = _party_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    role = args.role.upper()
    if args.variant == Variant.SUM.value and role == "B" and not args.payload:
        parser.error("party B needs --payload for the sum variant")
    if args.variant != Variant.SUM.value and not args.payload and (role == "B" or args.variant == Variant.BOTH.value):
        parser.error(f"--payload is required for this role in the {args.variant} variant")
    if not args.no_dp:
        if args.seed is None:
            parser.error("--seed is required unless --no-dp is given")
        if args.tau is None and (args.epsilon is None or args.delta is None):
            parser.error("--epsilon and --delta (or --tau) are required unless --no-dp is given")
    if args.rng_seed is not None:
        log.warning("--rng-seed makes private randomness predictable; use only for testing")

    try:
        table = ingest_csv(args.ids, args.id_columns, args.payload)
    except (IngestError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    common = dict(variant=args.variant, tag_width=args.tag_width, ahe_bits=args.ahe_bits,
                  skip_last_update=args.skip_last_update)
    try:
        if args.no_dp:
            plan = make_plan(table.m, tau=0, **common)
        else:
            plan = make_plan(table.m, args.epsilon, args.delta, args.executions, args.seed,
                             tau=args.tau, n_x=args.nx, **common)
    except (PlanError, AccountantError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    log.info("tau=%d for m=%d, %d rows", plan.tau, plan.m, table.n)

    try:
        if args.listen:
            channel = tcp_listen(args.listen, timeout=args.timeout)
        else:
            channel = tcp_connect(args.connect, retry_for=args.timeout)
    except (TransportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT

    try:
        report = run_role(role, table, plan, channel, args.rng_seed, args.seed)
    except SessionAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT
    finally:
        channel.close()
    _emit(report.to_dict(), args.report)
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "accountant":
        return cmd_accountant(argv[1:])
    if argv and argv[0] == "leakage":
        return cmd_leakage(argv[1:])
    if argv and argv[0] == "run":
        argv = argv[1:]
    return cmd_party(argv)


if __name__ == "__main__":
    sys.exit(main())
