"""Command line: ``qkdnet {validate,run,inspect,replay-trace}``.

Exit status 0 on success, 1 when a scenario check fails or a trace does
not replay, 2 on configuration or usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib.resources import files

from .config import ConfigError, load_config, load_script, check_script
from .netsim import trace_digest
from .scenario import Deployment, ScenarioError, run_scenario

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def sample_config() -> str:
    return str(files("qkdnet") / "data" / "three_testbeds.yaml")


def _common(p: argparse.ArgumentParser, *, script: bool = True) -> None:
    p.add_argument("--config", default=None, help="deployment file (YAML or JSON); default: bundled three-testbed sample")
    if script:
        p.add_argument("--script", default=None, help="action script (YAML or JSON); default: no actions")
        p.add_argument("--seed", type=int, default=None, help="override the deployment seed")
        p.add_argument("--wall-clock", action="store_true", help="pace virtual time with real time")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qkdnet", description="Hybrid QKD/PQC key network emulator.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("validate", help="check a deployment (and optionally a script)")
    _common(p)

    p = sub.add_parser("run", help="run a scenario and report")
    _common(p)
    p.add_argument("--report", default=None, help="write the JSON report here")
    p.add_argument("--trace", default=None, help="write the channel trace here (one JSON record per line)")
    p.add_argument("--json", action="store_true", help="print the JSON report instead of the table")

    p = sub.add_parser("inspect", help="run a scenario, then list one node's keys")
    _common(p)
    p.add_argument("--node", default=None, help="domain/name; omit to list nodes")
    p.add_argument("--tail", type=int, default=0, help="also print the last N trace records")

    p = sub.add_parser("replay-trace", help="verify a recorded trace")
    _common(p)
    p.add_argument("--trace", required=True, help="trace file written by 'run --trace'")
    p.add_argument("--report", default=None, help="report whose trace_hash the file must match")
    return ap


def _load(args):
    config = load_config(args.config or sample_config())
    script = load_script(args.script)
    return config, script


def cmd_validate(args) -> int:
    config, script = _load(args)
    try:
        d = Deployment(config, seed=args.seed)
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("", str(exc)) from exc
    check_script(script, d.config, d.channel_ids())
    print(
        f"ok: {len(config.domains)} domains, {len(config.nodes)} nodes, {len(config.links)} links, "
        f"{len(config.borders)} border agreements, {len(d.controllers)} controllers, {len(script.actions)} actions"
    )
    return EXIT_OK


def cmd_run(args) -> int:
    config, script = _load(args)
    report = run_scenario(config, script, seed=args.seed, wall_clock=args.wall_clock)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            for line in report.deployment.tail_trace():
                fh.write(line + "\n")
    sys.stdout.write(report.to_json() if args.json else report.table())
    return EXIT_OK if report.ok else EXIT_FAILED


def cmd_inspect(args) -> int:
    config, script = _load(args)
    report = run_scenario(config, script, seed=args.seed, wall_clock=args.wall_clock)
    d = report.deployment
    if args.node is None:
        for node, row in report.data["nodes"].items():
            print(f"{node:<24} keys {row['keys']:>6}  consumed {row['consumed']:>6}  e2e {row['e2e']:>4}")
    else:
        for row in d.inspect_store(args.node):
            print(json.dumps(row, sort_keys=True))
    if args.tail:
        for line in d.tail_trace(args.tail):
            print(line)
    return EXIT_OK


def cmd_replay(args) -> int:
    with open(args.trace, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    digest = trace_digest(lines)
    print(f"{len(lines)} records, sha256 {digest}")
    status = EXIT_OK
    if args.report:
        with open(args.report, encoding="utf-8") as fh:
            expected = json.load(fh)["trace_hash"]
        if expected != digest:
            print(f"mismatch: report expects {expected}")
            status = EXIT_FAILED
        else:
            print("matches report")
    if args.config:
        config, script = _load(args)
        report = run_scenario(config, script, seed=args.seed)
        fresh = list(report.deployment.tail_trace())
        for i, (old, new) in enumerate(zip(lines, fresh)):
            if old != new:
                print(f"diverges at record {i}:\n  recorded {old}\n  replayed {new}")
                return EXIT_FAILED
        if len(lines) != len(fresh):
            print(f"length differs: recorded {len(lines)}, replayed {len(fresh)}")
            return EXIT_FAILED
        print("re-run reproduces the trace")
    return status


COMMANDS = {"validate": cmd_validate, "run": cmd_run, "inspect": cmd_inspect, "replay-trace": cmd_replay}


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
