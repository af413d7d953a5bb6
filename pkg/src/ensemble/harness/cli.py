"""Command line entry point.

``ensemble run --scenario NAME [--comms MODE] [--nworkers N] [--seed S]
[--config FILE] [--outdir DIR] [--log-level LEVEL]`` runs one scenario and
writes ``ensemble.log``, ``libE_stats.txt``, ``H_final.ensh``, ``report.json``
and ``trace.csv`` into the output directory.

Exit codes: 0 criteria met, 2 aborted, 3 wallclock timeout, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from ..comms import MODES
from ..comms.tcp import TcpWorkerEndpoint
from ..log import attach_file_log, detach, parse_level
from ..manager import ManagerFault, run_ensemble, worker_setup
from ..worker import worker_loop
from .report import report_emit
from .scenarios import build, scenario_catalog

EXIT_CODES = {"criteria_met": 0, "aborted": 2, "timeout": 3}
EX_USAGE = 64

logger = logging.getLogger("ensemble.harness")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(EX_USAGE, f"{self.prog}: error: {message}\n")


def _positive(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _scenario(text: str) -> str:
    if text not in scenario_catalog():
        raise argparse.ArgumentTypeError(f"unknown scenario {text!r}; choose from {', '.join(scenario_catalog())}")
    return text


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", type=_scenario, required=True)
    p.add_argument("--nworkers", type=_positive, default=1, help="simulation workers (a persistent generator adds one more)")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--config", type=Path, help="JSON document merged over the scenario defaults")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ensemble", description="Run manager/worker ensemble scenarios.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    run = sub.add_parser("run", help="run a scenario")
    _common(run)
    run.add_argument("--comms", choices=MODES, default="inproc")
    run.add_argument("--outdir", type=Path, default=Path("."))
    run.add_argument("--log-level", default="INFO")
    run.add_argument("--port", type=int, default=0, help="tcp: listening port (0 picks one)")
    run.add_argument("--host", default="127.0.0.1", help="tcp: listening address")
    run.add_argument("--remote-workers", action="store_true", help="tcp: wait for externally started workers")

    wk = sub.add_parser("worker", help="connect to a tcp manager as one worker")
    _common(wk)
    wk.add_argument("--host", default="127.0.0.1")
    wk.add_argument("--port", type=int, required=True)
    wk.add_argument("--worker-id", type=_positive, required=True)
    wk.add_argument("--outdir", type=Path, default=Path("."))

    sub.add_parser("list", help="list scenarios")
    return parser


def _overrides(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return doc


def cmd_run(args) -> int:
    outdir = args.outdir.resolve()
    outdir.mkdir(parents=True, exist_ok=True)
    overrides = _overrides(args.config)
    comms_cfg = {"host": args.host, "port": args.port, "launch": not args.remote_workers}
    overrides.setdefault("libE_specs", {}).setdefault("comms_config", {}).update(comms_cfg)
    plan = build(args.scenario, nworkers=args.nworkers, comms=args.comms, seed=args.seed, outdir=outdir, overrides=overrides)

    for name in ("ensemble.log", "libE_stats.txt"):
        (outdir / name).write_text("", encoding="utf-8")
    handler = attach_file_log(outdir / "ensemble.log", parse_level(args.log_level))
    holder = {}
    t0 = time.monotonic()
    try:
        try:
            hist, persis_info, flag = run_ensemble(
                plan.sim_specs,
                plan.gen_specs,
                plan.exit_criteria,
                plan.alloc_specs,
                plan.config,
                preload=plan.preload,
                manager_hook=lambda m: holder.setdefault("mgr", m),
            )
        except ManagerFault as exc:
            logger.error("run aborted by manager fault: %s", exc)
            flag = "aborted"
        mgr = holder.get("mgr")
        if mgr is None:
            raise RuntimeError("manager was not created")
        hist_path = outdir / "H_final.ensh"
        mgr.hist.save(hist_path)
        code = EXIT_CODES[flag]
        report_emit(
            mgr,
            flag,
            scenario=args.scenario,
            outdir=outdir,
            wall_time=time.monotonic() - t0,
            exit_code=code,
            history_path=hist_path,
            extra=_extras(plan, mgr),
        )
        print(f"{args.scenario}: {flag} ({mgr.counts()['returned']} returned) -> {outdir}")
        return code
    finally:
        detach(handler)


def _extras(plan, mgr) -> dict:
    """Scenario-specific diagnostics lifted from generator state."""
    extra = {"nworkers": plan.config.nworkers, "seed": plan.config.seed, "comms": plan.config.comms}
    keys = ("local_minima", "seed_log", "calib_counters", "cancel_log", "batch_trace", "reply_trace")
    for info in mgr.persis_info.values():
        for k in keys:
            if k in info:
                extra[k] = info[k]
    if mgr.errors:
        extra["errors"] = mgr.errors
    if mgr.violations:
        extra["violations"] = mgr.violations
    return extra


def cmd_worker(args) -> int:
    plan = build(args.scenario, nworkers=args.nworkers, comms="tcp", seed=args.seed, outdir=args.outdir.resolve(), overrides=_overrides(args.config))
    ep = TcpWorkerEndpoint.connect(args.host, args.port, args.worker_id)
    try:
        worker_loop(ep, worker_setup(plan.sim_specs, plan.gen_specs, plan.config))
    finally:
        ep.close()
    return 0


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "list":
            print("\n".join(scenario_catalog()))
            return 0
        if args.command == "worker":
            return cmd_worker(args)
        return cmd_run(args)
    except UsageError as exc:
        parser.print_help(sys.stderr)
        print(f"ensemble: error: {exc}", file=sys.stderr)
        return EX_USAGE


if __name__ == "__main__":
    sys.exit(main())
