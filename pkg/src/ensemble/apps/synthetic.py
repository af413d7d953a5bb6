"""Synthetic application for executor and watchdog runs.

Sleeps for ``--duration`` seconds while appending ``t=<seconds>`` heartbeat
lines to ``--outfile``. With ``--lost-at S`` it writes ``PARTICLE LOST t=S`` at
that time and keeps running; a final ``DONE t=<duration>`` line marks natural
completion. Times written are nominal (scheduled), not measured.
"""

from __future__ import annotations

import argparse
import os
import signal
import sys
import time

MARKER = "PARTICLE LOST"


def parse(argv=None):
    p = argparse.ArgumentParser(prog="ensemble-synthetic")
    p.add_argument("--duration", type=float, required=True)
    p.add_argument("--lost-at", type=float, default=None)
    p.add_argument("--outfile", required=True)
    p.add_argument("--interval", type=float, default=0.05)
    p.add_argument("--ignore-term", action="store_true")
    p.add_argument("--report-env", action="store_true")
    p.add_argument("--exit-code", type=int, default=0)
    return p.parse_args(argv)


def main(argv=None) -> int:
    args = parse(argv)
    if args.ignore_term:
        signal.signal(signal.SIGTERM, signal.SIG_IGN)
    start = time.monotonic()
    events = []
    k = 1
    while k * args.interval < args.duration:
        events.append((k * args.interval, f"t={k * args.interval:.3f}"))
        k += 1
    if args.lost_at is not None and args.lost_at < args.duration:
        events.append((args.lost_at, f"{MARKER} t={args.lost_at:.3f}"))
    events.sort(key=lambda e: e[0])
    events.append((args.duration, f"DONE t={args.duration:.3f}"))
    with open(args.outfile, "w", buffering=1) as out:
        if args.report_env:
            for key in ("ENS_VISIBLE_SLOTS", "ENS_NUM_PROCS", "ENS_WORKER_ID"):
                out.write(f"ENV {key}={os.environ.get(key, '')}\n")
        for at, line in events:
            delay = start + at - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            out.write(line + "\n")
    return args.exit_code


if __name__ == "__main__":
    sys.exit(main())
