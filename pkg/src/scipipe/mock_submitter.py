"""Mock batch submitter for desk-scale testing.

Stands in for a real scheduler submit command: honors ``-c``, ``--mem``,
and ``-t`` (enforced as a wall-clock kill), reads the batch script from
stdin, records its argv to the ledger file named by the
``MOCK_SUBMITTER_LEDGER`` environment variable, and exits with the
script's exit code (124 on wall-time kill).
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import tempfile

LEDGER_ENV = "MOCK_SUBMITTER_LEDGER"
TIMEOUT_EXIT_CODE = 124


def parse_walltime(value: str) -> float:
    """Scheduler-style wall time: H:M:S, M:S, or plain minutes."""
    parts = value.split(":")
    try:
        numbers = [int(p) for p in parts]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad wall time {value!r}") from exc
    if len(numbers) == 3:
        hours, minutes, seconds = numbers
    elif len(numbers) == 2:
        hours, minutes, seconds = 0, numbers[0], numbers[1]
    elif len(numbers) == 1:
        hours, minutes, seconds = 0, numbers[0], 0
    else:
        raise argparse.ArgumentTypeError(f"bad wall time {value!r}")
    return hours * 3600 + minutes * 60 + seconds


def record_argv(argv: list[str]) -> None:
    ledger = os.environ.get(LEDGER_ENV)
    if not ledger:
        return
    with open(ledger, "a", encoding="utf-8") as fh:
        fh.write(json.dumps({"argv": argv}) + "\n")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    record_argv(argv)

    parser = argparse.ArgumentParser(prog="scipipe-mock-sbatch")
    parser.add_argument("-c", type=int, default=1, dest="cpus")
    parser.add_argument("--mem", default=None)
    parser.add_argument("-t", dest="walltime", type=parse_walltime, default=None)
    parser.add_argument("--wait", action="store_true")
    try:
        args, leftover = parser.parse_known_args(argv)
    except SystemExit:
        return 2
    if leftover:
        print(f"scipipe-mock-sbatch: unrecognized arguments: {leftover}", file=sys.stderr)
        return 2

    script = sys.stdin.read()
    with tempfile.NamedTemporaryFile("w", suffix=".sh", delete=False) as fh:
        fh.write(script)
        script_path = fh.name
    # Own process group so a wall-time kill takes out every descendant,
    # not just the direct shell.
    proc = subprocess.Popen(["/bin/sh", script_path], start_new_session=True)
    try:
        return proc.wait(timeout=args.walltime)
    except subprocess.TimeoutExpired:
        import signal

        os.killpg(proc.pid, signal.SIGKILL)
        proc.wait()
        print("TIMEOUT: job exceeded requested wall time", file=sys.stderr)
        return TIMEOUT_EXIT_CODE
    finally:
        os.unlink(script_path)


if __name__ == "__main__":
    sys.exit(main())
