"""Launch a worker: install limits from the arguments, then serve frames."""
from __future__ import annotations

import argparse

from .worker import enforce_limits, serve_loop


def main() -> None:
    parser = argparse.ArgumentParser(prog="sandbox_runner")
    parser.add_argument("--memory-limit-bytes", type=int, default=None)
    parser.add_argument("--cpu-limit-s", type=float, default=None)
    args = parser.parse_args()
    enforce_limits(args.memory_limit_bytes, args.cpu_limit_s)
    serve_loop()


if __name__ == "__main__":
    main()
