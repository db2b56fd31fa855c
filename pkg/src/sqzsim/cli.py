"""Command-line scenario runner.

    sqzsim run <scenario> --seed S --compression C --out DIR [--set k=v]...
    sqzsim keys

Exit codes: 0 success, 2 configuration error, 3 check-threshold failure
(with --check).
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import DEFAULTS, Config, ConfigError, load_config_file, parse_override
from .scenarios import SCENARIOS, run_scenario


def build_parser():
    p = argparse.ArgumentParser(
        prog="sqzsim",
        description="Simulator of an automated fiber squeezed-light station.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser(
        "run", help="run a scenario",
        description="Scenarios: " + ", ".join(sorted(SCENARIOS))
        + ". Each emits CSV files with a header row plus manifest.json "
          "into the output directory.",
    )
    run.add_argument("scenario", choices=sorted(SCENARIOS))
    run.add_argument("--seed", default="1",
                     help="integer seed, or comma-separated list for multi-seed runs")
    run.add_argument("--compression", type=float, default=None,
                     help="time-compression factor (default from config)")
    run.add_argument("--out", default="out", help="output directory")
    run.add_argument("--config", default=None, help="key=value config file")
    run.add_argument("--set", dest="sets", action="append", default=[],
                     metavar="KEY=VALUE", help="override one config key")
    run.add_argument("--check", action="store_true",
                     help="evaluate scenario acceptance thresholds; exit 3 on failure")
    run.add_argument("--jobs", type=int, default=1,
                     help="parallel workers for multi-seed runs")

    sub.add_parser("keys", help="list all config keys with defaults")
    return p


def _run_one(args_tuple):
    name, overrides, seed, out_dir = args_tuple
    cfg = Config(overrides)
    return seed, run_scenario(name, cfg, seed, out_dir)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "keys":
        for key in sorted(DEFAULTS):
            print(f"{key} = {DEFAULTS[key]}")
        return 0

    try:
        overrides = {}
        if args.config:
            overrides.update(load_config_file(args.config))
        for s in args.sets:
            key, val = parse_override(s)
            overrides[key] = val
        if args.compression is not None:
            overrides["plant.compression"] = args.compression
        seeds = [int(s) for s in str(args.seed).split(",")]
        Config(overrides)  # validate before any work
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    out_root = Path(args.out)
    jobs = []
    for seed in seeds:
        out_dir = out_root if len(seeds) == 1 else out_root / f"seed_{seed}"
        jobs.append((args.scenario, overrides, seed, out_dir))

    results = {}
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for seed, res in pool.map(_run_one, jobs):
                results[seed] = res
    else:
        for job in jobs:
            seed, res = _run_one(job)
            results[seed] = res

    all_ok = True
    for seed in seeds:
        res = results[seed]
        print(json.dumps({"seed": seed, **res}, sort_keys=True))
        all_ok = all_ok and res.get("ok", True)

    if args.check and not all_ok:
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
