"""Run the two-dimensional affine benchmark end to end and print its scorecard.

The default preset is ``desk-affine2d`` (about 20 minutes on one CPU).
Pass ``--config paper-affine2d`` for the full-scale run.

    python3 scripts/desk_benchmark.py --out runs/desk
"""

from __future__ import annotations

import argparse
import json
import logging

from langevin_rom.config import load_config
from langevin_rom.pipeline import Pipeline


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="desk-affine2d")
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    records = Pipeline(cfg, args.out, args.threads).run()
    for stage, rec in records.items():
        print(f"{stage:14s} {rec.status:8s} {rec.seconds:9.1f} s")
    print(json.dumps(records["validate"].summary, indent=2, default=str))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
