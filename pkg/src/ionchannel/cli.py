"""Command line entry point: ``ionchannel --scenario sez1 --out runs/sez1``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .config import SCENARIOS, SCHEMES, load_config, preset, serialize, validate
from .coupling import run_simulation
from .errors import IonChannelError

logger = logging.getLogger("ionchannel")


def build_parser():
    p = argparse.ArgumentParser(prog="ionchannel", description="Coupled ion transport, flow, heat and "
                                "mechanics in a nanochannel.")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="INI configuration file")
    src.add_argument("--scenario", choices=sorted(SCENARIOS), help="built-in scenario preset")
    p.add_argument("--resolution", type=float, help="target mesh spacing in m")
    p.add_argument("--dt", type=float, help="time step in s (keeps t_final)")
    p.add_argument("--t-final", type=float, help="final time in s")
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--stokes", choices=("th", "hfb"), help="fluid discretization")
    p.add_argument("--steady", action="store_true", help="single steady solve")
    p.add_argument("--no-flow", action="store_true", help="disable the fluid (pure PNP)")
    p.add_argument("--out", default=None, help="output directory (default from config)")
    p.add_argument("--dump-config", action="store_true", help="print the resolved configuration and exit")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def resolve(args):
    cfg = load_config(args.config) if args.config else preset(args.scenario)
    if args.resolution is not None:
        cfg = cfg.replace(geometry=replace(cfg.geometry, resolution=args.resolution))
    time = cfg.time
    if args.t_final is not None:
        time = replace(time, t_final=args.t_final)
    if args.dt is not None:
        if not args.dt > 0:
            raise SystemExit("--dt must be positive")
        time = replace(time, steps=max(1, round(time.t_final / args.dt)))
    if args.scheme:
        time = replace(time, scheme=args.scheme)
    if args.steady:
        time = replace(time, steady=True)
    cfg = cfg.replace(time=time)
    if args.stokes:
        cfg = cfg.replace(fluid=replace(cfg.fluid, discretization=args.stokes))
    if args.no_flow:
        cfg = cfg.replace(fluid=replace(cfg.fluid, enabled=False))
    validate(cfg)
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        if args.dump_config:
            sys.stdout.write(serialize(cfg))
            return 0
        out = args.out or cfg.output.directory

        def progress(k, state):
            logger.info("step %d t=%.3e s gummel=%d", k, state.t, state.gummel_iterations)

        result = run_simulation(cfg, out, keep_states=False, progress=progress)
    except IonChannelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"{cfg.scenario}: {len(result.files)} files written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
