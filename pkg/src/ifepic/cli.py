"""Command-line interface: run, scale, and oracle subcommands.

Exit codes: 0 success, 2 configuration error, 3 runtime/numerics error,
4 communication-protocol error.
"""

from __future__ import annotations

import argparse
import sys

from . import __version__


def _parse_decomps(text: str):
    out = []
    for part in text.split(","):
        dims = part.strip().lower().split("x")
        if len(dims) != 3:
            raise ValueError(f"bad decomposition {part!r}; expected e.g. 2x2x2")
        out.append(tuple(int(v) for v in dims))
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ifepic",
                                description="3-D IFE-PIC plasma-charging simulator")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a simulation from a config file")
    run.add_argument("--config", required=True, help="path to a .cfg scenario file")
    run.add_argument("--engine", choices=["process", "sequential"], default="process")
    run.add_argument("--steps", type=int, default=None, help="override PIC step count")
    run.add_argument("--output-dir", default=None, help="override output directory")

    scale = sub.add_parser("scale", help="strong-scaling suite over decompositions")
    scale.add_argument("--config", required=True)
    scale.add_argument("--decomps", required=True,
                       help="comma list of decompositions, e.g. 1x1x1,2x2x2,2x2x4")
    scale.add_argument("--steps", type=int, default=None)
    scale.add_argument("--engine", choices=["process", "sequential"], default="process")

    orc = sub.add_parser("oracle", help="emit reference CSVs")
    osub = orc.add_subparsers(dest="oracle_kind", required=True)
    oml = osub.add_parser("oml", help="revised-OML radial sheath profile")
    oml.add_argument("--radius", type=float, default=0.401)
    oml.add_argument("--temp-ratio", type=float, default=1.0)
    oml.add_argument("--mass-ratio", type=float, default=1836.0)
    oml.add_argument("--r-max", type=float, default=10.0)
    oml.add_argument("--out", required=True)
    mms = osub.add_parser("manufactured", help="manufactured interface solution sample")
    mms.add_argument("--eps-minus", type=float, default=4.0)
    mms.add_argument("--eps-plus", type=float, default=1.0)
    mms.add_argument("--radius", type=float, default=0.283)
    mms.add_argument("--q", type=float, default=0.0)
    mms.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .config import ConfigError
    from .ddm import ProtocolError

    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "scale":
            return _cmd_scale(args)
        if args.command == "oracle":
            return _cmd_oracle(args)
        return 2
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except ProtocolError as e:
        print(f"protocol error: {e}", file=sys.stderr)
        return 4
    except Exception as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 3


def _load(args):
    from dataclasses import replace
    from .config import load_config
    cfg = load_config(args.config)
    if getattr(args, "steps", None) is not None:
        cfg = replace(cfg, steps=args.steps)
    if getattr(args, "output_dir", None):
        cfg = replace(cfg, output_dir=args.output_dir)
    return cfg


def _cmd_run(args) -> int:
    from .driver import run_simulation
    cfg = _load(args)
    res = run_simulation(cfg, engine=args.engine)
    print(f"completed {res.steps} PIC steps in {res.wall_total:.1f} s "
          f"(main loop {res.loop_wall:.1f} s); outputs in {res.output_dir}")
    return 0


def _cmd_scale(args) -> int:
    from .driver import run_scaling_suite
    cfg = _load(args)
    report = run_scaling_suite(cfg, _parse_decomps(args.decomps), engine=args.engine)
    print(report.to_text(), end="")
    return 0


def _cmd_oracle(args) -> int:
    if args.oracle_kind == "oml":
        from .oracle import oml_sheath_profile
        prof = oml_sheath_profile(args.radius, args.temp_ratio, args.mass_ratio,
                                  args.r_max)
        prof.write_csv(args.out)
        print(f"surface potential {prof.surface_potential:.6f} Te/e; wrote {args.out}")
        return 0
    if args.oracle_kind == "manufactured":
        import numpy as np
        from .oracle import ManufacturedInterface
        mms = ManufacturedInterface(eps_minus=args.eps_minus, eps_plus=args.eps_plus,
                                    radius=args.radius, q=args.q)
        r = np.linspace(0.0, 3.0 * args.radius, 301)
        pts = np.stack([r, np.zeros_like(r), np.zeros_like(r)], axis=1)
        phi = mms.phi(pts)
        with open(args.out, "w") as f:
            f.write("r,phi\n")
            for rv, pv in zip(r, phi):
                f.write(f"{rv:.12g},{pv:.12g}\n")
        print(f"wrote {args.out}")
        return 0
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
