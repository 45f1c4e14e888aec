"""Command line entry points.

Subcommands:
  simulate  — run one episode (or one seed set) and write a metrics CSV.
  sweep     — Cartesian sweep driven by a config file.
  radiomap  — dump the per-cell SNR/LoS table for a map.
  validate  — parse a map (and optional scenario) and report basic stats.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .harness import (ExperimentConfig, load_config_file, parse_config_text,
                      config_from_values, run_episode, sweep, sweep_csv,
                      sweep_grid_from_values)
from .map_model import Cell, free_cell_count, parse_map, parse_scenario
from .radio_link import LinkBudgetParams, build_radio_map, radio_map_csv


def _write(path: str, text: str):
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def _add_simulate(sub):
    p = sub.add_parser("simulate", help="run episodes for one setting")
    p.add_argument("--map", required=True, help="map file path")
    p.add_argument("--agents", type=int, required=True)
    p.add_argument("--horizon", type=int, default=128)
    p.add_argument("--channel-ratio", type=float, default=0.0)
    p.add_argument("--controller", required=True,
                   choices=["local", "hybrid", "central-baseline"])
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--scen", default=None, help="scenario file path")
    p.add_argument("--config", default=None, help="optional config file")
    p.add_argument("--out", default="-", help="output CSV path ('-' = stdout)")


def _add_sweep(sub):
    p = sub.add_parser("sweep", help="run a Cartesian parameter sweep")
    p.add_argument("--config", required=True, help="config file with sweep.* keys")
    p.add_argument("--out", default="-", help="output CSV path ('-' = stdout)")


def _add_radiomap(sub):
    p = sub.add_parser("radiomap", help="dump per-cell SNR and LoS flags")
    p.add_argument("--map", required=True)
    p.add_argument("--ap", default=None, metavar="X,Y",
                   help="access point cell (default: free cell nearest center)")
    p.add_argument("--out", default="-")


def _add_validate(sub):
    p = sub.add_parser("validate", help="check a map/scenario pair parses")
    p.add_argument("--map", required=True)
    p.add_argument("--scen", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mapf-airsim")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_simulate(sub)
    _add_sweep(sub)
    _add_radiomap(sub)
    _add_validate(sub)
    return parser


def _cmd_simulate(args) -> int:
    if args.config:
        config = load_config_file(args.config)
    else:
        config = ExperimentConfig(map_path=args.map)
    config = replace(
        config,
        map_path=args.map,
        scen_path=args.scen if args.scen else config.scen_path,
        n_agents=args.agents,
        horizon=args.horizon,
        channel_ratio=args.channel_ratio,
        controller=args.controller.replace("-", "_"),
        seeds=(args.seed,))
    records = [run_episode(config, args.seed)]
    _write(args.out, sweep_csv(records))
    return 0


def _cmd_sweep(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        values = parse_config_text(fh.read())
    import os
    base_dir = os.path.dirname(os.path.abspath(args.config))
    configs = sweep_grid_from_values(values, base_dir=base_dir)
    records = sweep(configs)
    _write(args.out, sweep_csv(records))
    return 0


def _cmd_radiomap(args) -> int:
    with open(args.map, "rb") as fh:
        grid = parse_map(fh.read())
    if args.ap:
        x, y = (int(v) for v in args.ap.split(","))
        ap = Cell(x, y)
    else:
        from .harness import _default_ap
        ap = _default_ap(grid)
    rmap = build_radio_map(grid, ap, LinkBudgetParams())
    _write(args.out, radio_map_csv(rmap, grid))
    return 0


def _cmd_validate(args) -> int:
    with open(args.map, "rb") as fh:
        grid = parse_map(fh.read())
    print(f"map: {args.map}: {grid.width}x{grid.height}, "
          f"{free_cell_count(grid)} free cells")
    if args.scen:
        with open(args.scen, "rb") as fh:
            scen = parse_scenario(fh.read(), grid)
        print(f"scenario: {args.scen}: {len(scen)} entries")
    print("ok")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"simulate": _cmd_simulate, "sweep": _cmd_sweep,
               "radiomap": _cmd_radiomap, "validate": _cmd_validate}[args.command]
    try:
        return handler(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
