"""Command-line entry point: ``trafficflow {generate,train,eval,infer,plot}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path


from .pipeline import (DATA_ENV, RunConfig, default_data_root, run_eval, run_generate, run_infer,
                       run_plot, run_training)
from .synthworld import read_sequence


def _config(path):
    return RunConfig.from_yaml(path) if path else RunConfig.tiny()


def build_parser():
    parser = argparse.ArgumentParser(prog="trafficflow", description="Radar scene-flow toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    data_help = f"dataset root (default: ${DATA_ENV} or ./data)"

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", type=Path)

    t = sub.add_parser("train", help="staged training")
    t.add_argument("--config")
    t.add_argument("--data", type=Path, help=data_help)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--resume", type=Path)

    e = sub.add_parser("eval", help="metric report for a checkpoint")
    e.add_argument("--config")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, help=data_help)
    e.add_argument("--report", type=Path, required=True)
    e.add_argument("--split", default="test", choices=("train", "test"))

    i = sub.add_parser("infer", help="write predicted flow per frame")
    i.add_argument("--config")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--data", type=Path, help=data_help)
    i.add_argument("--out", type=Path, required=True)
    i.add_argument("--split", default="test", choices=("train", "test"))

    p = sub.add_parser("plot", help="BEV arrow plot of a flow sequence directory")
    p.add_argument("--frames", type=Path, required=True, help="directory of frame_*.bin files")
    p.add_argument("--out", type=Path, required=True, help="output directory for PNGs")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if args.command == "generate":
        cfg = _config(args.config)
        manifest = run_generate(cfg, args.out or default_data_root())
        print(f"wrote {len(manifest['train'])} train / {len(manifest['test'])} test sequences")
    elif args.command == "train":
        result = run_training(_config(args.config), args.data or default_data_root(), args.out,
                              resume=args.resume)
        print(f"checkpoint: {result.checkpoint}")
    elif args.command == "eval":
        cfg = RunConfig.from_yaml(args.config) if args.config else None
        report = run_eval(cfg, args.checkpoint, args.data or default_data_root(), args.report, args.split)
        sys.stdout.write(report.to_csv())
    elif args.command == "infer":
        cfg = RunConfig.from_yaml(args.config) if args.config else None
        files = run_infer(cfg, args.checkpoint, args.data or default_data_root(), args.out, args.split)
        print(f"wrote {len(files)} frames")
    elif args.command == "plot":
        for frame in read_sequence(args.frames):
            run_plot(frame.positions, frame.gt_flow, args.out / f"frame_{frame.frame_index:04d}.png",
                     title=f"frame {frame.frame_index}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
