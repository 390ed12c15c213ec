"""``crossreid`` command-line entry point.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import checks, pipeline
from .config import ConfigError, ExperimentConfig, load_config

log = logging.getLogger("crossreid")

COMMANDS = ("synth", "train-style", "generate", "train", "eval", "gradcheck", "oracle")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossreid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", default=None, help="override [experiment] out")
        p.add_argument("--seed", type=int, default=None, help="override [experiment] seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            p.add_argument("--resume", default=None, help="checkpoint directory, or 'latest'")
        if name == "eval":
            p.add_argument("--ckpt", default=None, help="checkpoint directory (default: latest)")
        if name == "gradcheck":
            p.add_argument("--eps", type=float, default=1e-3)
            p.add_argument("--n-params", type=int, default=50)
            p.add_argument("--tol", type=float, default=1e-3)
        if name == "oracle":
            p.add_argument("--trials", type=int, default=200)
    return parser


def run(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    cmd = args.command
    if cmd == "synth":
        print(pipeline.cmd_synth(cfg))
    elif cmd == "train-style":
        print(pipeline.cmd_train_style(cfg))
    elif cmd == "generate":
        st, tt = pipeline.cmd_generate(cfg)
        print(st)
        print(tt)
    elif cmd == "train":
        res = pipeline.cmd_train(cfg, args.resume)
        print(f"trained {len(res.history)} steps from epoch {res.start_epoch}; checkpoint {res.checkpoint}")
    elif cmd == "eval":
        r = pipeline.cmd_eval(cfg, args.ckpt)
        print(f"rank-1 {r.rank(1):.4f}  rank-5 {r.rank(min(5, len(r.cmc))):.4f}  mAP {r.map:.4f}  "
              f"queries {r.n_queries_evaluated}")
    elif cmd == "gradcheck":
        rep = checks.gradcheck_from_config(cfg, args.eps, args.n_params)
        ok = rep.max_rel_error <= args.tol
        print(f"max relative error {rep.max_rel_error:.3e} over {rep.n_checked} parameters "
              f"({rep.n_kink_skipped} draws crossed a kink and were redrawn) "
              f"{'PASS' if ok else 'FAIL'} at tol {args.tol:g}")
        return 0 if ok else 2
    elif cmd == "oracle":
        summary = checks.metric_oracle_trials(args.trials, cfg.seed)
        print(f"metric oracle: {summary['trials']} trials, CMC mismatches {summary['cmc_mismatches']}, "
              f"max |dmAP| {summary['max_map_diff']:.2e}")
        tri = checks.triplet_oracle_trials(min(args.trials, 100), cfg.seed)
        print(f"triplet oracle: {tri['trials']} batches, selection mismatches {tri['selection_mismatches']}, "
              f"max |dloss| {tri['max_loss_diff']:.2e}")
        ok = (summary["cmc_mismatches"] == 0 and summary["max_map_diff"] <= 1e-9
              and tri["selection_mismatches"] == 0 and tri["max_loss_diff"] <= 1e-9)
        return 0 if ok else 2
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    try:
        return run(args, cfg)
    except (ConfigError, pipeline.MissingArtifact, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        log.exception("command %s failed", args.command)
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
