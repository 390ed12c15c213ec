"""Train the camera-style GAN on a two-camera toy world and report the reconstruction trend."""

import argparse
import logging
import time

import numpy as np
import torch

from crossreid.data import SyntheticWorldSpec, synthesize_world
from crossreid.style import GanConfig, train_style_engine


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save", default=None, help="write the generator checkpoint here")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    S, T = synthesize_world(SyntheticWorldSpec(4, 4, 1, 1, 4, image_size=(16, 16), seed=args.seed))
    cfg = GanConfig(total_iters=args.iters, image_size=(16, 16), batch_size=8, g_channels=8, d_channels=8,
                    n_res=2, d_layers=4, seed=args.seed)
    t0 = time.time()
    engine, hist = train_style_engine(S, T, cfg)
    rec = hist.running("g_rec", 100)
    w = min(100, len(rec))
    print(f"{hist.d_updates} critic / {hist.g_updates} generator updates in {time.time() - t0:.0f}s")
    print(f"running g_rec {rec[w - 1]:.4f} -> {rec[-1]:.4f}")
    y = engine.transfer(np.random.default_rng(0).uniform(-1, 1, (3, 16, 16, 3)), 1)
    print(f"output shape {y.shape}, range [{y.min():.3f}, {y.max():.3f}]")
    if args.save:
        engine.save(args.save)


if __name__ == "__main__":
    main()
