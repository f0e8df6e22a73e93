"""Train binary/focal and TDF/adaptive-MSE autoencoders on synthetic blocks.

    python scripts/train_autoencoder.py --out runs/ --blocks 24 --size 32 --steps 300
"""

import argparse
import json
import logging
import os
import time

import numpy as np

from pcqa.autoencoder import TrainConfig, evaluate_loss, save_params, train
from pcqa.synthetic import synthetic_blocks
from pcqa.voxelize import voxelize

log = logging.getLogger("train_autoencoder")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    ap.add_argument("--blocks", type=int, default=24)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--batch-size", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    os.makedirs(args.out, exist_ok=True)

    clouds = synthetic_blocks(args.blocks, args.size, args.seed)
    held_out = synthetic_blocks(6, args.size, args.seed + 1000)
    summary = {}
    for repr_, loss in (("binary", "focal"), ("tdf", "adaptive_mse")):
        blocks = [voxelize(pc, args.size, repr_).values for pc in clouds]
        test = [voxelize(pc, args.size, repr_).values[None].astype(np.float32) for pc in held_out]
        cfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, loss=loss, seed=args.seed)
        history = []
        t0 = time.perf_counter()
        params = train(blocks, cfg, repr=repr_, history=history, threads=args.threads)
        elapsed = time.perf_counter() - t0
        path = os.path.join(args.out, f"{repr_}.pcqae")
        save_params(params, path)
        summary[repr_] = {"loss": loss, "first": history[0], "last": history[-1],
                          "held_out": evaluate_loss(params, test, cfg), "seconds": elapsed}
        log.info("%s/%s: %.4g -> %.4g (held out %.4g) in %.0fs -> %s", repr_, loss,
                 history[0], history[-1], summary[repr_]["held_out"], elapsed, path)
        np.savetxt(os.path.join(args.out, f"{repr_}_history.txt"), history)
    with open(os.path.join(args.out, "train_summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
