"""Train models A, B and C on a synthetic preset and compare them.

    python3 demos/train_and_evaluate.py --preset easy --seed 0
"""

import argparse
import logging
import time

import numpy as np

from prnface import metrics, training
from prnface.config import RunConfig


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--preset", default="easy")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", default=None, help="optional key = value config file")
    args = parser.parse_args()
    logging.basicConfig(level=logging.WARNING)

    run = RunConfig.load(args.config) if args.config else RunConfig()
    run = run.replace(dataset=f"synth:{args.preset}", seed=args.seed)
    start = time.perf_counter()
    res = training.run_pipeline(run)
    print(f"trained in {time.perf_counter() - start:.0f} s on {len(res.train)} faces")

    pairs, same = training.make_pairs(res.val.labels, seed=run.seed)
    print(f"{'model':8s} {'fold acc':>14s} {'TAR@FAR=0.1':>12s} {'softmax':>8s}")
    for variant in ("model_a", "model_b", "model_c"):
        model = res.models[variant]
        emb = model.embed(res.val, variant)
        d = metrics.squared_l2(emb[pairs[:, 0]], emb[pairs[:, 1]])
        fold = metrics.fold_accuracy(d, same, 10, run.seed)
        tar = metrics.verification_roc(d, same).tar_at_far(0.1)
        acc = np.mean(model.predict(res.val, variant) == res.val.labels)
        print(f"{variant:8s} {fold.mean:8.3f}+-{fold.std:.3f} {tar:12.3f} {acc:8.3f}")


if __name__ == "__main__":
    main()
