"""Re-derive the frozen heatmap threshold used by the end-to-end checks.

Trains the smoke configuration with a held-out calibration seed and scores
every threshold on the training split.  Takes about three minutes.
"""
import argparse

from wsol.augment import AugmentSpec
from wsol.data import generate_synthetic
from wsol.evaluation import calibrate_threshold
from wsol.model import ModelConfig, build_network
from wsol.train import TrainConfig, fit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=100)
    ap.add_argument("--policy", default="gr")
    args = ap.parse_args()
    train, _, _ = generate_synthetic(4, 100, 25, 32, seed=args.seed)
    net = build_network(ModelConfig("toy10", 4, 32), args.seed)
    net, _ = fit(net, train, TrainConfig(epochs=30, batch_size=32, seed=args.seed,
                                         augment=AugmentSpec(policy=args.policy)))
    best, scores = calibrate_threshold(net, train)
    for thr, score in scores.items():
        print(f"{thr:.2f}  {score:6.2f}{'  <- best' if thr == best else ''}")


if __name__ == "__main__":
    main()
