"""Median per-epoch wall-clock of standard, sensitivity-regularized and adversarial training."""
import argparse
import statistics
import time
import warnings
from dataclasses import replace

from neurosens.attacks import AttackConfig
from neurosens.data import synth_blobs
from neurosens.nn import init_network
from neurosens.training import RegMode, RegularizerConfig, TrainConfig, train_adversarial, train_sensitivity, train_standard


def timed(fn, reps):
    out = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--top-k", type=int, default=64)
    args = ap.parse_args()

    data = synth_blobs(10, 500, 32, 4.0, seed=5)
    cfg = TrainConfig(epochs=args.epochs, batch_size=64, track_delta=False, logit_norm_alarm_threshold=None)
    reg = RegularizerConfig(RegMode.PROPOSED, 1.0, 10.0, top_k=args.top_k)
    adv = replace(cfg, adversarial=AttackConfig(epsilon=0.03, steps=10))
    net = lambda: init_network([32, 64, 64, 10], 0)  # noqa: E731
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        train_sensitivity(net(), data, cfg, reg)  # compile kernels outside the timed region
        base = timed(lambda: train_standard(net(), data, cfg), args.reps) / args.epochs
        sens = timed(lambda: train_sensitivity(net(), data, cfg, reg), args.reps) / args.epochs
        advt = timed(lambda: train_adversarial(net(), data, adv), args.reps) / args.epochs
    print(f"standard     {base:.4f} s/epoch")
    print(f"sensitivity  {sens:.4f} s/epoch  ({sens / base:.2f}x)")
    print(f"adversarial  {advt:.4f} s/epoch  ({advt / base:.2f}x)")


if __name__ == "__main__":
    main()
