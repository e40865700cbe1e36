#!/usr/bin/env python3
"""Prune-rate sweep: how average bitwidth, calibration loss, and accuracy
respond as more coordinates are removed from one shared initialization."""

import argparse
from pathlib import Path

from alqecg.data import SplitSpec, normalize_dataset, split, synth_generate
from alqecg.metrics import emit_reports, sweep
from alqecg.net import TrainConfig, default_ecgnet_spec, init_params, train
from alqecg.quantizer import AlqConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out/sweep")
    ap.add_argument("--rates", default="0,0.1,0.25,0.5,0.75,0.9,0.95")
    ap.add_argument("--n-per-class", type=int, default=40)
    ap.add_argument("--epochs", type=int, default=25)
    ap.add_argument("--i-max", type=int, default=2)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    rates = [float(r) for r in args.rates.split(",")]
    data = synth_generate(args.n_per_class, seed=3, noise_sigma=0.0)
    data, _ = normalize_dataset(data)
    train_set, test_set = split(data, SplitSpec(0.8, seed=1))

    network = init_params(default_ecgnet_spec(), args.seed)
    result = train(network, train_set,
                   TrainConfig(epochs=args.epochs, batch_size=32, seed=args.seed))

    config = AlqConfig(group_size=16, i_max=args.i_max, prune_rate=0.0,
                       scorer="loss_aware", refine_iters=3, calib_batch=64, seed=11)
    points = sweep(result.network, train_set, test_set, rates, config)

    print(f"{'rate':>6} {'bitwidth':>9} {'loss':>10} {'loss_ref':>10} {'OA%':>7}")
    for p in points:
        print(f"{p.prune_rate:>6.2f} {p.avg_bitwidth:>9.4f} {p.calib_loss:>10.4f} "
              f"{p.calib_loss_refined:>10.4f} {p.test_oa:>7.2f}")
    out = Path(args.out)
    emit_reports(out, sweep_points=points)
    print(f"series written to {out}/sweep.csv")


if __name__ == "__main__":
    main()
