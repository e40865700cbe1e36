#!/usr/bin/env python3
"""Desk-scale end-to-end run: synthesize data, train, quantize, evaluate.

Writes the trained checkpoint, the quantized container, metrics/confusion
reports for both models, and the per-layer memory table into --out.
"""

import argparse
import time
from pathlib import Path

from alqecg import bitpack
from alqecg.data import SplitSpec, normalize_dataset, split, synth_generate
from alqecg.metrics import emit_reports, evaluate
from alqecg.net import TrainConfig, default_ecgnet_spec, init_params, save_checkpoint, train
from alqecg.quantizer import AlqConfig, alq_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out/desk_scale")
    ap.add_argument("--n-per-class", type=int, default=40)
    ap.add_argument("--noise-sigma", type=float, default=0.0)
    ap.add_argument("--epochs", type=int, default=25)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--i-max", type=int, default=3)
    ap.add_argument("--target-bitwidth", type=float, default=2.0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    data = synth_generate(args.n_per_class, seed=3, noise_sigma=args.noise_sigma)
    data, _ = normalize_dataset(data)
    train_set, test_set = split(data, SplitSpec(0.8, seed=1))
    print(f"dataset: {len(train_set)} train / {len(test_set)} test records")

    t0 = time.time()
    network = init_params(default_ecgnet_spec(), args.seed)
    result = train(network, train_set,
                   TrainConfig(epochs=args.epochs, batch_size=32, seed=args.seed))
    print(f"trained {args.epochs} epochs in {time.time() - t0:.1f}s, "
          f"final loss {result.epoch_losses[-1]:.5f}")
    save_checkpoint(result.network, out / "model.alqf")

    _, full_rep = evaluate(result.network, test_set)
    print(f"full precision: OA {full_rep.oa:.2f}%  Sen {full_rep.sen:.2f}%  "
          f"Spe {full_rep.spe:.2f}%")

    config = AlqConfig(group_size=16, i_max=args.i_max,
                       target_avg_bitwidth=args.target_bitwidth,
                       scorer="loss_aware", refine_iters=3, calib_batch=64, seed=11)
    t0 = time.time()
    model, report = alq_pipeline(result.network, train_set, config)
    print(f"quantized in {time.time() - t0:.1f}s: avg bitwidth "
          f"{report.avg_bitwidth_init:.4f} -> {report.avg_bitwidth_final:.4f}, "
          f"{report.pruned_coords} coordinates pruned")
    bitpack.serialize(model, out / "model.alqq")

    cm, quant_rep = evaluate(model, test_set)
    mem = bitpack.memory_report(model)
    print(f"quantized:      OA {quant_rep.oa:.2f}%  Sen {quant_rep.sen:.2f}%  "
          f"Spe {quant_rep.spe:.2f}%")
    print()
    print(mem.format_table())
    emit_reports(out, quant_rep, cm, mem)
    print(f"reports written to {out}/")


if __name__ == "__main__":
    main()
