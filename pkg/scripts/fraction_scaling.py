#!/usr/bin/env python3
"""Accuracy vs training-set fraction on the synthetic target task.

LoRA fine-tuning on per-class proportional subsets of the target train
split (nested as the fraction grows), emitting a Fig-3-style series.

    python scripts/fraction_scaling.py --out runs/scaling
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from peftlab.data import SynthSpec, synth_generate
from peftlab.lora import LoraConfig
from peftlab.report import render_series
from peftlab.train import (
    TrainConfig,
    aggregate,
    append_results,
    format_mean_std,
    pretrain_backbone,
    read_results,
    result_rows,
    run_fraction_scaling,
)
from peftlab.vit import PRESETS


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--fractions", default="0.05,0.1,0.25,0.5,0.7,1.0")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--pretrain-steps", type=int, default=400)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fractions = [float(f) for f in args.fractions.split(",")]

    spec = SynthSpec()
    source = synth_generate(spec, "source", out / "data" / "source")
    target = synth_generate(spec, "target", out / "data" / "target")
    ckpt = out / "backbone.peft"
    pre = pretrain_backbone(PRESETS["tiny"], source, steps=args.pretrain_steps, seed=0, out_path=ckpt)
    print(f"source test top-1: {pre.test_top1 * 100:.2f}%")

    cfg = TrainConfig(
        mode="lora", lr_grid=(1e-3, 1e-2), seeds=tuple(int(s) for s in args.seeds.split(",")),
        epochs=args.epochs, lora=LoraConfig(rank=2, targets=("query", "value")),
    )
    results_csv = out / "results.csv"
    for res in run_fraction_scaling(ckpt, target, fractions, cfg):
        append_results(results_csv, result_rows(res))
        agg = aggregate(res.test_accs())
        print(f"fraction {res.k_or_fraction:>5s}: {format_mean_std(agg, percent=True)} (lr {res.chosen_lr:g})")

    series = render_series(read_results(results_csv), mode="lora")
    (out / "series.csv").write_text(series)
    print("\n" + series)
    return 0


if __name__ == "__main__":
    sys.exit(main())
