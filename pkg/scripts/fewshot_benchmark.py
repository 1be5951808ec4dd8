#!/usr/bin/env python3
"""End-to-end few-shot benchmark on the synthetic transfer task.

Generates the source/target datasets, pretrains the tiny backbone on the
source task, then compares linear-probe and LoRA fine-tuning on the
target task across shot counts, averaging over seeds. Emits the results
CSV, a table, and a Fig-2-style accuracy series.

    python scripts/fewshot_benchmark.py --out runs/fewshot
    python scripts/fewshot_benchmark.py --out runs/quick --shots 4,16 --quick
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from peftlab.data import SynthSpec, load_manifest, synth_generate
from peftlab.lora import LoraConfig
from peftlab.report import render_series, render_table
from peftlab.train import (
    TrainConfig,
    aggregate,
    append_results,
    format_mean_std,
    pretrain_backbone,
    result_rows,
    run_experiment,
)
from peftlab.vit import PRESETS


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--shots", default="1,2,4,8,16,50")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--pretrain-steps", type=int, default=400)
    ap.add_argument("--rank", type=int, default=2)
    ap.add_argument("--targets", default="q,v")
    ap.add_argument("--quick", action="store_true", help="short budgets for a fast pass")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shots = [int(s) for s in args.shots.split(",")]
    seeds = tuple(int(s) for s in args.seeds.split(","))

    spec = SynthSpec()
    print("generating synthetic source/target datasets ...")
    source = synth_generate(spec, "source", out / "data" / "source")
    target = synth_generate(spec, "target", out / "data" / "target")

    ckpt = out / "backbone.peft"
    print(f"pretraining tiny backbone ({args.pretrain_steps} steps) ...")
    pre = pretrain_backbone(PRESETS["tiny"], source, steps=args.pretrain_steps, seed=0, out_path=ckpt)
    print(f"  source test top-1: {pre.test_top1 * 100:.2f}%")

    lr_grid = (1e-3, 1e-2)
    max_steps = 300 if args.quick else None
    results_csv = out / "results.csv"
    for k in shots:
        for mode in ("linear_probe", "lora"):
            cfg = TrainConfig(
                mode=mode, lr_grid=lr_grid, seeds=seeds, max_steps=max_steps,
                lora=LoraConfig(rank=args.rank, targets=args.targets) if mode == "lora" else None,
            )
            res = run_experiment(ckpt, target, cfg, k=k)
            append_results(results_csv, result_rows(res))
            agg = aggregate(res.test_accs())
            print(f"  {mode:13s} k={k:2d}: {format_mean_std(agg, percent=True)} (lr {res.chosen_lr:g})")

    rows = __import__("peftlab.train", fromlist=["read_results"]).read_results(results_csv)
    (out / "table.txt").write_text(render_table(rows))
    probe_baseline = aggregate([r.test_top1 for r in rows if r.mode == "linear_probe"]).mean * 100
    (out / "series_lora.csv").write_text(
        render_series(rows, mode="lora", baseline=probe_baseline)
    )
    print(f"\nwrote {results_csv}, table.txt, series_lora.csv")
    print(render_table(rows))
    return 0


if __name__ == "__main__":
    sys.exit(main())
