"""Run each ablation knob through search, selection and final training on one seed.

    python3 scripts/ablations.py --seed 0 --epochs 10 --out runs/ablations
"""

import argparse
import json
import time
from pathlib import Path

from partsup.cli import load_dataset, task_data
from partsup.config import parse_config
from partsup.search import run_pipeline

ABLATIONS = {
    "full": [],
    "no_gap": ["search.reward_mode=val"],
    "no_cross_val": ["search.single_split=true"],
    "less_operants": ["grammar.operants=base"],
    "less_unary": ['grammar.unary=["identity","square","double","neg"]'],
    "less_binary": ['grammar.binary=["add","minus","mul"]'],
    "height_2": ["grammar.max_height=2"],
    "top1": ["selection.strategy=topk:1"],
    "top2": ["selection.strategy=topk:2"],
    "top3": ["selection.strategy=topk:3"],
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--only", nargs="*", help="subset of ablation names")
    ap.add_argument("--set", action="append", default=[], help="extra key=value config overrides")
    ap.add_argument("--out", default="runs/ablations")
    args = ap.parse_args()
    names = args.only or list(ABLATIONS)
    results = {}
    for name in names:
        cfg = parse_config(None, ABLATIONS[name] + args.set + [f"seed={args.seed}", f"search.epochs={args.epochs}"])
        t0 = time.time()
        data = task_data(cfg, load_dataset(cfg, None))
        out_dir = Path(args.out) / name
        res = run_pipeline(data, cfg.grammar_config(), cfg.search_config(), cfg.train_config(), args.seed, out_dir)
        (out_dir / "config.resolved").write_text(cfg.to_json() + "\n")
        results[name] = {"digest": cfg.digest(), "ood": res["supervised"]["out_of_dist"],
                         "baseline_ood": res["baseline"]["out_of_dist"], "trees": res["selected"]}
        print(f"{name:<14} digest {cfg.digest()} ood {res['supervised']['out_of_dist']:.4f} "
              f"(baseline {res['baseline']['out_of_dist']:.4f}) {time.time() - t0:.0f}s", flush=True)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "summary.json").write_text(json.dumps(results, indent=2) + "\n")


if __name__ == "__main__":
    main()
