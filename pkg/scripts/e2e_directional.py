"""Full pipeline (search, greedy selection, final training) vs the unsupervised baseline.

Runs paired seeds on the default primitive task with the last domain held
out and prints per-seed held-out MIoU for both arms.

    python3 scripts/e2e_directional.py --seeds 0 1 2 3 4 --out runs/e2e
"""

import argparse
import json
import time
from pathlib import Path

from partsup import synthgen
from partsup.config import parse_config
from partsup.evaluator import TaskData
from partsup.search import run_pipeline


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="runs/e2e")
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()
    rows = []
    for seed in args.seeds:
        cfg = parse_config(None, args.set + [f"seed={seed}"])
        t0 = time.time()
        ds = synthgen.gen_primitive_dataset(cfg.domain_specs(), seed)
        data = TaskData(ds, cfg["grammar.radius"], cfg["grammar.n_samples"], cfg["evaluator.knn"], seed)
        out_dir = Path(args.out) / f"seed_{seed}"
        res = run_pipeline(data, cfg.grammar_config(), cfg.search_config(), cfg.train_config(), seed, out_dir)
        rows.append(res)
        print(f"seed {seed}: base {res['baseline']['out_of_dist']:.4f} sup {res['supervised']['out_of_dist']:.4f} "
              f"delta {res['delta_ood']:+.4f} trees {res['selected']} ({time.time() - t0:.0f}s)", flush=True)
    deltas = [r["delta_ood"] for r in rows]
    wins = sum(d >= 0 for d in deltas)
    print(f"wins {wins}/{len(deltas)} mean delta {sum(deltas) / len(deltas):+.4f}")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "summary.json").write_text(json.dumps({"deltas": deltas, "wins": wins}, indent=2) + "\n")


if __name__ == "__main__":
    main()
