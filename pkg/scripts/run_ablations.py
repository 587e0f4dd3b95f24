"""Five-seed CPT and distillation-loss ablations on the synthetic corpus.

Usage: python scripts/run_ablations.py [--seeds 0 1 2 3 4] [--out ablations.json]
"""

import argparse
import json
import math

from disrank import numerics
from disrank.experiments import ExperimentConfig, cpt_ablation, distill_ablation, mean_metric


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="ablations.json")
    args = ap.parse_args()
    numerics.tune_allocator()
    cfg = ExperimentConfig(seeds=tuple(args.seeds))

    teach = cpt_ablation(cfg)
    print(f"cpt ablation: {teach['seconds']:.0f}s", flush=True)
    for v in ("sft_only", "cpt_sft"):
        print(f"  {v:10s} pnr={mean_metric(teach['results'], v):.4f} ndcg@5={mean_metric(teach['results'], v, 'ndcg@5'):.4f}", flush=True)

    kd = distill_ablation(cfg, teach["teachers"])
    print(f"distill ablation: {kd['seconds']:.0f}s", flush=True)
    for v in ("untrained", "point", "margin", "hybrid"):
        print(f"  {v:10s} pnr={mean_metric(kd['results'], v):.4f} ndcg@5={mean_metric(kd['results'], v, 'ndcg@5'):.4f}", flush=True)

    def clean(x):
        if isinstance(x, dict):
            return {str(k): clean(v) for k, v in x.items()}
        return str(x) if isinstance(x, float) and not math.isfinite(x) else x

    with open(args.out, "w") as fh:
        json.dump(clean({"teacher": teach["results"], "student": kd["results"],
                         "seconds": {"cpt": teach["seconds"], "distill": kd["seconds"]}}), fh, indent=2)


if __name__ == "__main__":
    main()
