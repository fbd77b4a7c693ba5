"""Memorize four synthetic samples and report the loss drop and Rank-1.

    python scripts/overfit_demo.py --out /tmp/overfit --steps 300
"""

import argparse
import json
from pathlib import Path

import torch

from partalign.config import RunConfig
from partalign.datagen import generate_dataset
from partalign.training import evaluate, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="overfit_demo")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    torch.set_num_threads(1)

    out = Path(args.out)
    records = generate_dataset(out / "data", num_ids=6, images_per_id=1, seed=args.seed)
    run = RunConfig.smoke(seed=args.seed)
    result = train(run, records, out / "data", out_dir=out / "run", overfit_steps=args.steps)
    report = evaluate(result.model, records, out / "data", run.config_hash(), split="train")
    first, last = result.trace[0]["total"], result.trace[-1]["total"]
    print(json.dumps({"initial_total": first, "final_total": last, "ratio": last / first,
                      "rank1_on_batch": report["rank1"]}, indent=2))


if __name__ == "__main__":
    main()
