"""Desk-scale module ablation: all four arms over several seeds on one dataset.

    python scripts/ablation_smoke.py --out /tmp/ablation --ids 50 --seeds 0 1 2

Writes ablation.json and ablation.md under --out.
"""

import argparse
from pathlib import Path

import torch

from partalign.cli import ABLATION_ARMS, run_ablation
from partalign.config import RunConfig
from partalign.datagen import generate_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="ablation_smoke")
    p.add_argument("--ids", type=int, default=50)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--arms", nargs="+", default=[a[0] for a in ABLATION_ARMS],
                   choices=[a[0] for a in ABLATION_ARMS])
    args = p.parse_args()
    torch.set_num_threads(1)

    out = Path(args.out)
    records = generate_dataset(out / "data", args.ids, "paper", seed=args.data_seed)
    run = RunConfig.smoke()
    if args.epochs:
        run = run.replace(epochs=args.epochs)
    arms = [a for a in ABLATION_ARMS if a[0] in args.arms]
    run_ablation(run, records, out / "data", args.seeds, out / "runs", arms=arms)
    print((out / "runs" / "ablation.md").read_text(), end="")


if __name__ == "__main__":
    main()
