"""Command line entry point: ``partalign generate|train|eval|ablate``.

Relative output paths are resolved against ``$PARTALIGN_OUTPUT_ROOT`` when it
is set. Every report carries the config hash of the run that produced it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_config
from .datagen import ManifestError, generate_dataset, read_manifest
from .losses import NonFiniteLossError
from .training import evaluate, load_checkpoint, overfit_subset, train

log = logging.getLogger("partalign")

OUTPUT_ROOT_ENV = "PARTALIGN_OUTPUT_ROOT"

# Row order of the module ablation table: (name, use_plfa, use_bmria, augment).
ABLATION_ARMS = (
    ("baseline", False, False, False),
    ("+PLFA", True, False, False),
    ("+PLFA+BMRIA", True, True, False),
    ("+PLFA+BMRIA+Aug", True, True, True),
)


class CLIError(Exception):
    pass


def resolve_output(path: str | Path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Run-config flags


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run config (override the preset or --config file)")
    g.add_argument("--config", help="JSON run config or bare model config")
    g.add_argument("--preset", choices=("smoke", "paper"), default=None,
                   help="smoke: desk-scale defaults (used when nothing else is given); "
                        "paper: the reference training setup")
    g.add_argument("--seed", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--warmup-epochs", type=int)
    g.add_argument("--base-lr", type=float)
    g.add_argument("--module-lr", type=float)
    g.add_argument("--warmup-start-lr", type=float)
    g.add_argument("--ids-per-batch", type=int)
    g.add_argument("--instances-per-id", type=int)
    g.add_argument("--augment", action="store_true", default=None)
    g.add_argument("--no-plfa", dest="use_plfa", action="store_false", default=None)
    g.add_argument("--no-bmria", dest="use_bmria", action="store_false", default=None)
    g.add_argument("--mim-mask-source", choices=("ratio", "part"))


_RUN_FLAGS = ("seed", "epochs", "warmup_epochs", "base_lr", "module_lr", "warmup_start_lr",
              "ids_per_batch", "instances_per_id", "augment")
_MODEL_FLAGS = ("use_plfa", "use_bmria", "mim_mask_source")


def _config_flags_given(args) -> bool:
    return (args.config is not None or args.preset is not None
            or any(getattr(args, k) is not None for k in _RUN_FLAGS + _MODEL_FLAGS))


def build_run_config(args) -> RunConfig:
    if args.config and args.preset:
        raise CLIError("give either --config or --preset, not both")
    if args.config:
        run = load_config(args.config)
    elif args.preset == "paper":
        run = RunConfig()
    else:
        run = RunConfig.smoke()
    run = run.replace(**{k: getattr(args, k) for k in _RUN_FLAGS if getattr(args, k) is not None})
    model = {k: getattr(args, k) for k in _MODEL_FLAGS if getattr(args, k) is not None}
    if model:
        run = run.replace(model=run.model.__class__(**{**run.model.to_dict(), **model}))
    return run


def _manifest(args) -> tuple[list, Path]:
    path = Path(args.manifest)
    return read_manifest(path), path.parent


# ---------------------------------------------------------------------------
# Subcommands


def cmd_generate(args) -> int:
    if args.ids < 2:
        raise CLIError("--ids must be at least 2 (contrastive batches need two identities)")
    images_per_id = args.images_per_id if args.images_per_id == "paper" else int(args.images_per_id)
    out = resolve_output(args.out)
    records = generate_dataset(out, args.ids, images_per_id, seed=args.seed,
                               render_size=args.render_size)
    n_train = sum(r.split == "train" for r in records)
    print(f"wrote {len(records)} records ({n_train} train) to {out / 'manifest.jsonl'}")
    return 0


def cmd_train(args) -> int:
    run = build_run_config(args)
    records, root = _manifest(args)
    out = resolve_output(args.out)
    run = run.replace(manifest=str(args.manifest), output_dir=str(out))
    if args.overfit_one_batch:
        records = overfit_subset(records, args.overfit_samples)
    t0 = time.time()
    result = train(run, records, root, out_dir=out, resume=args.resume,
                   overfit_steps=args.steps if args.overfit_one_batch else None,
                   on_step=_progress(args.log_every))
    first, last = result.trace[0]["total"], result.trace[-1]["total"]
    summary = {"config_hash": run.config_hash(), "steps": len(result.trace),
               "initial_total": first, "final_total": last, "seconds": time.time() - t0,
               "checkpoint": str(result.checkpoint)}
    if args.overfit_one_batch:
        summary["eval_on_batch"] = evaluate(result.model, records, root, run.config_hash(),
                                            split="train")
    _write_json(out / "train_summary.json", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _progress(every: int):
    def report(record):
        if every and record["step"] % every == 0:
            log.info("step %d epoch %d total %.4f (id %.3f sdm %.3f itc %.3f biirr %.3f)",
                     record["step"], record["epoch"], record["total"], record["id"],
                     record["sdm"], record["itc"], record["biirr"])
    return report


def cmd_eval(args) -> int:
    model, state = load_checkpoint(args.checkpoint)
    stored = state["run"]
    if _config_flags_given(args):
        wanted = build_run_config(args)
        if wanted.config_hash() != state["config_hash"]:
            msg = (f"config hash {wanted.config_hash()} does not match checkpoint "
                   f"{state['config_hash']}")
            if not args.force:
                raise CLIError(msg + " (use --force to evaluate anyway)")
            log.warning("%s; continuing because of --force", msg)
    records, root = _manifest(args)
    report = evaluate(model, records, root, state["config_hash"], split=args.split)
    report.update(checkpoint=str(args.checkpoint), split=args.split, epoch=state["epoch"],
                  run_config=stored.to_dict())
    out = resolve_output(args.report) if args.report else Path(args.checkpoint).parent / "metrics.json"
    _write_json(out, report)
    print(json.dumps({k: report[k] for k in ("rank1", "rank5", "rank10", "map", "config_hash")},
                     indent=2))
    return 0


def run_ablation(run: RunConfig, records, root, seeds: Sequence[int], out: Path,
                 arms=ABLATION_ARMS) -> dict:
    rows = []
    for name, plfa, bmria, aug in arms:
        per_seed = []
        for seed in seeds:
            model = run.model.__class__(**{**run.model.to_dict(), "use_plfa": plfa,
                                           "use_bmria": bmria})
            arm_run = run.replace(model=model, augment=aug, seed=seed)
            arm_dir = out / name.replace("+", "plus_") / f"seed{seed}"
            t0 = time.time()
            result = train(arm_run, records, root, out_dir=arm_dir)
            report = evaluate(result.model, records, root, arm_run.config_hash())
            report["seconds"] = time.time() - t0
            report["seed"] = seed
            report["final_losses"] = {k: result.trace[-1][k]
                                      for k in ("id", "sdm", "itc", "biirr", "total")}
            _write_json(arm_dir / "metrics.json", report)
            per_seed.append(report)
            log.info("%s seed %d: rank1 %.3f map %.3f", name, seed, report["rank1"], report["map"])
        mean = {k: float(np.mean([r[k] for r in per_seed])) for k in ("rank1", "rank5", "rank10", "map")}
        rows.append({"arm": name, "plfa": plfa, "bmria": bmria, "augment": aug,
                     "config_hashes": [r["config_hash"] for r in per_seed],
                     "runs": per_seed, **mean})
    doc = {"seeds": list(seeds), "arms": rows}
    _write_json(out / "ablation.json", doc)
    (out / "ablation.md").write_text(ablation_table(rows))
    return doc


def ablation_table(rows) -> str:
    tick = lambda b: "x" if b else ""
    lines = ["| PLFA | BMRIA | Data Aug. | Rank-1 | Rank-5 | Rank-10 | mAP |",
             "|:---:|:---:|:---:|---:|---:|---:|---:|"]
    for r in rows:
        lines.append(f"| {tick(r['plfa'])} | {tick(r['bmria'])} | {tick(r['augment'])} | "
                     f"{100 * r['rank1']:.1f} | {100 * r['rank5']:.1f} | "
                     f"{100 * r['rank10']:.1f} | {100 * r['map']:.1f} |")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    run = build_run_config(args)
    records, root = _manifest(args)
    out = resolve_output(args.out)
    doc = run_ablation(run, records, root, args.seeds, out)
    print((out / "ablation.md").read_text(), end="")
    print(f"report: {out / 'ablation.json'}")
    return 0 if doc else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partalign",
                                     description="Part-aware text-to-image vehicle retrieval")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic part-annotated dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--ids", type=int, default=50)
    p.add_argument("--images-per-id", default="paper",
                   help="an integer, or 'paper' for the 2-5 per identity distribution")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--render-size", type=int, default=96)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on a manifest's train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--overfit-one-batch", action="store_true",
                   help="repeat one fixed batch of --overfit-samples train records")
    p.add_argument("--overfit-samples", type=int, default=4)
    p.add_argument("--steps", type=int, default=300, help="steps for --overfit-one-batch")
    p.add_argument("--log-every", type=int, default=10)
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="text-to-image retrieval metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--report", help="where to write the JSON report")
    p.add_argument("--force", action="store_true", help="ignore a config hash mismatch")
    _add_run_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="baseline / +PLFA / +BMRIA / +augmentation arms")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    _add_run_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(int(os.environ.get("PARTALIGN_THREADS", "1")))
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: training aborted, non-finite {exc.component} loss ({exc.value})",
              file=sys.stderr)
        return 3
    except (CLIError, ConfigError, ManifestError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
