"""Command-line entry point: ``fishermerge <command> [options]``.

Relative ``--out``/``--out-dir`` paths are resolved against
``$FISHERMERGE_OUT_DIR`` when that variable is set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from typing import List, Optional

import numpy as np

from . import container
from .config import ExperimentConfig
from .fisher import (
    FULL_KIND,
    MASK_KIND,
    FullFisher,
    MaskFisher,
    count_gradient_params,
    estimate_full_fisher,
    estimate_mask_fisher,
    load_fisher,
)
from .harness import (
    EvalReport,
    evaluate,
    finetune,
    format_table,
    pretrain_parent,
    run_pairwise_protocol,
)
from .merge import MappingFlags, MergeSpec, assign_weights, full_fisher_merge, merge, simple_average
from .model import Checkpoint, init_checkpoint, predict
from .tasks import Dataset, generate, read_jsonl

OUT_DIR_ENV = "FISHERMERGE_OUT_DIR"
REFERENCE_SPEEDUP = 57.4  # BERT-Large, reported figure; not a target here


class CommandError(Exception):
    pass


def _out_path(path: str) -> str:
    base = os.environ.get(OUT_DIR_ENV)
    if base and not os.path.isabs(path):
        path = os.path.join(base, path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return path


def _guard(path: str, force: bool) -> str:
    path = _out_path(path)
    if os.path.exists(path) and not force:
        raise CommandError(f"{path} exists; pass --force to overwrite")
    return path


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


def _save_checkpoint(ckpt: Checkpoint, path: str, force: bool) -> str:
    ckpt.save(path, force=force)
    if Checkpoint.load(path).digest() != ckpt.digest():
        raise CommandError(f"self-validation of {path} failed")
    return ckpt.digest()


def _find_task(cfg: ExperimentConfig, task_id: str, seed: int):
    tasks = cfg.build_tasks(seed)
    for t in tasks:
        if t.task_id == task_id:
            return tasks, t
    raise CommandError(f"unknown task {task_id!r}; config defines {[t.task_id for t in tasks]}")


def cmd_pretrain(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    out = _guard(args.out, args.force)
    tasks = cfg.build_tasks(args.seed)
    parent = pretrain_parent(cfg.model_config(tasks), tasks, args.seed, cfg.training)
    digest = _save_checkpoint(parent, out, args.force)
    _emit(args, {"out": out, "digest": digest}, f"wrote parent {out} ({digest[:12]})")
    return 0


def cmd_finetune(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    out = _guard(args.out, args.force)
    parent = Checkpoint.load(args.parent)
    _, task = _find_task(cfg, args.task, args.seed)
    steps = cfg.training.finetune_steps if args.steps is None else args.steps
    child = finetune(parent, task, steps, args.seed, cfg.training)
    digest = _save_checkpoint(child, out, args.force)
    acc = evaluate(child, task, eval_size=cfg.training.eval_size)
    _emit(args, {"out": out, "digest": digest, "task": task.task_id, "accuracy": acc},
          f"wrote {out} ({digest[:12]}), accuracy on {task.task_id}: {acc:.4f}")
    return 0


def cmd_data(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    out = _guard(args.out, args.force)
    _, task = _find_task(cfg, args.task, args.seed)
    data = generate(task, args.split, args.n)
    data.to_jsonl(out)
    _emit(args, {"out": out, "n": len(data), "task": task.task_id}, f"wrote {len(data)} examples to {out}")
    return 0


def cmd_fisher(args) -> int:
    out = _guard(args.out, args.force)
    ckpt = Checkpoint.load(args.ckpt)
    data = read_jsonl(args.data)
    if args.method == "mask":
        result = estimate_mask_fisher(ckpt, data, args.n, batch_size=args.batch_size, threads=args.threads)
    else:
        result = estimate_full_fisher(ckpt, data, args.n, threads=args.threads)
    result.save(out, force=args.force)
    back = load_fisher(out)
    if back.digest != ckpt.digest() or back.n_entries() != result.n_entries():
        raise CommandError(f"self-validation of {out} failed")
    payload = {"out": out, "method": args.method, "n_samples": result.n_samples, "task_id": result.task_id,
               "n_values": result.n_entries(), "checkpoint_digest": result.digest}
    _emit(args, payload, f"wrote {args.method} Fisher ({result.n_entries()} values, n={result.n_samples}) to {out}")
    return 0


def cmd_merge(args) -> int:
    out = _guard(args.out, args.force)
    ckpts = [Checkpoint.load(p) for p in args.ckpts]
    spec = MergeSpec(lambdas=args.lambdas, zero_denominator=args.zero_policy, epsilon=args.epsilon)
    if args.method == "average":
        merged = simple_average(ckpts)
    else:
        if not args.fishers:
            raise CommandError(f"--fishers is required for --method {args.method}")
        if len(args.fishers) != len(ckpts):
            raise CommandError(f"{len(args.fishers)} Fisher files for {len(ckpts)} checkpoints")
        want = MASK_KIND if args.method == "mask-fisher" else FULL_KIND
        for p in args.fishers:
            kind, _, _ = container.read(p)
            if kind != want:
                raise CommandError(f"{p} holds {kind!r}, --method {args.method} needs {want!r}")
        fishers = [load_fisher(p) for p in args.fishers]
        if args.method == "mask-fisher":
            flags = MappingFlags(qk_bias=not args.no_qk_bias, value=args.include_value,
                                 out_columns=args.include_out_columns, mlp2_columns=args.include_mlp2_columns)
            for c, f in zip(ckpts, fishers):
                if f.digest != c.digest():
                    raise CommandError("Fisher file digest does not match its checkpoint")
            merged = merge(ckpts, [assign_weights(c.config, f, flags) for c, f in zip(ckpts, fishers)], spec)
        else:
            merged = full_fisher_merge(ckpts, fishers, spec)
    digest = _save_checkpoint(merged, out, args.force)
    prov = merged.meta["provenance"]
    _emit(args, {"out": out, "digest": digest, "provenance": prov}, f"wrote {prov['method']} merge {out} ({digest[:12]})")
    return 0


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    if args.data:
        data = Dataset.from_examples(read_jsonl(args.data))
        head = args.head or data.task_id
        acc = float(np.mean(predict(ckpt, data.tokens, head) == data.labels))
        task_id = data.task_id
    else:
        if not (args.config and args.task):
            raise CommandError("eval needs --data, or --config with --task")
        cfg = ExperimentConfig.load(args.config)
        _, task = _find_task(cfg, args.task, args.seed)
        head = args.head or task.task_id
        acc = evaluate(ckpt, task, head, eval_size=cfg.training.eval_size)
        task_id = task.task_id
    _emit(args, {"task": task_id, "head": head, "accuracy": acc}, f"{task_id} (head {head}): accuracy {acc:.4f}")
    return 0


def run_protocol(cfg: ExperimentConfig, seeds: List[int]) -> List[EvalReport]:
    reports = []
    for seed in seeds:
        tasks = cfg.build_tasks(seed)
        parent = pretrain_parent(cfg.model_config(tasks), tasks, seed, cfg.training)
        reports.append(run_pairwise_protocol(parent, tasks, cfg.methods, cfg.n_samples, cfg.training, seed=seed,
                                             fisher_batch_size=cfg.fisher_batch_size))
    return reports


def cmd_protocol(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    seeds = args.seeds or cfg.seeds
    out_dir = _out_path(args.out_dir)
    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, "report.json")
    table_path = os.path.join(out_dir, "table.txt")
    for p in (report_path, table_path):
        if os.path.exists(p) and not args.force:
            raise CommandError(f"{p} exists; pass --force to overwrite")
    reports = run_protocol(cfg, seeds)
    payload = {"config": cfg.to_dict(), "reports": [r.to_dict() for r in reports]}
    with open(report_path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    table = format_table(reports)
    with open(table_path, "w", encoding="utf-8") as f:
        f.write(table + "\n")
    with open(report_path, encoding="utf-8") as f:
        json.load(f)
    _emit(args, {"report": report_path, "table": table_path, "aggregate": [r.aggregate() for r in reports]}, table)
    return 0


def bench(cfg: ExperimentConfig, n: int, seed: int = 0, repeats: int = 1, mask_batch_size: int = 1) -> dict:
    """Time both Fisher estimators on the same n examples; model setup and data generation are untimed."""
    tasks = cfg.build_tasks(seed)
    config = cfg.model_config(tasks)
    ckpt = init_checkpoint(config, np.random.default_rng([seed, 0]))
    data = list(generate(tasks[0], "train", n))
    mask_t, full_t = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        estimate_mask_fisher(ckpt, data, n, batch_size=mask_batch_size)
        mask_t.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        estimate_full_fisher(ckpt, data, n)
        full_t.append(time.perf_counter() - t0)
    n_mask = count_gradient_params(config, "mask")
    n_full = count_gradient_params(config, "full")
    mask_s, full_s = float(np.mean(mask_t)), float(np.mean(full_t))
    return {
        "n_samples": n,
        "repeats": repeats,
        "mask_batch_size": mask_batch_size,
        "mask_seconds": mask_s,
        "full_seconds": full_s,
        "speedup": full_s / mask_s,
        "mask_gradient_params": n_mask,
        "full_gradient_params": n_full,
        "param_count_ratio": n_full / n_mask,
        "reference_speedup_bert_large": REFERENCE_SPEEDUP,
    }


def cmd_bench(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    r = bench(cfg, args.n, args.seed, args.repeats, args.mask_batch_size)
    text = (
        f"n={r['n_samples']}  mask {r['mask_seconds']:.4f}s  full {r['full_seconds']:.4f}s  speedup {r['speedup']:.2f}x\n"
        f"gradient params: mask {r['mask_gradient_params']}  full {r['full_gradient_params']}  "
        f"ratio {r['param_count_ratio']:.2f}\n"
        f"reference: {r['reference_speedup_bert_large']}x reported for BERT-Large (not comparable at this scale)"
    )
    _emit(args, r, text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed threaded to every module")
    common.add_argument("--json", action="store_true", help="print a JSON summary to stdout")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--threads", type=int, default=1, help="cap on worker threads for gradient computation")

    parser = argparse.ArgumentParser(prog="fishermerge", description="Mask-node Fisher merging of transformer encoders.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="train the shared parent")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune a child on one task")
    p.add_argument("--config", required=True)
    p.add_argument("--parent", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("data", parents=[common], help="write a task split as JSONL")
    p.add_argument("--config", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--split", choices=["train", "eval"], default="train")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_data)

    p = sub.add_parser("fisher", parents=[common], help="estimate diagonal Fisher information")
    p.add_argument("--method", choices=["mask", "full"], required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=1, help="examples per backward pass (mask method)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fisher)

    p = sub.add_parser("merge", parents=[common], help="merge sibling checkpoints")
    p.add_argument("--method", choices=["mask-fisher", "full-fisher", "average"], required=True)
    p.add_argument("--ckpts", nargs="+", required=True)
    p.add_argument("--fishers", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--lambdas", nargs="+", type=float)
    p.add_argument("--zero-policy", choices=["fallback", "epsilon"], default="fallback")
    p.add_argument("--epsilon", type=float, default=1e-12)
    p.add_argument("--no-qk-bias", action="store_true", help="leave q/k biases at weight 1")
    p.add_argument("--include-value", action="store_true")
    p.add_argument("--include-out-columns", action="store_true")
    p.add_argument("--include-mlp2-columns", action="store_true")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint on a task")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--task")
    p.add_argument("--data")
    p.add_argument("--head")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("protocol", parents=[common], help="run the pairwise merge protocol")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", nargs="+", type=int)
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("bench", parents=[common], help="time mask vs full Fisher estimation")
    p.add_argument("--config")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--mask-batch-size", type=int, default=1)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "merge" and args.method != "average" and not args.fishers:
        parser.error(f"--fishers is required for --method {args.method}")
    try:
        return args.func(args)
    except (CommandError, ValueError, KeyError, FileExistsError, FileNotFoundError, FloatingPointError) as exc:
        print(f"fishermerge {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
