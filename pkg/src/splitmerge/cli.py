"""Command-line surface: dataset generation, training, evaluation, artifact
inspection. Every command is deterministic given its arguments and seed."""

from __future__ import annotations

import argparse
import json
import sys
from collections import deque
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .adapters import get_adapter
from .checkpoint import load_checkpoint, restore_models, restore_optimizers
from .data import read_dataset, write_dataset
from .report import (episode_csv, human_table, render_episode_figure,
                     render_eval_figure, report_to_csv)
from .tasks import clustering as clus
from .tasks.hull import gen_hull
from .tasks.knapsack import gen_knapsack, knapsack_dp
from .tasks.tsp import gen_tsp
from .training import (TrainState, TrainingConfig, TrainingDiverged,
                       config_to_dict, resolve_config, train_loop)


def _parse_range(text: str):
    if ".." in text:
        lo, hi = text.split("..")
        return int(lo), int(hi)
    v = int(text)
    return v, v


def cmd_datagen(args) -> int:
    rng = np.random.default_rng(args.seed)
    params = {"n": args.n, "count": args.count}
    if args.task == "hull":
        lo, hi = _parse_range(args.n)
        instances = gen_hull((lo, hi), args.count, rng)
    elif args.task == "knapsack":
        lo, hi = _parse_range(args.n)
        if lo != hi:
            raise SystemExit("knapsack datasets use a single n")
        instances = gen_knapsack(lo, args.count, rng)
        for inst in instances:
            value, sel = knapsack_dp(inst)
            inst.oracle = {"opt_value": value, "opt_selection": sel}
    elif args.task == "clustering":
        k = args.k
        n = int(args.n) if args.n.isdigit() else 20 * k   # paper scale: 20 points per cluster
        params.update({"k": k, "d": args.dim, "kind": args.kind, "n": n})
        instances = []
        for _ in range(args.count):
            if args.kind == "patch":
                inst = clus.gen_patch_clusters(k, n, rng)
            else:
                inst = clus.gen_gaussian_clusters(k, args.dim, n, rng)
            inst.meta["lloyd_cost"] = clus.lloyd(inst.points, k, 5, rng)[1]
            pow2 = 2 ** int(np.ceil(np.log2(max(k, 2))))
            inst.meta["rec_lloyd_cost"] = clus.recursive_lloyd(inst.points, pow2, 5, rng)[1]
            instances.append(inst)
    elif args.task == "tsp":
        lo, hi = _parse_range(args.n)
        instances = []
        for _ in range(args.count):
            n = int(rng.integers(lo, hi + 1)) if lo != hi else lo
            instances.extend(gen_tsp(n, 1, rng))
    else:
        raise SystemExit(f"unknown task {args.task!r}")
    path = write_dataset(args.out, args.task, instances, args.seed, params)
    print(f"wrote {len(instances)} {args.task} instances to {path}")
    return 0


def _load_config(args) -> TrainingConfig:
    """Resolve precedence: CLI flags > config file > per-task defaults.

    Config problems are collected and reported all at once.
    """
    raw = {}
    if args.config:
        with open(args.config) as f:
            raw = json.load(f)
    errors = []
    cfg = TrainingConfig(task=args.task or raw.get("task", ""))
    known = set(config_to_dict(cfg))
    for k, v in raw.items():
        if k == "task":
            continue
        if k in known:
            setattr(cfg, k, v)
        else:
            errors.append(f"unknown config key {k!r}")
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.seed is not None:
        cfg.seed = args.seed
    if args.dataset is not None:
        cfg.dataset = args.dataset
    if args.out is not None:
        cfg.out_dir = args.out
    if args.batch_size is not None:
        cfg.batch_size = args.batch_size
    for key, val in (args.set or []):
        if key not in known:
            errors.append(f"unknown config key {key!r}")
            continue
        try:
            setattr(cfg, key, json.loads(val))
        except json.JSONDecodeError:
            setattr(cfg, key, val)
    if not cfg.task:
        errors.append("no task given (config file or --task)")
    if errors:
        raise SystemExit("config errors:\n  " + "\n  ".join(errors))
    return cfg


def _now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if not cfg.dataset:
        raise SystemExit("config errors:\n  no dataset given")
    header, instances = read_dataset(cfg.dataset)
    if header["task"] != cfg.task:
        raise SystemExit(f"dataset task {header['task']!r} != config task {cfg.task!r}")
    cfg = resolve_config(cfg)
    out_dir = Path(cfg.out_dir or "runs/run")
    out_dir.mkdir(parents=True, exist_ok=True)
    adapter = get_adapter(cfg.task)

    models = optimizers = None
    state = None
    if args.resume:
        payload = load_checkpoint(args.resume)
        models = restore_models(payload)
        models.setdefault("merge", None)
        optimizers = restore_optimizers(payload, models)
        state = TrainState(epoch=payload["meta"]["epoch"] + 1,
                           binarize_fine=payload["meta"].get("binarize_fine", False))

    manifest = {
        "command": "train",
        "config": config_to_dict(cfg),
        "seed": cfg.seed,
        "code_version": __version__,
        "started_at": _now(),
        "outputs": [str(out_dir / "metrics.jsonl"), str(out_dir / "last.ckpt.json"),
                    str(out_dir / "best.ckpt.json")],
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    try:
        models, optimizers, state = train_loop(cfg, instances, adapter, out_dir,
                                               models=models, optimizers=optimizers,
                                               state=state)
    except TrainingDiverged as exc:
        print(f"training aborted: {exc} (dump: {exc.dump_path})", file=sys.stderr)
        return 3
    manifest["ended_at"] = _now()
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    missing = [p for p in manifest["outputs"] if not Path(p).exists()]
    if missing:
        print(f"missing outputs: {missing}", file=sys.stderr)
        return 4
    print(f"trained {cfg.task} for {cfg.epochs} epochs -> {out_dir}")
    return 0


def cmd_eval(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    header, instances = read_dataset(args.dataset)
    task = payload["meta"].get("task")
    if task != header["task"]:
        print(f"checkpoint task {task!r} does not match dataset task {header['task']!r}",
              file=sys.stderr)
        return 2
    models = restore_models(payload)
    models.setdefault("merge", None)
    cfg = TrainingConfig(task=task)
    for k, v in payload["meta"].get("config", {}).items():
        if hasattr(cfg, k) and v is not None:
            setattr(cfg, k, v)
    cfg = resolve_config(cfg)
    if args.eps is not None:
        cfg.eps = args.eps
    if args.beam is not None:
        cfg.beam_width = args.beam
    if args.samples is not None:
        cfg.eval_samples = args.samples
    adapter = get_adapter(task)
    collect = deque(maxlen=args.dump) if args.dump else None
    kwargs = {}
    if task == "hull" and args.splits is not None:
        kwargs["depth"] = args.splits
    if task == "knapsack":
        if args.splits is not None:
            kwargs["splits_list"] = [args.splits]
        elif args.splits_list:
            kwargs["splits_list"] = [int(s) for s in args.splits_list.split(",")]
    if task == "tsp" and args.beam is not None:
        kwargs["beam_width"] = args.beam
    report = adapter.evaluate(models, instances, cfg, seed=args.seed,
                              collect=collect, **kwargs)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    json_path = prefix.with_suffix(".json")
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    report_to_csv(report, prefix.with_suffix(".csv"))
    render_eval_figure(report, prefix.with_suffix(".png"))
    if collect:
        (prefix.parent / (prefix.name + "_episodes.json")).write_text(
            json.dumps({"task": task, "episodes": list(collect)}, sort_keys=True))
    print(human_table(report))
    print(f"report -> {json_path}")
    return 0


def cmd_inspect(args) -> int:
    with open(args.input) as f:
        payload = json.load(f)
    prefix = Path(args.out_prefix) if args.out_prefix else Path(args.input).with_suffix("")
    if payload.get("format", "").startswith("splitmerge-checkpoint"):
        print(f"checkpoint: task={payload['meta'].get('task')} "
              f"epoch={payload['meta'].get('epoch')} metric={payload['meta'].get('metric')}")
        for role, block in payload["blocks"].items():
            total = sum(int(np.prod(p["shape"] or [1])) for p in block["params"].values())
            print(f"  {role}: arch={block['arch']} params={total}")
            for name, p in sorted(block["params"].items()):
                print(f"    {name}: {p['shape']}")
        for role, opt in payload.get("optim", {}).items():
            print(f"  optimizer[{role}]: {opt['kind']} rate={opt['base_rate']} "
                  f"epoch={opt['epoch']}")
        return 0
    if "episodes" not in payload:
        print("unrecognized artifact (expected a checkpoint or episode dump)",
              file=sys.stderr)
        return 2
    for ep in payload["episodes"]:
        tree = ep.get("tree")
        if tree is None:
            print(f"episode {ep.get('instance')}: (no tree)")
            continue
        print(f"episode {ep.get('instance')}: n={tree['n']}")
        for v in tree["nodes"]:
            if v["leaf"] and v["probs"] is None:
                print(f"  node ({v['scale']},{v['pos']}): size={len(v['indices'])} leaf")
            elif v["leaf"]:
                print(f"  node ({v['scale']},{v['pos']}): size={len(v['indices'])} "
                      f"leaf (degenerate split)")
            else:
                sizes = [int(np.sum(np.array(v["labels"]) == s)) for s in (0, 1)]
                alpha = max(sizes) / len(v["indices"])
                print(f"  node ({v['scale']},{v['pos']}): size={len(v['indices'])} "
                      f"alpha={alpha:.3f}")
        csvs = episode_csv(ep, prefix.with_suffix(".csv"))
        fig = render_episode_figure(ep, prefix.with_name(prefix.name + "_scales.png"))
        print(f"  wrote {[str(c) for c in csvs]} and {fig}")
        break   # render the first episode; the text dump covers the rest
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitmerge",
                                description="divide-and-conquer networks toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("datagen", help="generate a dataset with oracle solutions")
    d.add_argument("task", choices=["hull", "knapsack", "clustering", "tsp"])
    d.add_argument("--n", default="6..50", help="size or range, e.g. 20 or 6..50")
    d.add_argument("--count", type=int, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.add_argument("--k", type=int, default=4, help="clustering: cluster count")
    d.add_argument("--dim", type=int, default=2, help="clustering: dimension")
    d.add_argument("--kind", choices=["gaussian", "patch"], default="gaussian")
    d.set_defaults(fn=cmd_datagen)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--task")
    t.add_argument("--dataset")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--set", nargs=2, action="append", metavar=("KEY", "JSON"),
                   help="override any config field")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out-prefix", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--splits", type=int, help="force the number of scales/rounds")
    e.add_argument("--splits-list", help="knapsack: comma list of round counts")
    e.add_argument("--beam", type=int, help="tsp: beam width")
    e.add_argument("--eps", type=float)
    e.add_argument("--samples", type=int, help="eval sample count")
    e.add_argument("--dump", type=int, help="dump the first N episodes")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("inspect", help="inspect a checkpoint or episode dump")
    i.add_argument("input")
    i.add_argument("--out-prefix")
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit:
        raise
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
