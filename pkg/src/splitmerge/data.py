"""JSON-lines dataset files: one header record then one record per instance,
with oracle solutions embedded at generation time."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tasks.clustering import ClusterInstance
from .tasks.hull import HullInstance
from .tasks.knapsack import KnapsackInstance
from .tasks.tsp import TspInstance

__all__ = ["write_dataset", "read_dataset", "GENERATOR_VERSION"]

GENERATOR_VERSION = 1


def _round_floats(obj):
    if isinstance(obj, float):
        return obj
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _round_floats(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return [_round_floats(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    return obj


def _instance_record(task: str, inst) -> dict:
    if task == "hull":
        return {"points": inst.points, "hull": inst.hull}
    if task == "knapsack":
        rec = {"values": inst.values, "weights": inst.weights, "capacity": inst.capacity}
        rec.update(inst.__dict__.get("oracle", {}))
        return rec
    if task == "clustering":
        rec = {"points": inst.points, "k": inst.k}
        for key in ("lloyd_cost", "rec_lloyd_cost"):
            if key in inst.meta:
                rec[key] = inst.meta[key]
        if inst.meta.get("kind"):
            rec["kind"] = inst.meta["kind"]
        return rec
    if task == "tsp":
        return {"points": inst.points, "tour": inst.tour,
                "tour_length": inst.tour_length, "exact": inst.exact}
    raise ValueError(f"unknown task {task!r}")


def _instance_from_record(task: str, rec: dict):
    if task == "hull":
        return HullInstance(points=np.array(rec["points"]), hull=list(rec["hull"]))
    if task == "knapsack":
        inst = KnapsackInstance(values=rec["values"], weights=rec["weights"],
                                capacity=rec["capacity"])
        inst.oracle = {k: rec[k] for k in ("opt_value", "opt_selection") if k in rec}
        return inst
    if task == "clustering":
        meta = {k: rec[k] for k in ("lloyd_cost", "rec_lloyd_cost") if k in rec}
        if "kind" in rec:
            meta["kind"] = rec["kind"]
        return ClusterInstance(points=np.array(rec["points"]), k=int(rec["k"]), meta=meta)
    if task == "tsp":
        return TspInstance(points=np.array(rec["points"]), tour=list(rec["tour"]),
                           tour_length=float(rec["tour_length"]), exact=bool(rec["exact"]))
    raise ValueError(f"unknown task {task!r}")


def write_dataset(path, task: str, instances, seed: int, params: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "record": "header",
        "task": task,
        "seed": int(seed),
        "generator_version": GENERATOR_VERSION,
        "count": len(instances),
        "params": _round_floats(params or {}),
    }
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for inst in instances:
            rec = {"record": "instance"}
            rec.update(_round_floats(_instance_record(task, inst)))
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_dataset(path):
    path = Path(path)
    with open(path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or lines[0].get("record") != "header":
        raise ValueError(f"{path}: missing dataset header record")
    header = lines[0]
    task = header["task"]
    instances = [_instance_from_record(task, rec) for rec in lines[1:]
                 if rec.get("record") == "instance"]
    return header, instances
