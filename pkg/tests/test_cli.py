import json
from pathlib import Path

import numpy as np
import pytest

from splitmerge.cli import main
from splitmerge.data import read_dataset


def run(args):
    return main([str(a) for a in args])


def test_datagen_hull_contract(tmp_path):
    out = tmp_path / "hull.jsonl"
    assert run(["datagen", "hull", "--n", "6..50", "--count", "40", "--seed", "7",
                "--out", out]) == 0
    header, insts = read_dataset(out)
    assert header["task"] == "hull" and header["count"] == 40
    assert all(6 <= i.n <= 50 for i in insts)
    assert all(len(i.hull) >= 3 for i in insts)


def test_datagen_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for out in (a, b):
        assert run(["datagen", "knapsack", "--n", "12", "--count", "15",
                    "--seed", "3", "--out", out]) == 0
    assert a.read_bytes() == b.read_bytes()
    header, insts = read_dataset(a)
    assert all(0.2 * 12 <= i.capacity <= 0.3 * 12 for i in insts)
    assert all("opt_value" in i.oracle for i in insts)


def test_datagen_tsp_and_clustering(tmp_path):
    tsp = tmp_path / "tsp.jsonl"
    assert run(["datagen", "tsp", "--n", "8", "--count", "4", "--seed", "1",
                "--out", tsp]) == 0
    _, insts = read_dataset(tsp)
    assert all(i.exact and sorted(i.tour) == list(range(8)) for i in insts)
    clus = tmp_path / "clus.jsonl"
    assert run(["datagen", "clustering", "--k", "4", "--count", "3", "--seed", "1",
                "--out", clus]) == 0
    header, cinsts = read_dataset(clus)
    assert header["params"]["n"] == 80   # 20 points per cluster by default
    assert all("rec_lloyd_cost" in i.meta for i in cinsts)


def _write_cfg(tmp_path, **kw):
    cfg = dict(task="hull", epochs=2, batch_size=8, merge_hidden=12, split_hidden=6,
               split_layers=2, dev_size=4, seed=5, samples=2)
    cfg.update(kw)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return p


@pytest.fixture
def hull_dataset(tmp_path):
    out = tmp_path / "hull.jsonl"
    run(["datagen", "hull", "--n", "6..9", "--count", "16", "--seed", "2",
         "--out", out])
    return out


def test_train_smoke_and_manifest(tmp_path, hull_dataset):
    cfg = _write_cfg(tmp_path, dataset=str(hull_dataset))
    out = tmp_path / "run"
    assert run(["train", "--config", cfg, "--out", out]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train" and "ended_at" in manifest
    for p in manifest["outputs"]:
        assert Path(p).exists()
    records = [json.loads(l) for l in (out / "metrics.jsonl").open()]
    assert len(records) == 2


def test_train_metrics_byte_identical(tmp_path, hull_dataset):
    cfg = _write_cfg(tmp_path, dataset=str(hull_dataset))
    for d in ("r1", "r2"):
        assert run(["train", "--config", cfg, "--out", tmp_path / d]) == 0
    assert (tmp_path / "r1" / "metrics.jsonl").read_bytes() == \
        (tmp_path / "r2" / "metrics.jsonl").read_bytes()


def test_train_resume_preserves_epoch_counter(tmp_path, hull_dataset):
    cfg = _write_cfg(tmp_path, dataset=str(hull_dataset), epochs=2)
    assert run(["train", "--config", cfg, "--out", tmp_path / "base"]) == 0
    cfg4 = _write_cfg(tmp_path, dataset=str(hull_dataset), epochs=4)
    assert run(["train", "--config", cfg4, "--out", tmp_path / "resumed",
                "--resume", tmp_path / "base" / "last.ckpt.json"]) == 0
    records = [json.loads(l) for l in (tmp_path / "resumed" / "metrics.jsonl").open()]
    assert [r["epoch"] for r in records] == [3, 4]
    np.testing.assert_allclose(records[0]["lr"]["merge"], 0.001 / 3)


def test_train_config_errors_all_at_once(tmp_path, hull_dataset):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"task": "hull", "dataset": str(hull_dataset),
                             "bogus_key": 1, "another_bad": 2}))
    with pytest.raises(SystemExit) as exc:
        run(["train", "--config", p])
    msg = str(exc.value)
    assert "bogus_key" in msg and "another_bad" in msg


def test_eval_outputs_and_determinism(tmp_path, hull_dataset):
    cfg = _write_cfg(tmp_path, dataset=str(hull_dataset))
    run(["train", "--config", cfg, "--out", tmp_path / "run"])
    ckpt = tmp_path / "run" / "last.ckpt.json"
    for pref in ("e1", "e2"):
        assert run(["eval", "--checkpoint", ckpt, "--dataset", hull_dataset,
                    "--out-prefix", tmp_path / pref, "--seed", "9"]) == 0
    assert (tmp_path / "e1.json").read_bytes() == (tmp_path / "e2.json").read_bytes()
    assert (tmp_path / "e1.csv").read_bytes() == (tmp_path / "e2.csv").read_bytes()
    assert (tmp_path / "e1.png").exists()
    report = json.loads((tmp_path / "e1.json").read_text())
    assert report["task"] == "hull" and report["count"] == 16
    # n < 25 evaluates at depth 0 under the test schedule
    assert all(v["splits"] == 0 for v in report["per_size"].values())


def test_eval_task_mismatch_rejected(tmp_path, hull_dataset):
    cfg = _write_cfg(tmp_path, dataset=str(hull_dataset))
    run(["train", "--config", cfg, "--out", tmp_path / "run"])
    knap = tmp_path / "knap.jsonl"
    run(["datagen", "knapsack", "--n", "8", "--count", "3", "--seed", "1",
         "--out", knap])
    assert run(["eval", "--checkpoint", tmp_path / "run" / "last.ckpt.json",
                "--dataset", knap, "--out-prefix", tmp_path / "x"]) == 2


def test_inspect_episode_dump_and_csv_rows(tmp_path):
    # a depth-2 dump must emit one CSV per scale with n rows each
    big = tmp_path / "big.jsonl"
    run(["datagen", "hull", "--n", "26..30", "--count", "4", "--seed", "4",
         "--out", big])
    cfg = _write_cfg(tmp_path, dataset=str(big), leaf_threshold=4)
    run(["train", "--config", cfg, "--out", tmp_path / "run"])
    assert run(["eval", "--checkpoint", tmp_path / "run" / "last.ckpt.json",
                "--dataset", big, "--out-prefix", tmp_path / "ev",
                "--splits", "2", "--dump", "2"]) == 0
    dump = tmp_path / "ev_episodes.json"
    assert dump.exists()
    assert run(["inspect", dump, "--out-prefix", tmp_path / "insp"]) == 0
    episodes = json.loads(dump.read_text())["episodes"]
    n = episodes[0]["tree"]["n"]
    scales = sorted({v["scale"] for v in episodes[0]["tree"]["nodes"]})
    for j in scales:
        csv_path = tmp_path / f"insp_scale{j}.csv"
        assert csv_path.exists()
        rows = csv_path.read_text().strip().splitlines()
        assert len(rows) == n + 1   # header + one row per element
    assert (tmp_path / "insp_scales.png").exists()


def test_inspect_checkpoint(tmp_path, hull_dataset, capsys):
    cfg = _write_cfg(tmp_path, dataset=str(hull_dataset))
    run(["train", "--config", cfg, "--out", tmp_path / "run"])
    assert run(["inspect", tmp_path / "run" / "last.ckpt.json"]) == 0
    out = capsys.readouterr().out
    assert "arch=ptrnet" in out and "optimizer[merge]: adam" in out


def test_inspect_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"whatever": 1}))
    assert run(["inspect", bad]) == 2
