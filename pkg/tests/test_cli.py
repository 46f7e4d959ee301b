import json

import numpy as np
import pytest

from mfn.cli import main
from mfn.graphs import Dataset, Graph, write_tu_dataset


@pytest.fixture()
def tu_dir(tmp_path):
    rng = np.random.default_rng(0)
    graphs = []
    for i in range(12):
        n = int(rng.integers(3, 6))
        edges = tuple((j, j + 1) for j in range(n - 1))
        if i % 2:  # class 1 graphs get a chord
            edges = edges + ((0, n - 1),)
        graphs.append(Graph(n=n, edges=edges,
                            node_labels=tuple(rng.integers(0, 2, n)),
                            edge_labels=(0,) * len(edges), target=i % 2))
    ds = Dataset(graphs=tuple(graphs), task="classification", name="TOY",
                 num_classes=2, meta={"num_node_labels": 2, "num_edge_labels": 1})
    d = tmp_path / "TOY"
    write_tu_dataset(ds, d, "TOY")
    return d


def test_train_requires_data_for_tu(tmp_path):
    rc = main(["train", "--task", "tu", "--out", str(tmp_path / "o")])
    assert rc == 2


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["train"])  # missing required arguments
    assert exc.value.code == 2


def test_train_tu_smoke(tu_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "model": {"kind": "pure", "layers": 2, "mfn_layers": 1, "width": 6,
                   "mat_channels": 2, "pole_pairs": 2, "num_node_labels": 2,
                   "num_edge_labels": 1, "out_dim": 2},
        "train": {"epochs": 2, "batch_size": 4, "folds": 3},
    }))
    out = tmp_path / "run"
    rc = main(["train", "--task", "tu", "--data", str(tu_dir),
               "--config", str(cfg), "--out", str(out), "--seed", "1"])
    assert rc == 0
    assert (out / "metrics.csv").exists()
    assert (out / "checkpoint.json").exists()
    assert (out / "checkpoint.bin").exists()
    assert (out / "manifest.json").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train" and "config_hash" in manifest


def test_train_kchain_smoke_and_determinism(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "kchain": {"k": 4, "epochs": 3},
        "model": {"kind": "geometric", "layers": 1, "mfn_layers": 1, "width": 2,
                   "mat_channels": 2, "pole_pairs": 2, "backend": "selected",
                   "num_species": 2, "coupling": "tensor+scalar"},
    }))
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = main(["train", "--task", "kchain", "--config", str(cfg),
                   "--out", str(out), "--seed", "3"])
        assert rc == 0
        outs.append((out / "metrics.csv").read_bytes())
    assert outs[0] == outs[1]


def test_decay_two_node_profile(tmp_path, capsys):
    rc = main(["decay", "--gamma", "1.0", "--n", "2"])
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "gamma,distance,magnitude"
    assert len(lines) == 3  # distances 0 and 1

    out = tmp_path / "d" / "decay.csv"
    rc = main(["decay", "--gamma", "0.5,1.0", "--n", "8", "--out", str(out)])
    assert rc == 0
    assert out.exists() and (out.parent / "manifest.json").exists()


def test_decay_monotone_beyond_first_hop(capsys):
    rc = main(["decay", "--gamma", "1.0", "--n", "64", "--source", "0"])
    assert rc == 0
    rows = [l.split(",") for l in capsys.readouterr().out.strip().splitlines()[1:]]
    mags = [float(m) for _, d, m in rows]
    floor = mags[0] * 1e-12  # below this the entries are round-off noise
    live = [m for m in mags[1:] if m > floor]
    assert len(live) > 20
    assert all(b < a for a, b in zip(live, live[1:]))


def test_bench_single_size(capsys):
    rc = main(["bench", "--pattern", "chain", "--sizes", "32", "--backend", "selected"])
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2
    assert lines[0].startswith("pattern,n,backend,op_count")


def test_spectrum_outputs(tu_dir, tmp_path, capsys):
    out = tmp_path / "spec.csv"
    rc = main(["spectrum", "--data", str(tu_dir), "--out", str(out)])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "graph,channel,index,eigenvalue_pre,eigenvalue_post"
    rows = np.array([[float(x) for x in l.split(",")] for l in lines[1:]])
    # post-normalization eigenvalue means vanish per graph
    for gid in np.unique(rows[:, 0]):
        sel = rows[rows[:, 0] == gid]
        assert abs(sel[:, 4].mean()) < 1e-10


def test_spectrum_header_only_when_all_graphs_trivial(tmp_path):
    ds = Dataset(graphs=(Graph(n=1, edges=(), node_labels=(0,), target=0),),
                 task="classification", num_classes=1, name="ONE",
                 meta={"num_node_labels": 1, "num_edge_labels": 0})
    d = tmp_path / "ONE"
    write_tu_dataset(ds, d, "ONE")
    out = tmp_path / "spec.csv"
    rc = main(["spectrum", "--data", str(d), "--out", str(out)])
    assert rc == 0
    assert out.read_text().strip() == "graph,channel,index,eigenvalue_pre,eigenvalue_post"


def test_check_suite_pass(capsys):
    assert main(["check", "--suite", "normalize"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out


def test_check_corrupt_pole_fails_with_singular_error(capsys):
    rc = main(["check", "--suite", "backends", "--corrupt-pole"])
    assert rc == 1
    assert "SingularMatrixError" in capsys.readouterr().out


def test_rerun_identical_artifacts(tmp_path):
    out1, out2 = tmp_path / "r1" / "b.csv", tmp_path / "r2" / "b.csv"
    for out in (out1, out2):
        rc = main(["bench", "--pattern", "chain", "--sizes", "16,32",
                   "--backend", "selected", "--out", str(out)])
        assert rc == 0
    assert out1.read_bytes() == out2.read_bytes()
