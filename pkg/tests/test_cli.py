"""End-to-end checks of the command line tool on a tiny workspace."""
import json
import shutil

import numpy as np
import pytest

from nucprune import formats as F
from nucprune.cli import EXIT_IO, EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, main
from nucprune.experiment import load_model
from nucprune.metrics import aji
from nucprune.pruner import sparsity_report
from nucprune.synthgen import make_distance_target


def run(*args) -> int:
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Data, two short-trained models and one 3-CR sweep per (branch, method)."""
    root = tmp_path_factory.mktemp("ws")
    assert run("synth", "--out", root / "data", "--count", 6, "--size", 32, "--seed", 3) == EXIT_OK
    assert run("synth", "--out", root / "shift", "--count", 4, "--size", 32, "--seed", 3,
               "--dist", "shifted") == EXIT_OK
    for b in ("seg", "reg"):
        assert run("train", "--branch", b, "--data", root / "data", "--out", root / f"{b}.prnw",
                   "--epochs", 3) == EXIT_OK
        for m in ("layerwise", "networkwide"):
            assert run("prune-sweep", "--model", root / f"{b}.prnw", "--method", m, "--max-cr", 8,
                       "--retrain-epochs", 1, "--data", root / "data",
                       "--out", root / "sweeps" / f"{b}-{m}") == EXIT_OK
    return root


# ---------------------------------------------------------------- synth

def test_synth_layout(ws):
    dirs = sorted(p.name for p in (ws / "data").iterdir() if p.is_dir())
    assert len(dirs) == 6
    for d in dirs:
        assert {p.name for p in (ws / "data" / d).iterdir()} == {"image.pfm", "instances.pgm",
                                                                 "binary.pfm", "distance.pfm"}
    man = json.loads((ws / "data" / "manifest.json").read_text())
    assert man["distribution"] == "base" and len(man["scenes"]) == 6
    assert [e["split"] for e in man["scenes"]].count("test") == 1
    assert json.loads((ws / "shift" / "manifest.json").read_text())["distribution"] == "shifted"


def test_synth_count_ten(tmp_path):
    assert run("synth", "--out", tmp_path / "d", "--count", 10) == EXIT_OK
    assert len([p for p in (tmp_path / "d").iterdir() if p.is_dir()]) == 10


def test_synth_is_byte_identical_and_needs_force(ws, tmp_path):
    out = tmp_path / "again"
    assert run("synth", "--out", out, "--count", 6, "--size", 32, "--seed", 3) == EXIT_OK
    for p in (ws / "data").rglob("*"):
        if p.is_file():
            assert (out / p.relative_to(ws / "data")).read_bytes() == p.read_bytes()
    assert run("synth", "--out", out, "--count", 6, "--size", 32, "--seed", 3) == EXIT_USAGE
    assert run("synth", "--out", out, "--count", 6, "--size", 32, "--seed", 3, "--force") == EXIT_OK


@pytest.mark.parametrize("args", [["--count", 1], ["--size", 30], ["--dist", "odd"]])
def test_synth_validation(tmp_path, args):
    assert run("synth", "--out", tmp_path / "d", *args) == EXIT_USAGE


# ---------------------------------------------------------------- train

def test_train_outputs(ws):
    net, meta = load_model(ws / "seg.prnw")
    assert net.head == "sigmoid" and meta["branch"] == "seg" and meta["epochs"] == 3
    lines = (ws / "seg.loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss" and len(lines) == 4


def test_train_is_reproducible(ws, tmp_path):
    assert run("train", "--branch", "seg", "--data", ws / "data", "--out", tmp_path / "s.prnw",
               "--epochs", 3) == EXIT_OK
    assert (tmp_path / "s.prnw").read_bytes() == (ws / "seg.prnw").read_bytes()


def test_train_errors(ws, tmp_path):
    assert run("train", "--branch", "seg", "--data", ws / "data", "--out", tmp_path / "m.prnw",
               "--epochs", 0) == EXIT_USAGE
    assert run("train", "--branch", "seg", "--data", tmp_path / "missing", "--out", tmp_path / "m.prnw",
               "--epochs", 1) == EXIT_IO
    assert run("train", "--branch", "inst", "--data", ws / "data", "--out", tmp_path / "m.prnw") == EXIT_USAGE


# ---------------------------------------------------------------- prune-sweep

def test_sweep_checkpoints_and_sidecars(ws):
    d = ws / "sweeps" / "seg-layerwise"
    meta = json.loads((d / "sweep.json").read_text())
    assert meta["crs"] == [2, 4, 8] and meta["status"] == "complete"
    for cr in (2, 4, 8):
        net, _ = load_model(d / f"cr{cr}.prnw")
        rep = sparsity_report(net)
        assert abs(rep.sparsity - (1 - 1 / cr)) <= 1 / rep.total + 1e-12
        side = json.loads((d / f"cr{cr}.sparsity.json").read_text())
        assert side["nonzero"] == rep.nonzero
        sp = json.loads((d / f"cr{cr}.speedup.json").read_text())
        assert sp["cr"] == cr and 0.9 * cr <= sp["speedup"] <= cr
    assert (d / "base.prnw").read_bytes() == (ws / "seg.prnw").read_bytes()


def test_sweep_partial_on_connectivity_loss(ws, tmp_path):
    # enc1 has 72 weights; the 7th halving would leave none
    out = tmp_path / "deep"
    code = run("prune-sweep", "--model", ws / "seg.prnw", "--method", "layerwise", "--max-cr", 128,
               "--retrain-epochs", 1, "--data", ws / "data", "--out", out)
    assert code == EXIT_PARTIAL
    meta = json.loads((out / "sweep.json").read_text())
    assert meta["status"] == "partial" and meta["crs"] == [2, 4, 8, 16, 32, 64]
    assert "enc1" in meta["error"] and "128" in meta["error"]
    assert (out / "cr64.prnw").exists() and not (out / "cr128.prnw").exists()


def test_sweep_networkwide_goes_deeper(ws, tmp_path):
    code = run("prune-sweep", "--model", ws / "seg.prnw", "--method", "networkwide", "--max-cr", 128,
               "--retrain-epochs", 1, "--data", ws / "data", "--out", tmp_path / "nw")
    assert code == EXIT_OK


def test_sweep_validation(ws, tmp_path):
    base = ["prune-sweep", "--model", ws / "seg.prnw", "--method", "layerwise", "--data", ws / "data"]
    assert run(*base, "--max-cr", 6, "--out", tmp_path / "a") == EXIT_USAGE
    assert run(*base, "--max-cr", 4, "--retrain-epochs", 0, "--out", tmp_path / "b") == EXIT_USAGE
    assert run(*base[:2], tmp_path / "none.prnw", *base[3:], "--max-cr", 2, "--out", tmp_path / "c") == EXIT_IO


# ---------------------------------------------------------------- merge / eval

def test_merge_perfect_inputs(ws, tmp_path):
    scene = ws / "data" / "scene_000"
    assert run("merge", "--seg", scene / "binary.pfm", "--dist", scene / "distance.pfm",
               "--out", tmp_path / "l.pgm") == EXIT_OK
    assert aji(F.load_labelmap(scene / "instances.pgm"), F.load_labelmap(tmp_path / "l.pgm")) == 1.0


def test_merge_zero_seg_and_min_area(tmp_path):
    inst = np.zeros((16, 16), np.int32)
    inst[1:3, 1:3] = 1
    inst[6:13, 6:13] = 2
    F.save_floatmap(tmp_path / "d.pfm", make_distance_target(inst))
    F.save_floatmap(tmp_path / "z.pfm", np.zeros((16, 16)))
    F.save_floatmap(tmp_path / "s.pfm", (inst > 0).astype(float))
    assert run("merge", "--seg", tmp_path / "z.pfm", "--dist", tmp_path / "d.pfm", "--out", tmp_path / "e.pgm") == 0
    assert not F.load_labelmap(tmp_path / "e.pgm").any()
    run("merge", "--seg", tmp_path / "s.pfm", "--dist", tmp_path / "d.pfm", "--out", tmp_path / "a.pgm")
    run("merge", "--seg", tmp_path / "s.pfm", "--dist", tmp_path / "d.pfm", "--out", tmp_path / "b.pgm",
        "--min-area", 0)
    assert F.load_labelmap(tmp_path / "a.pgm").max() == 1
    assert F.load_labelmap(tmp_path / "b.pgm").max() == 2


def test_merge_errors(tmp_path):
    F.save_floatmap(tmp_path / "a.pfm", np.zeros((4, 4)))
    F.save_floatmap(tmp_path / "b.pfm", np.zeros((4, 6)))
    assert run("merge", "--seg", tmp_path / "a.pfm", "--dist", tmp_path / "b.pfm", "--out", tmp_path / "o.pgm") == EXIT_USAGE
    assert run("merge", "--seg", tmp_path / "x.pfm", "--dist", tmp_path / "b.pfm", "--out", tmp_path / "o.pgm") == EXIT_IO
    (tmp_path / "bad.pfm").write_bytes(b"garbage")
    assert run("merge", "--seg", tmp_path / "bad.pfm", "--dist", tmp_path / "a.pfm", "--out", tmp_path / "o.pgm") == EXIT_IO


def test_eval_identical_maps(ws, tmp_path):
    gt = ws / "data" / "scene_001" / "instances.pgm"
    assert run("eval", "--pred", gt, "--gt", gt, "--out", tmp_path / "r.csv") == EXIT_OK
    (row,) = F.read_results_csv(tmp_path / "r.csv")
    assert (row.branch, row.dice, row.aji, row.pq) == ("inst", 1.0, 1.0, 1.0)


# ---------------------------------------------------------------- report

def test_report_rows(ws, tmp_path):
    assert run("report", "--sweep", ws / "sweeps", "--data", ws / "data", "--out", tmp_path / "r.csv") == EXIT_OK
    rows = F.read_results_csv(tmp_path / "r.csv")
    keys = [(r.branch, r.method, r.cr) for r in rows]
    assert len(keys) == len(set(keys))
    for branch in ("seg", "reg", "inst"):
        for method in ("layerwise", "networkwide"):
            assert sorted(cr for b, m, cr in keys if (b, m) == (branch, method)) == [2, 4, 8]
        assert [cr for b, m, cr in keys if (b, m) == (branch, "dense")] == [1]
    for r in rows:
        vals = [getattr(r, c) for c in ("sparsity", "speedup")]
        vals += [r.dice] if r.branch in ("seg", "inst") else []
        vals += [r.mse] if r.branch in ("reg", "inst") else []
        vals += [r.aji, r.pq] if r.branch == "inst" else []
        assert all(v is not None and np.isfinite(v) for v in vals), r


def test_report_on_shifted_data_is_separate(ws, tmp_path):
    assert run("report", "--sweep", ws / "sweeps", "--data", ws / "shift", "--out", tmp_path / "s.csv",
               "--split", "all") == EXIT_OK
    assert run("report", "--sweep", ws / "sweeps", "--data", ws / "data", "--out", tmp_path / "b.csv") == EXIT_OK
    assert (tmp_path / "s.csv").read_text() != (tmp_path / "b.csv").read_text()
    # dense row plus 2 methods x 3 CRs, for each of seg, reg and inst
    assert len(F.read_results_csv(tmp_path / "s.csv")) == 3 * (1 + 2 * 3)


def test_report_is_byte_identical_on_rerun(ws, tmp_path):
    run("report", "--sweep", ws / "sweeps", "--data", ws / "data", "--out", tmp_path / "a.csv")
    run("report", "--sweep", ws / "sweeps", "--data", ws / "data", "--out", tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_report_names_missing_checkpoint(ws, tmp_path, capsys):
    sweeps = tmp_path / "sweeps"
    shutil.copytree(ws / "sweeps", sweeps)
    (sweeps / "reg-networkwide" / "cr4.prnw").unlink()
    assert run("report", "--sweep", sweeps, "--data", ws / "data", "--out", tmp_path / "r.csv") == EXIT_IO
    assert "networkwide: checkpoint for CR 4 is absent" in capsys.readouterr().err
    shutil.rmtree(sweeps / "seg-layerwise")
    assert run("report", "--sweep", sweeps, "--data", ws / "data", "--out", tmp_path / "r.csv") == EXIT_IO
    assert "layerwise: no seg sweep" in capsys.readouterr().err


def test_unknown_subcommand_is_usage_error():
    assert run("frobnicate") == EXIT_USAGE
    assert run() == EXIT_USAGE
