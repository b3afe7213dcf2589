"""On-disk datasets, model metadata, sweeps and the per-CR results table.

Directory layouts::

    data/
        manifest.json
        scene_000/{image.pfm, instances.pgm, binary.pfm, distance.pfm}
        ...

    sweep/                       (one per branch and method)
        sweep.json
        base.prnw, base.json     unpruned starting point
        cr2.prnw, cr2.sparsity.json, cr2.speedup.json
        ...
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import formats
from .autonet import HEADS, Network, build_toy_network, predict
from .instseg import MergeConfig, merge
from .metrics import MetricsReport, aji, dice, mse, pq
from .pruner import sparsity_report, theoretical_speedup
from .synthgen import Scene

log = logging.getLogger(__name__)

BRANCH_HEAD = {"seg": "sigmoid", "reg": "linear"}


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- datasets

def save_scene(directory, scene: Scene) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    formats.save_floatmap(d / "image.pfm", scene.image)
    formats.save_labelmap(d / "instances.pgm", scene.instances)
    formats.save_floatmap(d / "binary.pfm", scene.binary)
    formats.save_floatmap(d / "distance.pfm", scene.distance)


def load_scene(directory, seed: int = 0, distribution: str = "base") -> Scene:
    d = Path(directory)
    return Scene(
        image=formats.load_floatmap(d / "image.pfm")[None],
        instances=formats.load_labelmap(d / "instances.pgm"),
        binary=formats.load_floatmap(d / "binary.pfm")[None],
        distance=formats.load_floatmap(d / "distance.pfm")[None],
        seed=seed,
        distribution=distribution,
    )


def save_dataset(directory, train: list[Scene], test: list[Scene], meta: dict) -> None:
    d = Path(directory)
    entries = []
    for i, (scene, split) in enumerate([(s, "train") for s in train] + [(s, "test") for s in test]):
        name = f"scene_{i:03d}"
        save_scene(d / name, scene)
        entries.append({"name": name, "seed": scene.seed, "split": split})
    dump_json(d / "manifest.json", {**meta, "scenes": entries})


def load_dataset(directory, split: str = "all") -> list[Scene]:
    """Scenes of one split (``train``, ``test`` or ``all``) from a dataset directory.

    A directory without a manifest is read as a flat collection of scene
    folders, which allows externally produced label maps.
    """
    d = Path(directory)
    manifest = d / "manifest.json"
    if not manifest.exists():
        dirs = sorted(p for p in d.iterdir() if (p / "instances.pgm").exists())
        if not dirs:
            raise FileNotFoundError(f"no scenes found under {d}")
        return [load_scene(p) for p in dirs]
    meta = json.loads(manifest.read_text())
    dist = meta.get("distribution", "base")
    return [load_scene(d / e["name"], e["seed"], dist)
            for e in meta["scenes"] if split == "all" or e["split"] == split]


# ---------------------------------------------------------------- models

def save_model(path, net: Network, meta: dict) -> None:
    """Weight file plus a ``.json`` sidecar naming the head."""
    path = Path(path)
    formats.save_network(path, net)
    dump_json(path.with_suffix(".json"), {**meta, "head": net.head, "arch": net.arch})


def load_model(path) -> tuple[Network, dict]:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise FileNotFoundError(f"model metadata {sidecar} is missing")
    meta = json.loads(sidecar.read_text())
    head = meta.get("head")
    if head not in HEADS:
        raise formats.FormatError(f"{sidecar}: unknown head {head!r}")
    return formats.load_network(path, build_toy_network(head, seed=0)), meta


# ---------------------------------------------------------------- evaluation

@dataclass
class Scores:
    dice: float
    mse: float
    aji: float
    pq: float


def evaluate(seg_net: Network, reg_net: Network, scenes: Iterable[Scene],
             merge_cfg: MergeConfig = MergeConfig()) -> Scores:
    """Unweighted means over ``scenes`` of Dice (seg), MSE (reg) and AJI/PQ (merged)."""
    d, m, a, p = [], [], [], []
    for s in scenes:
        seg = predict(seg_net, s.image)
        dist = predict(reg_net, s.image)
        labels = merge(seg, dist, merge_cfg)
        d.append(dice(seg > merge_cfg.seg_threshold, s.binary[0] > 0.5))
        m.append(mse(dist, s.distance[0]))
        a.append(aji(s.instances, labels))
        p.append(pq(s.instances, labels).pq)
    if not d:
        raise ValueError("no scenes to evaluate")
    return Scores(*(float(np.mean(v)) for v in (d, m, a, p)))


# ---------------------------------------------------------------- sweeps

@dataclass
class Sweep:
    root: Path
    branch: str
    method: str
    crs: list[int]

    def checkpoint(self, cr: int) -> Path:
        return self.root / ("base.prnw" if cr == 1 else f"cr{cr}.prnw")


def find_sweeps(root) -> list[Sweep]:
    out = []
    for meta_path in sorted(Path(root).rglob("sweep.json")):
        meta = json.loads(meta_path.read_text())
        out.append(Sweep(meta_path.parent, meta["branch"], meta["method"], list(meta["crs"])))
    if not out:
        raise FileNotFoundError(f"no sweep.json found under {root}")
    return out


class MissingCheckpoint(FileNotFoundError):
    pass


def _combined(nets: list[Network], input_shape) -> tuple[float, float]:
    """Global sparsity and speedup of several networks run side by side."""
    total = nonzero = 0
    dense = sparse = 0.0
    for net in nets:
        rep = sparsity_report(net)
        total += rep.total
        nonzero += rep.nonzero
        sp = theoretical_speedup(net, input_shape=input_shape)
        dense += sp.dense_flops
        sparse += sp.sparse_flops
    return 1.0 - nonzero / total, dense / sparse


def build_report(sweep_root, scenes: list[Scene], run_id: str = "run",
                 merge_cfg: MergeConfig = MergeConfig()) -> list[MetricsReport]:
    """Evaluate every (method, CR) of the seg/reg sweeps under ``sweep_root``.

    Emits ``seg``, ``reg`` and ``inst`` rows per CR, plus ``dense`` rows at
    CR 1 for the unpruned models.
    """
    by_key: dict[tuple[str, str], Sweep] = {}
    for sw in find_sweeps(sweep_root):
        by_key[(sw.branch, sw.method)] = sw
    methods = sorted({m for _, m in by_key})
    problems = []
    for method in methods:
        for branch in ("seg", "reg"):
            if (branch, method) not in by_key:
                problems.append(f"{method}: no {branch} sweep")
        if ("seg", method) in by_key and ("reg", method) in by_key:
            seg_crs, reg_crs = set(by_key["seg", method].crs), set(by_key["reg", method].crs)
            for cr in sorted(seg_crs ^ reg_crs):
                missing = "reg" if cr in seg_crs else "seg"
                problems.append(f"{method}: CR {cr} missing for {missing}")
    if problems:
        raise MissingCheckpoint("; ".join(problems))

    shape = scenes[0].image.shape
    rows: list[MetricsReport] = []
    first = methods[0]
    plan = [("dense", 1, by_key["seg", first], by_key["reg", first])]
    for method in methods:
        for cr in sorted(by_key["seg", method].crs):
            plan.append((method, cr, by_key["seg", method], by_key["reg", method]))
    for method, cr, seg_sw, reg_sw in plan:
        paths = [seg_sw.checkpoint(cr), reg_sw.checkpoint(cr)]
        for p in paths:
            if not p.exists():
                raise MissingCheckpoint(f"{method}: checkpoint for CR {cr} is absent ({p})")
        seg_net, _ = load_model(paths[0])
        reg_net, _ = load_model(paths[1])
        sc = evaluate(seg_net, reg_net, scenes, merge_cfg)
        log.info("%s CR=%d dice=%.4f mse=%.5f aji=%.4f pq=%.4f", method, cr, sc.dice, sc.mse, sc.aji, sc.pq)
        sparsity, speedup = _combined([seg_net, reg_net], shape)
        rows += [
            MetricsReport(run_id, "seg", method, cr, sparsity_report(seg_net).sparsity,
                          dice=sc.dice, speedup=theoretical_speedup(seg_net, input_shape=shape).speedup),
            MetricsReport(run_id, "reg", method, cr, sparsity_report(reg_net).sparsity,
                          mse=sc.mse, speedup=theoretical_speedup(reg_net, input_shape=shape).speedup),
            MetricsReport(run_id, "inst", method, cr, sparsity, dice=sc.dice, mse=sc.mse,
                          aji=sc.aji, pq=sc.pq, speedup=speedup),
        ]
    return rows
