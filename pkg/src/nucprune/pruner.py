"""Iterative magnitude pruning (network-wide and layer-wise) plus sparsity
and theoretical-speedup accounting."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .autonet import Network, TrainConfig, train

log = logging.getLogger(__name__)

METHODS = ("layerwise", "networkwide")


class ConnectivityLoss(RuntimeError):
    """Pruning would zero out an entire layer.

    ``checkpoints`` holds whatever iterations completed before the failure.
    """

    def __init__(self, layer: str, cr: int | None = None, checkpoints=None):
        self.layer = layer
        self.cr = cr
        self.checkpoints = list(checkpoints or [])
        at = f" at CR {cr}" if cr is not None else ""
        super().__init__(f"layer {layer!r} would lose every weight{at}")


@dataclass
class PruneConfig:
    method: str
    cr: int
    retrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=150))

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        self.iterations  # validates cr

    @property
    def iterations(self) -> int:
        return log2_exact(self.cr)


def log2_exact(cr: int) -> int:
    if not isinstance(cr, (int, np.integer)) or cr < 1 or cr & (cr - 1):
        raise ValueError(f"compression ratio must be a power of two >= 1, got {cr!r}")
    return int(cr).bit_length() - 1


@dataclass
class SparsityReport:
    layers: list[tuple[str, int, int]]  # (name, total, nonzero)

    @property
    def total(self) -> int:
        return sum(t for _, t, _ in self.layers)

    @property
    def nonzero(self) -> int:
        return sum(nz for _, _, nz in self.layers)

    @property
    def sparsity(self) -> float:
        return 1.0 - self.nonzero / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "nonzero": self.nonzero,
            "sparsity": self.sparsity,
            "layers": [{"name": n, "total": t, "nonzero": nz} for n, t, nz in self.layers],
        }


@dataclass
class SpeedupReport:
    cr: float  # effective: prunable weights / surviving prunable weights
    dense_flops: int
    sparse_flops: float
    speedup: float

    def to_dict(self) -> dict:
        return {"cr": self.cr, "dense_flops": self.dense_flops,
                "sparse_flops": self.sparse_flops, "speedup": self.speedup}


def _quota(n: int, target: float) -> int:
    if not 0.0 <= target < 1.0:
        raise ValueError(f"target sparsity must lie in [0, 1), got {target}")
    return math.ceil(target * n)


def _drop_order(weights: np.ndarray, masked: np.ndarray) -> np.ndarray:
    """Indices in pruning order: already-masked first, then by |w|, then index.

    lexsort is stable and uses its last key as the primary one.
    """
    return np.lexsort((np.abs(weights), ~masked))


def prune_layerwise(net: Network, target_sparsity: float) -> dict[str, np.ndarray]:
    """Keep masks with ``ceil(target * n)`` smallest-magnitude weights dropped per layer."""
    masks = {}
    for layer in net.prunable:
        w = net.params[layer.weight].ravel()
        prev = net.masks.get(layer.weight)
        masked = np.zeros(w.size, bool) if prev is None else ~prev.ravel()
        k = _quota(w.size, target_sparsity)
        if k >= w.size:
            raise ConnectivityLoss(layer.name)
        keep = np.ones(w.size, bool)
        keep[_drop_order(w, masked)[:k]] = False
        masks[layer.weight] = keep.reshape(net.params[layer.weight].shape)
    return masks


def prune_networkwide(net: Network, target_sparsity: float) -> dict[str, np.ndarray]:
    """One global magnitude threshold over all prunable weights."""
    layers = net.prunable
    flat = [net.params[l.weight].ravel() for l in layers]
    masked = [
        np.zeros(f.size, bool) if net.masks.get(l.weight) is None else ~net.masks[l.weight].ravel()
        for l, f in zip(layers, flat)
    ]
    if not flat:
        return {}
    w = np.concatenate(flat)
    keep = np.ones(w.size, bool)
    keep[_drop_order(w, np.concatenate(masked))[:_quota(w.size, target_sparsity)]] = False
    masks, start = {}, 0
    for layer, f in zip(layers, flat):
        masks[layer.weight] = keep[start:start + f.size].reshape(net.params[layer.weight].shape)
        start += f.size
    return masks


PRUNERS: dict[str, Callable[[Network, float], dict[str, np.ndarray]]] = {
    "layerwise": prune_layerwise,
    "networkwide": prune_networkwide,
}


def sparsity_report(net: Network) -> SparsityReport:
    return SparsityReport([
        (l.name, int(net.params[l.weight].size), int(np.count_nonzero(net.params[l.weight])))
        for l in net.prunable
    ])


def iter_mag_prune(
    net: Network,
    cfg: PruneConfig,
    dataset: Sequence[tuple[np.ndarray, np.ndarray]],
    on_checkpoint: Callable[[int, Network, SparsityReport], None] | None = None,
    trainer: Callable = train,
) -> list[tuple[int, Network, SparsityReport]]:
    """Halve the surviving prunable weights log2(CR) times, retraining after each cut.

    ``net`` must already be trained. It is not modified; each iteration's
    network is returned as an independent copy (and handed to
    ``on_checkpoint`` as soon as it exists). ``trainer(net, dataset, cfg)``
    retrains in place with the installed masks enforced.
    """
    pruner = PRUNERS[cfg.method]
    current = net.copy()
    checkpoints: list[tuple[int, Network, SparsityReport]] = []
    for k in range(1, cfg.iterations + 1):
        cr = 2**k
        try:
            masks = pruner(current, 1.0 - 2.0**-k)
        except ConnectivityLoss as exc:
            raise ConnectivityLoss(exc.layer, cr, checkpoints) from None
        current.apply_masks(masks)
        retrain = replace(cfg.retrain, seed=cfg.retrain.seed + k)
        trainer(current, dataset, retrain)
        current.apply_masks()
        report = sparsity_report(current)
        log.info("%s CR=%d sparsity=%.4f", cfg.method, cr, report.sparsity)
        snapshot = current.copy()
        checkpoints.append((cr, snapshot, report))
        if on_checkpoint is not None:
            on_checkpoint(cr, snapshot, report)
    return checkpoints


# ---------------------------------------------------------------- FLOPs

def flops_count(net: Network, input_shape: Sequence[int] = (1, 64, 64)) -> dict[str, int]:
    """Dense multiply-accumulate count per weight layer.

    conv: H_out * W_out * C_out * C_in * k * k; dense: in * out. Activations,
    pooling and upsampling are free.
    """
    _, h, w = input_shape
    counts = {}
    for layer in net.layers:
        kshape = net.params[layer.weight].shape
        if layer.kind == "conv":
            if h % layer.scale or w % layer.scale:
                raise ValueError(f"input {h}x{w} not divisible by layer scale {layer.scale}")
            counts[layer.name] = (h // layer.scale) * (w // layer.scale) * int(np.prod(kshape))
        elif layer.kind == "dense":
            counts[layer.name] = int(np.prod(kshape))
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
    return counts


def theoretical_speedup(
    net: Network,
    masks: dict[str, np.ndarray] | None = None,
    input_shape: Sequence[int] = (1, 64, 64),
) -> SpeedupReport:
    """Dense FLOPs over FLOPs left after skipping pruned weights.

    Each layer's FLOPs scale with the kept fraction of its kernel. Without
    explicit ``masks`` the network's installed masks are used; a layer
    without a mask counts as dense.
    """
    masks = net.masks if masks is None else masks
    flops = flops_count(net, input_shape)
    dense = sum(flops.values())
    sparse = Fraction(0)
    kept_total = n_total = 0
    for layer in net.layers:
        m = masks.get(layer.weight)
        n = net.params[layer.weight].size
        kept = n if m is None else int(np.count_nonzero(m))
        sparse += Fraction(flops[layer.name] * kept, n)
        if layer.prunable:
            kept_total += kept
            n_total += n
    if sparse <= 0:
        raise ConnectivityLoss("<all>")
    cr = n_total / kept_total if kept_total else math.inf
    return SpeedupReport(cr=cr, dense_flops=dense, sparse_flops=float(sparse),
                         speedup=float(dense / sparse))
