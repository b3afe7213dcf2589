"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here imports the package code under test except plain data types,
so each oracle is an independent route to the same answer.
"""
from __future__ import annotations

import itertools
import math
from collections import deque
from fractions import Fraction

import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` by central differences."""
    x = x.astype(np.float64).copy()
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise error relative to the larger gradient magnitude."""
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def conv2d_loops(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Direct 'same' zero-padded cross-correlation with explicit loops."""
    c_in, h, w = x.shape
    c_out, _, k, _ = kernel.shape
    p = k // 2
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for r in range(h):
            for c in range(w):
                s = float(bias[o])
                for i in range(c_in):
                    for dr in range(k):
                        for dc in range(k):
                            rr, cc = r + dr - p, c + dc - p
                            if 0 <= rr < h and 0 <= cc < w:
                                s += float(kernel[o, i, dr, dc]) * float(x[i, rr, cc])
                out[o, r, c] = s
    return out


# ---------------------------------------------------------------- pruning

def prune_sort_oracle(layers: list[np.ndarray], target: float, prev_keep=None,
                      per_layer: bool = True) -> list[np.ndarray]:
    """Keep masks from a plain Python sort.

    Entries are ranked by (already pruned first, |w|, layer position, flat
    index); the first ceil(target * n) are dropped, per layer or globally.
    """
    if prev_keep is None:
        prev_keep = [np.ones(w.size, bool) for w in layers]
    items = []
    for li, (w, keep) in enumerate(zip(layers, prev_keep)):
        flat = w.ravel().tolist()
        kp = np.ravel(keep).tolist()
        items.append([(0 if not kp[j] else 1, abs(flat[j]), li, j) for j in range(len(flat))])
    groups = items if per_layer else [sum(items, [])]
    out = [np.ones(w.size, bool) for w in layers]
    for g in groups:
        quota = math.ceil(target * len(g))
        for _, _, li, j in sorted(g)[:quota]:
            out[li][j] = False
    return [m.reshape(w.shape) for m, w in zip(out, layers)]


def toy_flops_closed_form(h: int = 64, w: int = 64) -> dict[str, int]:
    """Per-layer MACs of the toy network written out by hand."""
    return {
        "enc1": h * w * 8 * 1 * 9,
        "enc2": (h // 2) * (w // 2) * 16 * 8 * 9,
        "bott": (h // 4) * (w // 4) * 16 * 16 * 9,
        "dec2": (h // 2) * (w // 2) * 8 * 32 * 9,
        "dec1": h * w * 8 * 16 * 9,
        "head": h * w * 1 * 8 * 1,
    }


# ---------------------------------------------------------------- optimiser

def adam_scalar(values, grads_per_step, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Adam on a list of Python floats, one element at a time."""
    p = list(values)
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t, grads in enumerate(grads_per_step, start=1):
        for i, g in enumerate(grads):
            m[i] = b1 * m[i] + (1.0 - b1) * g
            v[i] = b2 * v[i] + (1.0 - b2) * (g * g)
            mhat = m[i] / (1.0 - b1**t)
            vhat = v[i] / (1.0 - b2**t)
            p[i] = p[i] - lr * mhat / (math.sqrt(vhat) + eps)
    return p


# ---------------------------------------------------------------- images

def distance_brute(instances: np.ndarray) -> np.ndarray:
    """Per-instance normalised distance via all-pairs nearest non-instance pixel."""
    h, w = instances.shape
    out = np.zeros((h, w))
    for lab in np.unique(instances):
        if lab == 0:
            continue
        inside = np.argwhere(instances == lab)
        outside = np.argwhere(instances != lab)
        d = np.array([min(math.hypot(r - rr, c - cc) for rr, cc in outside) for r, c in inside])
        out[tuple(inside.T)] = d / d.max()
    return out


def flood_components(mask: np.ndarray) -> list[set[tuple[int, int]]]:
    """4-connected components by breadth-first flood fill."""
    h, w = mask.shape
    seen = np.zeros_like(mask, bool)
    comps = []
    for r, c in itertools.product(range(h), range(w)):
        if not mask[r, c] or seen[r, c]:
            continue
        comp, queue = set(), deque([(r, c)])
        seen[r, c] = True
        while queue:
            y, x = queue.popleft()
            comp.add((y, x))
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    queue.append((ny, nx))
        comps.append(comp)
    return comps


# ---------------------------------------------------------------- metrics

def _pixel_sets(lm: np.ndarray) -> dict[int, set]:
    sets: dict[int, set] = {}
    for idx in zip(*np.nonzero(lm)):
        sets.setdefault(int(lm[idx]), set()).add(tuple(int(i) for i in idx))
    return dict(sorted(sets.items()))


def aji_sets(gt: np.ndarray, pred: np.ndarray) -> Fraction:
    """AJI from pixel sets: ascending GT order, best overlapping unused
    prediction by exact IoU (smaller label on ties)."""
    G, P = _pixel_sets(gt), _pixel_sets(pred)
    if not G and not P:
        return Fraction(1)
    used: set[int] = set()
    c = u = 0
    for g in G.values():
        best, best_iou = None, Fraction(0)
        for lab, p in P.items():
            if lab in used:
                continue
            iou = Fraction(len(g & p), len(g | p))
            if iou > best_iou:
                best, best_iou = lab, iou
        if best is None:
            u += len(g)
        else:
            used.add(best)
            c += len(g & P[best])
            u += len(g | P[best])
    u += sum(len(p) for lab, p in P.items() if lab not in used)
    return Fraction(c, u) if u else Fraction(0)


def pq_sets(gt: np.ndarray, pred: np.ndarray, threshold: float = 0.5):
    """(pq, dq, sq, matches) from pixel sets with an IoU > threshold rule."""
    G, P = _pixel_sets(gt), _pixel_sets(pred)
    if not G and not P:
        return 1.0, 1.0, 1.0, []
    matches, ious = [], []
    for gl, g in G.items():
        for pl, p in P.items():
            iou = len(g & p) / len(g | p)
            if iou > threshold:
                matches.append((gl, pl))
                ious.append(iou)
    tp = len(matches)
    fp, fn = len(P) - tp, len(G) - tp
    denom = tp + 0.5 * fp + 0.5 * fn
    s = 0.0
    for v in ious:
        s += v
    return s / denom, tp / denom, (s / tp if tp else 0.0), matches
