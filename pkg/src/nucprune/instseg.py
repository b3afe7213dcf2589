"""Merge a foreground probability map and a distance map into nucleus
instances: smoothing sized by the average nucleus area, local-maxima
seeds, marker-controlled watershed, small-object removal, hole filling."""
from __future__ import annotations

import heapq
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

FOUR_CONN = ndimage.generate_binary_structure(2, 1)
EIGHT_CONN = ndimage.generate_binary_structure(2, 2)
FALLBACK_AREA = 100.0


@dataclass(frozen=True)
class MergeConfig:
    seg_threshold: float = 0.5
    min_area: int = 30
    maxima_rel_threshold: float = 0.1
    sigma_scale: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.seg_threshold < 1.0:
            raise ValueError("seg_threshold must lie in (0, 1)")
        if self.min_area < 0:
            raise ValueError("min_area must be >= 0")


def _2d(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"expected an (H, W) or (1, H, W) map, got shape {a.shape}")
    return a


def estimate_avg_nucleus_area(seg_prob: np.ndarray, threshold: float = 0.5, min_area: int = 30) -> float:
    """Mean area of the 4-connected foreground components of size >= ``min_area``.

    Returns ``FALLBACK_AREA`` when there is no such component.
    """
    labels, n = ndimage.label(_2d(seg_prob) > threshold, FOUR_CONN)
    if n == 0:
        return FALLBACK_AREA
    areas = np.bincount(labels.ravel())[1:]
    areas = areas[areas >= min_area]
    return float(areas.mean()) if areas.size else FALLBACK_AREA


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(dist: np.ndarray, avg_area: float, sigma_scale: float = 0.5) -> np.ndarray:
    """Separable Gaussian with sigma = sigma_scale * equivalent-disk radius.

    Borders use half-sample symmetric reflection, which conserves the map's
    total mass.
    """
    if avg_area <= 0:
        raise ValueError("avg_area must be positive")
    sigma = sigma_scale * math.sqrt(avg_area / math.pi)
    k = gaussian_kernel(sigma)
    out = _2d(dist).astype(np.float64)
    for axis in (0, 1):
        out = ndimage.correlate1d(out, k, axis=axis, mode="reflect")
    return out


def find_local_maxima(smoothed: np.ndarray, rel_threshold: float = 0.1) -> list[tuple[int, int]]:
    """Seeds at 8-neighbourhood maxima above ``rel_threshold * max``.

    Adjacent candidates (plateaus) collapse into one seed at their
    lexicographically smallest pixel. Seeds come back sorted.
    """
    a = _2d(smoothed).astype(np.float64)
    peak = a.max() if a.size else 0.0
    if peak <= 0:
        return []
    neigh_max = ndimage.maximum_filter(a, footprint=EIGHT_CONN, mode="constant", cval=-np.inf)
    cand = (a >= neigh_max) & (a > rel_threshold * peak)
    labels, n = ndimage.label(cand, EIGHT_CONN)
    seeds = []
    for sl, lab in zip(ndimage.find_objects(labels), range(1, n + 1)):
        ys, xs = np.nonzero(labels[sl] == lab)
        # np.nonzero scans row-major, so the first hit is the smallest (row, col)
        seeds.append((int(ys[0] + sl[0].start), int(xs[0] + sl[1].start)))
    return sorted(seeds)


def watershed(smoothed: np.ndarray, seeds, foreground: np.ndarray) -> np.ndarray:
    """Priority-flood from ``seeds`` over ``foreground``, highest values first.

    Seeds get labels 1..K in the given order. Ties in priority go to the
    smaller label, then to the smaller (row, col). Pixels not reachable from
    a seed through 4-connected foreground stay 0.
    """
    a = _2d(smoothed).astype(np.float64)
    fg = _2d(foreground).astype(bool)
    h, w = fg.shape
    labels = np.zeros((h, w), dtype=np.int32)
    is_seed = np.zeros((h, w), dtype=bool)
    heap: list[tuple[float, int, int, int]] = []
    dropped = 0
    for r, c in seeds:
        if not fg[r, c] or is_seed[r, c]:
            dropped += 1
            continue
        is_seed[r, c] = True
        labels[r, c] = len(heap) + 1
        heap.append((-a[r, c], len(heap) + 1, r, c))
    if dropped:
        warnings.warn(f"watershed dropped {dropped} seed(s) outside the foreground", stacklevel=2)
    heapq.heapify(heap)
    while heap:
        _, lab, r, c = heapq.heappop(heap)
        if is_seed[r, c]:
            if labels[r, c] != lab:
                continue
        elif labels[r, c]:
            continue
        labels[r, c] = lab
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < h and 0 <= nc < w and fg[nr, nc] and not labels[nr, nc]:
                heapq.heappush(heap, (-a[nr, nc], lab, nr, nc))
    return labels


def relabel_sequential(lm: np.ndarray) -> np.ndarray:
    """Map the positive labels of ``lm`` onto 1..K, keeping their order."""
    ids = np.unique(lm)
    ids = ids[ids > 0]
    lut = np.zeros(int(lm.max()) + 1 if lm.size else 1, dtype=np.int32)
    lut[ids] = np.arange(1, ids.size + 1)
    return lut[lm]


def remove_small_objects(lm: np.ndarray, min_area: int = 30) -> np.ndarray:
    """Drop instances with area strictly below ``min_area``; relabel 1..K."""
    lm = _2d(lm).astype(np.int32)
    if not lm.any():
        return lm.copy()
    areas = np.bincount(lm.ravel())
    small = areas < min_area
    small[0] = False
    out = np.where(small[lm], 0, lm)
    return relabel_sequential(out)


def fill_holes(lm: np.ndarray) -> np.ndarray:
    """Absorb background pockets that are enclosed by a single instance.

    A pocket is a 4-connected background component that does not touch the
    image border; it is filled only when every pixel bordering it belongs to
    the same instance.
    """
    lm = _2d(lm).astype(np.int32)
    out = lm.copy()
    bg, n = ndimage.label(lm == 0, FOUR_CONN)
    if n == 0:
        return out
    border = np.unique(np.concatenate([bg[0], bg[-1], bg[:, 0], bg[:, -1]]))
    for sl, idx in zip(ndimage.find_objects(bg), range(1, n + 1)):
        if idx in border:
            continue
        # grow the bounding box by one pixel to see the pocket's rim
        r0, r1 = max(sl[0].start - 1, 0), sl[0].stop + 1
        c0, c1 = max(sl[1].start - 1, 0), sl[1].stop + 1
        pocket = bg[r0:r1, c0:c1] == idx
        rim = ndimage.binary_dilation(pocket, FOUR_CONN) & ~pocket
        owners = np.unique(lm[r0:r1, c0:c1][rim])
        if owners.size == 1 and owners[0] > 0:
            out[r0:r1, c0:c1][pocket] = owners[0]
    return out


def merge(seg_prob: np.ndarray, dist_pred: np.ndarray, cfg: MergeConfig = MergeConfig()) -> np.ndarray:
    """Full merge: area estimate, smoothing, seeds, watershed, clean-up."""
    seg = _2d(seg_prob)
    dist = _2d(dist_pred)
    if seg.shape != dist.shape:
        raise ValueError(f"segmentation map {seg.shape} and distance map {dist.shape} differ in shape")
    foreground = seg > cfg.seg_threshold
    area = estimate_avg_nucleus_area(seg, cfg.seg_threshold, cfg.min_area)
    smoothed = gaussian_smooth(dist, area, cfg.sigma_scale)
    seeds = [s for s in find_local_maxima(smoothed, cfg.maxima_rel_threshold) if foreground[s]]
    labels = watershed(smoothed, seeds, foreground)
    labels = remove_small_objects(labels, cfg.min_area)
    return fill_holes(labels)
