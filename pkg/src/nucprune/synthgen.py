"""Seeded synthetic "nuclei" scenes: dark elliptical blobs on a bright,
noisy background, with instance, binary and distance-map targets."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

DISTRIBUTIONS = ("base", "shifted")
MAX_TRIES = 500
FOUR_CONN = ndimage.generate_binary_structure(2, 1)


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    size: tuple[int, int] = (64, 64)
    n_blobs: tuple[int, int] = (4, 7)
    radius: tuple[float, float] = (4.5, 7.0)
    aspect: tuple[float, float] = (0.7, 1.0)
    noise: float = 0.05
    background: float = 0.85
    foreground: float = 0.35
    distribution: str = "base"
    seed: int = 0
    # shifted scenes: min centre distance as a multiple of the summed minor semi-axes
    spacing: float = 1.0

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"distribution must be one of {DISTRIBUTIONS}")
        if self.radius[0] * self.aspect[0] <= 1.0:
            raise ValueError("blob semi-axes must exceed 1 px")
        if self.n_blobs[0] < 0 or self.n_blobs[0] > self.n_blobs[1]:
            raise ValueError(f"bad blob count range {self.n_blobs}")
        h, w = self.size
        if 2 * (self.radius[1] + 2) >= min(h, w):
            raise ValueError(f"radius range {self.radius} does not fit a {h}x{w} canvas")

    @classmethod
    def preset(cls, distribution: str = "base", seed: int = 0, size=(64, 64)) -> "SceneConfig":
        """Default parameters for each distribution.

        The shifted set is denser, has smaller and touching nuclei, lower
        contrast and more noise. Blob counts are quoted for 64x64 and scale
        with canvas area.
        """
        if distribution not in DISTRIBUTIONS:
            raise ValueError(f"distribution must be one of {DISTRIBUTIONS}")
        area = size[0] * size[1] / (64 * 64)
        counts = (4, 7) if distribution == "base" else (7, 11)
        n_blobs = tuple(max(1, round(c * area)) for c in counts)
        if distribution == "base":
            return cls(size=size, n_blobs=n_blobs, seed=seed)
        return cls(size=size, n_blobs=n_blobs, radius=(4.5, 6.0), aspect=(0.8, 1.0),
                   noise=0.07, background=0.78, foreground=0.38,
                   distribution="shifted", seed=seed)


@dataclass
class Scene:
    image: np.ndarray      # (1, H, W) float32 in [0, 1]
    instances: np.ndarray  # (H, W) int32, 0 = background, labels 1..K
    binary: np.ndarray     # (1, H, W) float32 in {0, 1}
    distance: np.ndarray   # (1, H, W) float32 in [0, 1]
    seed: int = 0
    distribution: str = "base"

    @property
    def n_instances(self) -> int:
        return int(self.instances.max())


def _ellipse(shape, cy, cx, a, b, theta) -> np.ndarray:
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def make_distance_target(instances: np.ndarray) -> np.ndarray:
    """Per-instance normalised Euclidean distance to the nearest non-instance pixel."""
    out = np.zeros(instances.shape, dtype=np.float64)
    for lab in np.unique(instances):
        if lab == 0:
            continue
        region = instances == lab
        d = ndimage.distance_transform_edt(region)
        out[region] = d[region] / d[region].max()
    return out.astype(np.float32)


def generate_scene(cfg: SceneConfig) -> Scene:
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.size
    touching = cfg.distribution == "shifted"
    n = int(rng.integers(cfg.n_blobs[0], cfg.n_blobs[1] + 1))
    instances = np.zeros((h, w), dtype=np.int32)
    centers: list[tuple[float, float, float]] = []
    for label in range(1, n + 1):
        for _ in range(MAX_TRIES):
            a = rng.uniform(*cfg.radius)
            b = a * rng.uniform(*cfg.aspect)
            theta = rng.uniform(0, np.pi)
            cy = rng.uniform(a + 1, h - a - 2)
            cx = rng.uniform(a + 1, w - a - 2)
            if any(np.hypot(cy - y, cx - x) < max(2.0, cfg.spacing * (b + r) if touching else 0.0)
                   for y, x, r in centers):
                continue
            blob = _ellipse((h, w), cy, cx, a, b, theta)
            occupied = instances > 0
            if touching:
                # overlap is resolved in favour of earlier blobs
                free = blob & ~occupied
                if free.sum() < 0.8 * blob.sum() or free.sum() < 30:
                    continue
                if ndimage.label(free, FOUR_CONN)[1] != 1:
                    continue
                blob = free
            elif (ndimage.binary_dilation(blob, np.ones((3, 3), bool)) & occupied).any():
                continue
            instances[blob] = label
            centers.append((cy, cx, b))
            break
        else:
            raise PlacementError(f"could not place blob {label} of {n} after {MAX_TRIES} tries")

    fg = instances > 0
    img = np.full((h, w), cfg.background)
    img[fg] = cfg.foreground
    if cfg.noise > 0:
        img = img + rng.normal(0.0, cfg.noise, (h, w))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Scene(
        image=img[None],
        instances=instances,
        binary=fg.astype(np.float32)[None],
        distance=make_distance_target(instances)[None],
        seed=cfg.seed,
        distribution=cfg.distribution,
    )


def scene_seeds(master_seed: int, count: int, distribution: str = "base") -> list[int]:
    ss = np.random.SeedSequence([master_seed, DISTRIBUTIONS.index(distribution)])
    seeds = [int(s) for s in ss.generate_state(count, dtype=np.uint64)]
    if len(set(seeds)) != count:  # astronomically unlikely
        raise RuntimeError("seed collision")
    return seeds


def split_count(count: int, split: float) -> int:
    return min(max(int(round(count * split)), 1), count - 1)


def make_dataset(cfg: SceneConfig, count: int, split: float = 0.8) -> tuple[list[Scene], list[Scene]]:
    """Generate ``count`` scenes with distinct derived seeds, split train/test."""
    if count < 2:
        raise ValueError("need at least two scenes for a train/test split")
    scenes = [generate_scene(replace(cfg, seed=s))
              for s in scene_seeds(cfg.seed, count, cfg.distribution)]
    n_train = split_count(count, split)
    return scenes[:n_train], scenes[n_train:]


def training_pairs(scenes, branch: str) -> list[tuple[np.ndarray, np.ndarray]]:
    """(image, target) pairs for the ``seg`` or ``reg`` branch."""
    if branch == "seg":
        return [(s.image, s.binary) for s in scenes]
    if branch == "reg":
        return [(s.image, s.distance) for s in scenes]
    raise ValueError(f"branch must be 'seg' or 'reg', got {branch!r}")
