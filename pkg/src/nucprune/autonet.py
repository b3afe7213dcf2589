"""Toy two-branch encoder-decoder: architecture, losses, Adam and training.

Both branches share one topology and differ only in the output head:

    enc1  conv3x3  1 -> 8   + relu          (64x64)
          maxpool2
    enc2  conv3x3  8 -> 16  + relu          (32x32)
          maxpool2
    bott  conv3x3 16 -> 16  + relu          (16x16)
          upsample2, concat enc2
    dec2  conv3x3 32 -> 8   + relu          (32x32)
          upsample2, concat enc1
    dec1  conv3x3 16 -> 8   + relu          (64x64)
    head  conv1x1  8 -> 1   + sigmoid | identity

The spatial sizes in brackets assume a 64x64 input; any size divisible by 4
works.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T

log = logging.getLogger(__name__)

HEADS = ("sigmoid", "linear")
DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class Layer:
    """One weight-carrying layer.

    ``scale`` is the spatial down-sampling factor of the layer's output
    relative to the network input; it lets FLOP counting work without
    running a forward pass. ``kind`` is ``"conv"`` or ``"dense"``.
    """

    name: str
    kind: str
    weight: str
    bias: str | None
    scale: int = 1
    prunable: bool = True


@dataclass
class Network:
    layers: list[Layer]
    params: dict[str, np.ndarray]
    head: str = "linear"
    masks: dict[str, np.ndarray] = field(default_factory=dict)
    arch: str | None = None

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def prunable(self) -> list[Layer]:
        return [l for l in self.layers if l.prunable]

    def apply_masks(self, masks: dict[str, np.ndarray] | None = None) -> None:
        """Install ``masks`` (if given) and zero every masked-out weight."""
        if masks is not None:
            for name, m in masks.items():
                if m.shape != self.params[name].shape:
                    raise T.ShapeError(f"mask for {name!r} has shape {m.shape}, "
                                       f"parameter has {self.params[name].shape}")
            self.masks = {k: np.asarray(v, dtype=bool).copy() for k, v in masks.items()}
        for name, m in self.masks.items():
            p = self.params[name]
            self.params[name] = np.where(m, p, 0).astype(p.dtype)


# Channel plan of the toy network: name -> (c_in, c_out, k, scale)
TOY_LAYERS = {
    "enc1": (1, 8, 3, 1),
    "enc2": (8, 16, 3, 2),
    "bott": (16, 16, 3, 4),
    "dec2": (32, 8, 3, 2),
    "dec1": (16, 8, 3, 1),
    "head": (8, 1, 1, 1),
}


def toy_param_count() -> int:
    return sum(co * ci * k * k + co for ci, co, k, _ in TOY_LAYERS.values())


def build_toy_network(head: str, seed: int) -> Network:
    """He-uniform initialised toy network; biases start at zero.

    The 1x1 output projection is kept out of the prunable set: it has only
    eight weights, so uniform per-layer pruning would empty it at CR 16.
    """
    if head not in HEADS:
        raise ValueError(f"head must be one of {HEADS}, got {head!r}")
    rng = np.random.default_rng(seed)
    layers, params = [], {}
    for name, (ci, co, k, scale) in TOY_LAYERS.items():
        bound = math.sqrt(6.0 / (ci * k * k))
        params[f"{name}.weight"] = rng.uniform(-bound, bound, (co, ci, k, k)).astype(np.float32)
        params[f"{name}.bias"] = np.zeros(co, dtype=np.float32)
        layers.append(Layer(name, "conv", f"{name}.weight", f"{name}.bias", scale,
                            prunable=name != "head"))
    return Network(layers=layers, params=params, head=head, arch="toy-unet")


def _conv(net: Network, name: str, x: np.ndarray, cache: dict) -> np.ndarray:
    slot: dict = {}
    out = T.conv2d(x, net.params[f"{name}.weight"], net.params[f"{name}.bias"], slot)
    cache[f"{name}.cols"] = slot["cols"]
    return out


def forward(net: Network, x: np.ndarray, cache: dict | None = None) -> np.ndarray:
    """Run the toy network on ``(N, 1, H, W)`` or ``(1, H, W)`` input.

    Pass a dict as ``cache`` to keep the activations ``backward`` needs.
    """
    if net.arch != "toy-unet":
        raise ValueError(f"forward() only knows the toy architecture, got arch={net.arch!r}")
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise T.ShapeError(f"input H, W must be divisible by 4, got {x.shape[2:]}")
    c = {} if cache is None else cache
    c["x"] = x
    c["a1"] = _conv(net, "enc1", x, c)
    c["e1"] = T.relu(c["a1"])
    c["p1"] = T.maxpool2(c["e1"])
    c["a2"] = _conv(net, "enc2", c["p1"], c)
    c["e2"] = T.relu(c["a2"])
    c["p2"] = T.maxpool2(c["e2"])
    c["a3"] = _conv(net, "bott", c["p2"], c)
    c["b"] = T.relu(c["a3"])
    c["cat2"] = np.concatenate([T.upsample_nearest2(c["b"]), c["e2"]], axis=1)
    c["a4"] = _conv(net, "dec2", c["cat2"], c)
    c["d2"] = T.relu(c["a4"])
    c["cat1"] = np.concatenate([T.upsample_nearest2(c["d2"]), c["e1"]], axis=1)
    c["a5"] = _conv(net, "dec1", c["cat1"], c)
    c["d1"] = T.relu(c["a5"])
    c["z"] = _conv(net, "head", c["d1"], c)
    out = T.sigmoid(c["z"]) if net.head == "sigmoid" else T.identity(c["z"])
    c["out"] = out
    return out[0] if squeeze else out


def backward(net: Network, cache: dict, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given d(loss)/d(output) and a forward cache."""
    c = cache
    g = grad_out if grad_out.ndim == 4 else grad_out[None]
    grads: dict[str, np.ndarray] = {}

    def conv_back(name, g, inp, input_grad=True):
        gx, gw, gb = T.conv2d_backward(g, inp, net.params[f"{name}.weight"],
                                       c[f"{name}.cols"], input_grad)
        grads[f"{name}.weight"], grads[f"{name}.bias"] = gw, gb
        return gx

    if net.head == "sigmoid":
        g = T.sigmoid_backward(g, c["out"])
    g = conv_back("head", g, c["d1"])
    g = conv_back("dec1", T.relu_backward(g, c["a5"]), c["cat1"])
    g_up1, g_e1_skip = g[:, :8], g[:, 8:]
    g = conv_back("dec2", T.relu_backward(T.upsample_nearest2_backward(g_up1), c["a4"]), c["cat2"])
    g_up2, g_e2_skip = g[:, :16], g[:, 16:]
    g = conv_back("bott", T.relu_backward(T.upsample_nearest2_backward(g_up2), c["a3"]), c["p2"])
    g = T.maxpool2_backward(g, c["e2"]) + g_e2_skip
    g = conv_back("enc2", T.relu_backward(g, c["a2"]), c["p1"])
    g = T.maxpool2_backward(g, c["e1"]) + g_e1_skip
    conv_back("enc1", T.relu_backward(g, c["a1"]), c["x"], input_grad=False)
    return grads


# ---------------------------------------------------------------- losses

def _same_shape(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise T.ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")


def dice_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Smoothed soft Dice loss ``1 - (2*sum(p*t) + 1) / (sum(p) + sum(t) + 1)``."""
    _same_shape(pred, target)
    p = pred.astype(np.float64)
    t = target.astype(np.float64)
    num = 2.0 * (p * t).sum() + DICE_SMOOTH
    den = p.sum() + t.sum() + DICE_SMOOTH
    grad = -(2.0 * t * den - num) / den**2
    return float(1.0 - num / den), grad.astype(pred.dtype)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    _same_shape(pred, target)
    diff = pred.astype(np.float64) - target
    return float(np.mean(diff**2)), (2.0 * diff / diff.size).astype(pred.dtype)


LOSSES = {"sigmoid": dice_loss, "linear": mse_loss}


# ---------------------------------------------------------------- optimisation

def cosine_lr(epoch: int, total_epochs: int, lr0: float, lr_min: float = 0.0) -> float:
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    masks: dict[str, np.ndarray] | None = None,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Gradients at masked-out positions are discarded and those weights are
    re-zeroed after the update.
    """
    masks = masks or {}
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        mask = masks.get(name)
        if mask is not None:
            g = np.where(mask, g, 0)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= update.astype(p.dtype, copy=False)
        if mask is not None:
            p[~mask] = 0


@dataclass
class TrainConfig:
    epochs: int = 300
    initial_lr: float = 0.001
    batch_size: int = 2
    min_lr: float = 0.0
    seed: int = 0
    augment_flips: bool = True
    early_stop: bool = False
    patience: int = 20
    min_rel_improvement: float = 1e-4

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.min_lr <= self.initial_lr:
            raise ValueError("need 0 <= min_lr <= initial_lr")


def flip_pair(image: np.ndarray, target: np.ndarray, horizontal: bool, vertical: bool):
    """Flip (C, H, W) image and target identically."""
    if horizontal:
        image, target = image[..., ::-1], target[..., ::-1]
    if vertical:
        image, target = image[..., ::-1, :], target[..., ::-1, :]
    return image, target


def train(
    net: Network,
    dataset: Sequence[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
) -> tuple[Network, list[float]]:
    """Train ``net`` in place on (image, target) pairs of shape (1, H, W).

    Returns the network and its per-epoch mean batch loss. Installed masks
    are enforced after every optimiser step.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    loss_fn = LOSSES[net.head]
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    net.apply_masks()
    history: list[float] = []
    best, stale = math.inf, 0
    n = len(dataset)
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.initial_lr, cfg.min_lr)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            images, targets = [], []
            for i in order[start:start + cfg.batch_size]:
                img, tgt = dataset[i]
                if cfg.augment_flips:
                    hflip, vflip = rng.random(2) < 0.5
                    img, tgt = flip_pair(img, tgt, hflip, vflip)
                images.append(img)
                targets.append(tgt)
            x = np.stack(images).astype(np.float32)
            y = np.stack(targets).astype(np.float32)
            cache: dict = {}
            out = forward(net, x, cache)
            loss, grad = loss_fn(out, y)
            grads = backward(net, cache, grad)
            adam_step(state, net.params, grads, lr, net.masks)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        if cfg.early_stop:
            if history[-1] < best * (1.0 - cfg.min_rel_improvement) or best == math.inf:
                best, stale = min(best, history[-1]), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("early stop at epoch %d (loss %.5f)", epoch, history[-1])
                    break
    return net, history


def predict(net: Network, image: np.ndarray) -> np.ndarray:
    """(1, H, W) image -> (H, W) output map."""
    return forward(net, image.astype(np.float32))[0]
