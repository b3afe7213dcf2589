"""
Iterative magnitude pruning on the toy network
==============================================

Walks through the halving schedule on an untrained toy network and compares
how the two pruning methods spend their FLOPs budget. No training here, so
it runs in about a second.
"""

# %%
import numpy as np

from nucprune.autonet import build_toy_network
from nucprune.pruner import (ConnectivityLoss, PruneConfig, flops_count, iter_mag_prune,
                             prune_layerwise, theoretical_speedup)

net = build_toy_network("sigmoid", seed=0)
flops = flops_count(net, (1, 64, 64))
for name, f in flops.items():
    print(f"{name:5s} {f:>10,d} MACs  {net.params[name + '.weight'].size:>5d} weights")
print(f"total {sum(flops.values()):,d}")

# %% [markdown]
# Cost per weight differs by layer: a full-resolution weight (enc1, dec1)
# runs 4096 times per image, a bottleneck weight only 256 times.

# %%
def skip_training(net, data, cfg):
    return net, []


sweeps = {m: iter_mag_prune(net, PruneConfig(m, 32), [None], trainer=skip_training)
          for m in ("layerwise", "networkwide")}
print(" CR  layerwise  networkwide")
for (cr, lnet, lrep), (_, nnet, nrep) in zip(sweeps["layerwise"], sweeps["networkwide"]):
    print(f"{cr:3d}  {theoretical_speedup(lnet).speedup:9.3f}  {theoretical_speedup(nnet).speedup:11.3f}"
          f"   sparsity {lrep.sparsity:.4f} / {nrep.sparsity:.4f}")

# %% [markdown]
# Both methods remove the same number of weights, but network-wide pruning
# ranks them together. With fan-in scaled initialisation the few enc1
# weights are the largest, so they survive while the cheap bottleneck
# weights go first. The dropped weights cost fewer FLOPs, hence the lower
# speedup. Untrained, this empties whole layers.

# %%
_, nw32, _ = sweeps["networkwide"][-1]
for layer in nw32.prunable:
    w = nw32.params[layer.weight]
    print(f"{layer.name:5s} keeps {np.count_nonzero(w) / w.size:6.2%}")

# %% [markdown]
# Past CR 64 the per-layer quota empties the first encoder layer and
# layer-wise pruning has to stop.

# %%
try:
    iter_mag_prune(net, PruneConfig("layerwise", 128), [None], trainer=skip_training)
except ConnectivityLoss as exc:
    print(exc, "- checkpoints kept:", [cr for cr, _, _ in exc.checkpoints])
try:
    prune_layerwise(net, 0.99)
except ConnectivityLoss as exc:
    print("one-shot 99%:", exc)
