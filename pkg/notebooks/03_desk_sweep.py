"""
A small prune-and-retrain sweep
===============================

The full desk run (32 scenes, 300 epochs, 150 retrain epochs) is what the
acceptance suite and the CLI do. This script is the same pipeline through
the library with budgets small enough to finish in a couple of minutes.
Set NUCPRUNE_EPOCHS to scale it up.
"""

# %%
import os

from nucprune.autonet import TrainConfig, build_toy_network, train
from nucprune.experiment import evaluate
from nucprune.pruner import PruneConfig, iter_mag_prune, theoretical_speedup
from nucprune.synthgen import SceneConfig, make_dataset, training_pairs

epochs = int(os.environ.get("NUCPRUNE_EPOCHS", 40))
train_set, test_set = make_dataset(SceneConfig.preset("base", seed=0), 20)
shifted, _ = make_dataset(SceneConfig.preset("shifted", seed=0), 10, 0.5)

nets = {}
for branch, head in (("seg", "sigmoid"), ("reg", "linear")):
    net = build_toy_network(head, seed=0)
    _, hist = train(net, training_pairs(train_set, branch), TrainConfig(epochs=epochs, seed=0))
    nets[branch] = net
    print(f"{branch}: loss {hist[0]:.4f} -> {hist[-1]:.4f}")

base = evaluate(nets["seg"], nets["reg"], test_set)
print("dense:", base)

# %%
retrain = TrainConfig(epochs=max(1, epochs // 2), seed=0)
results = {}
for method in ("layerwise", "networkwide"):
    per_branch = {b: iter_mag_prune(nets[b], PruneConfig(method, 8, retrain), training_pairs(train_set, b))
                  for b in ("seg", "reg")}
    for (cr, seg_net, _), (_, reg_net, _) in zip(per_branch["seg"], per_branch["reg"]):
        results[method, cr] = (evaluate(seg_net, reg_net, test_set), evaluate(seg_net, reg_net, shifted),
                               theoretical_speedup(seg_net).speedup)

# %%
print("method       CR   AJI    PQ    shifted AJI  speedup")
for (method, cr), (sc, sh, sp) in sorted(results.items()):
    print(f"{method:11s} {cr:3d}  {sc.aji:.3f}  {sc.pq:.3f}  {sh.aji:11.3f}  {sp:7.2f}")

# %% [markdown]
# With short budgets the ranking between methods is noisy. At the full
# budget layer-wise holds up better at CR 2, and network-wide buys less
# speedup for the same sparsity.
