"""
Exiting early
=============

When the small model is confident and its answer survives an aggressively
pruned rerun of itself, skip the large model. Here the small model carries a
shortcut head that misleads it on images crowded with decoys, so some exits
are wrong and the exit criterion matters.
"""
import numpy as np

from cascade_prune.cascade import CascadeConfig, Evaluator, SweepPoint
from cascade_prune.synth import PlantedRecipe, build_planted_pair, dataset_for, default_specs

recipe = PlantedRecipe(shortcut_weight=8.0)
small, large = build_planted_pair(*default_specs(recipe), recipe, seed=0)
data = dataset_for(recipe, 60, seed=9, difficulty=(0, 40))
ev = Evaluator(data, CascadeConfig(small, large))

# %% Small model alone, for reference.
alone = ev.point(SweepPoint(2, 0.05, threshold=0.0, criterion="confidence"))
print(f"small model alone: accuracy {alone.accuracy:.3f}")

# %% Sweep the target exit ratio for two criteria.
print(f"{'exit ratio':>10} {'confidence':>11} {'combined':>9} {'GFLOPs':>8}")
for target in np.linspace(0, 1, 6):
    conf = ev.point(SweepPoint(2, 0.05, target_exit_ratio=target, criterion="confidence"))
    comb = ev.point(SweepPoint(2, 0.05, target_exit_ratio=target, criterion="combined"))
    print(f"{target:>10.1f} {conf.accuracy:>11.3f} {comb.accuracy:>9.3f} "
          f"{comb.mean_flops / 1e9:>8.3f}")
