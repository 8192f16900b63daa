"""
Pruning the large model
=======================

Prune the 48-layer planted model after its first k layers, keeping the top R
fraction of visual tokens, and compare three ways of choosing which tokens
survive.
"""
from cascade_prune.cascade import CascadeConfig, Evaluator, SweepPoint
from cascade_prune.synth import PlantedRecipe, build_planted_pair, dataset_for, default_specs

recipe = PlantedRecipe()
small, large = build_planted_pair(*default_specs(recipe), recipe, seed=0)
data = dataset_for(recipe, 60, seed=7, difficulty=(0, 8))

# threshold 2.0 never exits early, so every answer comes from the pruned large model
ev = Evaluator(data, CascadeConfig(small, large), with_consistency=False)
NEVER = 2.0

print(f"{'source':>20} {'k':>3} {'R':>5} {'retention':>9} {'accuracy':>8} {'GFLOPs':>8}")
for k, R in ((19, 0.40), (9, 0.20), (2, 0.05)):
    for source in ("aggregated", "fastv_single_layer", "random"):
        row = ev.point(SweepPoint(k, R, threshold=NEVER, ranking_source=source))
        print(f"{source:>20} {k:>3} {R:>5} {row.avg_retention:>9.4f} {row.accuracy:>8.3f} "
              f"{row.mean_flops / 1e9:>8.3f}")

full = ev.point(SweepPoint(48, 1.0, threshold=NEVER))
print(f"{'unpruned':>20} {48:>3} {1.0:>5} {full.avg_retention:>9.4f} {full.accuracy:>8.3f} "
      f"{full.mean_flops / 1e9:>8.3f}")
