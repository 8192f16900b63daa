"""
Where the small model looks
===========================

Build a planted small/large pair, run the small model on one needle
instance, and compare the aggregated attention map against the single-layer
map a FastV-style ranker would use.
"""
import numpy as np

from cascade_prune.aggregate import AttentionTrace
from cascade_prune.engine import generate
from cascade_prune.pruner import fastv_trace, rank_tokens
from cascade_prune.synth import (PlantedRecipe, build_planted_pair, dataset_for, default_specs,
                                 heatmap_matrix)

recipe = PlantedRecipe()
small, large = build_planted_pair(*default_specs(recipe), recipe, seed=0)
inst = dataset_for(recipe, 1, seed=3, difficulty=6)[0]
print(f"grid {inst.grid}, queried cell {inst.query_cell}, answer token {inst.answer_id}")

# %% Aggregate over every layer, head, prompt row and generated row.
trace = AttentionTrace(inst.layout.n_visual, inst.layout.n_prompt)
gen = generate(small, inst.layout, 4, trace)
heat = heatmap_matrix(trace.finalize(), inst.grid)
print("small model answer:", gen.answer_ids)
np.set_printoptions(precision=2, suppress=True, linewidth=120)
print(heat)

# %% The same image seen through layer 2 of the large model only.
tap = fastv_trace(inst.layout.n_visual, inst.layout.n_prompt, layer=1)
generate(large, inst.layout, 1, tap)
single = tap.subset_importance("last_prompt_token")

# %% Where does the queried cell land in each ranking?
for name, scores in (("aggregated (small)", trace.finalize()), ("single layer (large)", single)):
    rank = rank_tokens(scores).index(inst.query_cell)
    print(f"{name:>22}: queried cell ranked #{rank + 1} of {inst.layout.n_visual}")
