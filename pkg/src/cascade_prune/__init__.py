"""Small-model guided visual-token pruning and early exiting on toy transformers."""
from .aggregate import AttentionTrace, SUBSET_MODES
from .cascade import (CascadeConfig, CascadeOutcome, CostReport, SweepPoint, evaluate,
                      flops_forward, run_cascade)
from .engine import (EOS_ID, GenerationResult, KvCache, Model, ModelSpec, TokenLayout,
                     WorkLog, build_model, decode_step, generate, load_model, prefill,
                     prune_at_layer, save_model, teacher_forced_probs)
from .errors import (CapacityError, CascadePruneError, ConfigError, ConstructionError,
                     InvalidDirectiveError, RankingError, ScoreError, TraceError)
from .exit_gate import CRITERIA, ExitDecision, calibrate_threshold, decide
from .pruner import PruneDirective, avg_retention, fastv_rank, make_directive, random_rank, rank_tokens
from .synth import (NeedleInstance, PlantedRecipe, build_planted_pair, gen_needle_dataset,
                    heatmap_matrix)

__version__ = "0.1.0"

__all__ = [
    "AttentionTrace", "SUBSET_MODES",
    "CascadeConfig", "CascadeOutcome", "CostReport", "SweepPoint", "evaluate",
    "flops_forward", "run_cascade",
    "EOS_ID", "GenerationResult", "KvCache", "Model", "ModelSpec", "TokenLayout", "WorkLog",
    "build_model", "decode_step", "generate", "load_model", "prefill", "prune_at_layer",
    "save_model", "teacher_forced_probs",
    "CapacityError", "CascadePruneError", "ConfigError", "ConstructionError",
    "InvalidDirectiveError", "RankingError", "ScoreError", "TraceError",
    "CRITERIA", "ExitDecision", "calibrate_threshold", "decide",
    "PruneDirective", "avg_retention", "fastv_rank", "make_directive", "random_rank",
    "rank_tokens",
    "NeedleInstance", "PlantedRecipe", "build_planted_pair", "gen_needle_dataset",
    "heatmap_matrix",
]
