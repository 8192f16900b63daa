"""Rankings, kept-index sets and retention arithmetic for visual-token pruning."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .aggregate import AttentionTrace
from .errors import InvalidDirectiveError, RankingError

RANKING_SOURCES = ("aggregated", "fastv_single_layer", "random", "oracle_large")


@dataclass(frozen=True)
class PruneDirective:
    """Where and how hard to prune.

    ``prune_layer`` counts the layers that still see every visual token
    (1-indexed, so k=2 means layers 1 and 2 are full). The same integer is the
    0-indexed engine layer at which dropped tokens disappear.
    """

    prune_layer: int
    retain_fraction: float
    ranking: tuple[int, ...]
    kept: tuple[int, ...]
    source: str
    num_layers: int | None = None

    @property
    def engine_layer(self) -> int | None:
        if self.num_layers is not None and self.prune_layer >= self.num_layers:
            return None
        return self.prune_layer

    def to_dict(self) -> dict:
        return {"source": self.source, "k": self.prune_layer,
                "R": self.retain_fraction, "kept": list(self.kept)}


def kept_count(n_visual: int, retain_fraction: float) -> int:
    """``max(1, round_half_up(R * N_I))``."""
    return max(1, math.floor(retain_fraction * n_visual + 0.5 + 1e-9))


def rank_tokens(importance: Sequence[float]) -> tuple[int, ...]:
    """Indices by descending importance; ties go to the lower index."""
    importance = np.asarray(importance, dtype=np.float64)
    if importance.ndim != 1 or importance.size == 0:
        raise RankingError("importance must be a nonempty vector")
    if not np.all(np.isfinite(importance)):
        raise RankingError("importance contains NaN or infinite entries")
    return tuple(int(i) for i in np.argsort(-importance, kind="stable"))


def make_directive(ranking: Sequence[int], retain_fraction: float, prune_layer: int,
                   n_visual: int, source: str = "aggregated",
                   num_layers: int | None = None) -> PruneDirective:
    ranking = tuple(int(i) for i in ranking)
    if sorted(ranking) != list(range(n_visual)):
        raise InvalidDirectiveError(f"ranking is not a permutation of range({n_visual})")
    if not 0 < retain_fraction <= 1:
        raise InvalidDirectiveError(f"retain fraction must lie in (0, 1], got {retain_fraction}")
    if prune_layer < 1 or (num_layers is not None and prune_layer > num_layers):
        raise InvalidDirectiveError(f"prune layer {prune_layer} outside [1, {num_layers or 'L'}]")
    if source not in RANKING_SOURCES:
        raise InvalidDirectiveError(f"unknown ranking source {source!r}")
    count = kept_count(n_visual, retain_fraction)
    return PruneDirective(
        prune_layer=int(prune_layer),
        retain_fraction=float(retain_fraction),
        ranking=ranking,
        kept=tuple(sorted(ranking[:count])),
        source=source,
        num_layers=num_layers,
    )


def _exact(x) -> Fraction:
    return Fraction(str(x)) if isinstance(x, float) else Fraction(x)


def avg_retention(num_layers: int, prune_layer: int, retain_fraction, exact: bool = False):
    """Average visual-token retention over the stack: ``(k + (L - k) * R) / L``.

    Evaluated in rational arithmetic; pass ``exact=True`` to get the Fraction.
    """
    if not 1 <= prune_layer <= num_layers:
        raise InvalidDirectiveError(f"prune layer {prune_layer} outside [1, {num_layers}]")
    value = (prune_layer + (num_layers - prune_layer) * _exact(retain_fraction)) / num_layers
    return value if exact else float(value)


def fastv_trace(n_visual: int, n_prompt: int, layer: int) -> AttentionTrace:
    """A trace that only listens to one (0-indexed) layer, for the FastV baseline."""
    return AttentionTrace(n_visual, n_prompt, layer_filter={layer})


def fastv_rank(single_layer_trace: AttentionTrace) -> tuple[int, ...]:
    """Rank by the last prompt token's attention in a single layer."""
    lf = single_layer_trace.layer_filter
    if lf is None or len(lf) != 1:
        raise RankingError("FastV ranking needs a trace restricted to exactly one layer")
    if single_layer_trace.last_prompt_seen == 0:
        raise RankingError(f"layer {next(iter(lf))} was never captured")
    return rank_tokens(single_layer_trace.subset_importance("last_prompt_token"))


def random_rank(n_visual: int, seed: int) -> tuple[int, ...]:
    rng = np.random.default_rng(seed)
    return tuple(int(i) for i in rng.permutation(n_visual))
