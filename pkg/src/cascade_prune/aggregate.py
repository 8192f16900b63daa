"""Streaming accumulation of visual-token importance from attention maps.

An :class:`AttentionTrace` is also an attention sink, so it can be handed
straight to :func:`cascade_prune.engine.generate`. Memory is O(N_I) no matter
how many layers, heads or decode steps stream through it.
"""
from __future__ import annotations

import json
import math
from typing import Iterable

import numpy as np

from .errors import TraceError

SUBSET_MODES = ("last_prompt_token", "prompt_only", "generated_only", "prompt_and_generated")

_ROW_TOL = 1e-6


def first_layers(num_layers: int, fraction: float) -> frozenset[int]:
    """Bottom ``floor(fraction * num_layers)`` layers, at least one."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    count = max(1, math.floor(fraction * num_layers + 1e-9))
    return frozenset(range(count))


class AttentionTrace:
    def __init__(self, n_visual: int, n_prompt: int,
                 layer_filter: Iterable[int] | None = None) -> None:
        if n_visual < 1 or n_prompt < 1:
            raise TraceError("n_visual and n_prompt must be positive")
        self.n_visual = int(n_visual)
        self.n_prompt = int(n_prompt)
        self.layer_filter = None if layer_filter is None else frozenset(int(l) for l in layer_filter)
        self.a_prefill = np.zeros(self.n_visual)
        self.a_decode = np.zeros(self.n_visual)
        self.a_last_prompt = np.zeros(self.n_visual)
        self.layers_seen: set[int] = set()
        self.heads_seen = 0
        self.last_prompt_seen = 0
        self.decode_steps_seen = 0
        self._last_query = -1

    def includes(self, layer: int) -> bool:
        return self.layer_filter is None or layer in self.layer_filter

    def _require_layer(self, layer: int) -> None:
        if not self.includes(layer):
            raise TraceError(f"layer {layer} is outside the trace's layer filter")

    def accumulate_prefill(self, attn_map: np.ndarray, layer: int, head: int,
                           positions: np.ndarray | None = None) -> "AttentionTrace":
        """Column-sum the prompt-rows x visual-columns block into ``a_prefill``.

        ``positions`` gives the absolute position of each row/column; omit it
        for an unpruned map of side N_I + N_T.
        """
        self._require_layer(layer)
        attn_map = np.asarray(attn_map, dtype=np.float64)
        n_ctx = self.n_visual + self.n_prompt
        if positions is None:
            if attn_map.shape != (n_ctx, n_ctx):
                raise TraceError(f"expected a {n_ctx}x{n_ctx} map, got {attn_map.shape}")
            positions = np.arange(n_ctx)
        positions = np.asarray(positions)
        if attn_map.ndim != 2 or attn_map.shape != (positions.size, positions.size):
            raise TraceError(f"map shape {attn_map.shape} does not match {positions.size} positions")
        if np.any(np.abs(attn_map.sum(axis=1) - 1.0) > _ROW_TOL):
            raise TraceError("attention map rows must sum to 1")
        prompt_rows = (positions >= self.n_visual) & (positions < n_ctx)
        if not prompt_rows.any():
            raise TraceError("map contains no prompt rows")
        vis_cols = positions < self.n_visual
        block = attn_map[np.ix_(prompt_rows, vis_cols)]
        self.a_prefill[positions[vis_cols]] += block.sum(axis=0)
        last = np.flatnonzero(positions == n_ctx - 1)
        if last.size:
            self.a_last_prompt[positions[vis_cols]] += attn_map[last[0], vis_cols]
            self.last_prompt_seen += 1
        self.layers_seen.add(int(layer))
        self.heads_seen += 1
        return self

    def accumulate_decode(self, attn_vec: np.ndarray, layer: int, head: int,
                          positions: np.ndarray | None = None) -> "AttentionTrace":
        """Add the visual part of one generated token's attention to ``a_decode``."""
        self._require_layer(layer)
        attn_vec = np.asarray(attn_vec, dtype=np.float64)
        if attn_vec.ndim != 1:
            raise TraceError("decode attention must be a vector")
        if positions is None:
            if attn_vec.size < self.n_visual + self.n_prompt + 1:
                raise TraceError(
                    f"decode vector of length {attn_vec.size} cannot cover "
                    f"{self.n_visual} visual + {self.n_prompt} prompt tokens and itself"
                )
            positions = np.arange(attn_vec.size)
        positions = np.asarray(positions)
        if positions.size != attn_vec.size:
            raise TraceError("decode vector and positions differ in length")
        vis = positions < self.n_visual
        self.a_decode[positions[vis]] += attn_vec[vis]
        query = int(positions[-1])
        if query != self._last_query:
            self._last_query = query
            self.decode_steps_seen += 1
        return self

    # sink protocol
    def on_prefill(self, layer: int, attn: np.ndarray, positions: np.ndarray) -> None:
        if not self.includes(layer):
            return
        for head in range(attn.shape[0]):
            self.accumulate_prefill(attn[head], layer, head, positions)

    def on_decode(self, layer: int, attn: np.ndarray, positions: np.ndarray) -> None:
        if not self.includes(layer):
            return
        for head in range(attn.shape[0]):
            self.accumulate_decode(attn[head], layer, head, positions)

    def finalize(self, decode_weight: float = 1.0) -> np.ndarray:
        """Combined importance ``a_prefill + decode_weight * a_decode``."""
        if self.heads_seen == 0:
            raise TraceError("no prefill attention has been accumulated")
        return self.a_prefill + decode_weight * self.a_decode

    def subset_importance(self, mode: str) -> np.ndarray:
        if mode not in SUBSET_MODES:
            raise TraceError(f"unknown token subset {mode!r}; expected one of {SUBSET_MODES}")
        if mode == "last_prompt_token":
            if self.last_prompt_seen == 0:
                raise TraceError("last prompt token row was never captured")
            return self.a_last_prompt.copy()
        if self.heads_seen == 0:
            raise TraceError("no prefill attention has been accumulated")
        if mode == "prompt_only":
            return self.a_prefill.copy()
        if mode == "generated_only":
            if self.decode_steps_seen == 0:
                raise TraceError("no decode attention has been accumulated")
            return self.a_decode.copy()
        return self.finalize()

    def __add__(self, other):
        raise TraceError("traces from different inferences cannot be merged")

    def to_dict(self) -> dict:
        return {
            "n_visual": self.n_visual,
            "n_prompt": self.n_prompt,
            "a_prefill": self.a_prefill.tolist(),
            "a_decode": self.a_decode.tolist(),
            "counters": {
                "layers_seen": sorted(self.layers_seen),
                "heads_seen": self.heads_seen,
                "decode_steps_seen": self.decode_steps_seen,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def subset_importance(trace: AttentionTrace, mode: str) -> np.ndarray:
    return trace.subset_importance(mode)


def finalize(trace: AttentionTrace) -> np.ndarray:
    return trace.finalize()
