"""Planted model pairs and needle-in-a-grid tasks.

A visual token is a symbol sitting at a grid cell; its cell is carried by its
absolute position. The last prompt token names a cell, and the right answer is
the symbol found there. Weights are written by hand so that, with no training:

* a router head in layer 0 copies the queried cell from the query token into
  every later non-visual position;
* one designated head per relevance layer matches that cell against the visual
  positional code (logit gap solved in closed form for the target
  concentration) and copies the symbol it finds into an output subspace;
* an AND unit in the layer-0 MLP fires on a symbol token at a non-visual
  position and drives EOS, so answers are one symbol followed by EOS;
* every other head and MLP unit is small seeded noise writing only into a junk
  subspace that no planted reader looks at.

The residual stream is a direct sum of one-hot subspaces, listed in
:class:`Subspaces`.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .engine import EOS_ID, Model, ModelSpec, TokenLayout, build_model, generate, weight_shapes
from .errors import ConstructionError

FIDELITIES = ("faithful", "corrupted")
_ROUTER_GAP = 30.0
_EOS_MARGIN = 12.0


@dataclass(frozen=True)
class Vocab:
    """EOS, then symbols, then one query token per cell, then filler words."""

    n_symbols: int
    n_cells: int
    n_fillers: int

    @property
    def size(self) -> int:
        return 1 + self.n_symbols + self.n_cells + self.n_fillers

    def symbol(self, s: int) -> int:
        return 1 + s

    def query(self, cell: int) -> int:
        return 1 + self.n_symbols + cell

    def filler(self, w: int) -> int:
        return 1 + self.n_symbols + self.n_cells + w

    def symbol_of(self, token_id: int) -> int | None:
        s = token_id - 1
        return s if 0 <= s < self.n_symbols else None


@dataclass(frozen=True)
class Subspaces:
    rows: int
    cols: int
    n_symbols: int
    model_dim: int

    @property
    def _offsets(self) -> dict[str, int]:
        g = self.rows + self.cols
        return {"pos": 0, "qry": g, "sym": 2 * g, "out": 2 * g + self.n_symbols,
                "nonvis": 2 * g + 2 * self.n_symbols}

    @property
    def pos(self) -> slice:
        o = self._offsets["pos"]
        return slice(o, o + self.rows + self.cols)

    @property
    def qry(self) -> slice:
        o = self._offsets["qry"]
        return slice(o, o + self.rows + self.cols)

    @property
    def sym(self) -> slice:
        o = self._offsets["sym"]
        return slice(o, o + self.n_symbols)

    @property
    def out(self) -> slice:
        o = self._offsets["out"]
        return slice(o, o + self.n_symbols)

    @property
    def nonvis(self) -> int:
        return self._offsets["nonvis"]

    @property
    def isquery(self) -> int:
        return self.nonvis + 1

    @property
    def eosf(self) -> int:
        return self.nonvis + 2

    @property
    def junk(self) -> slice:
        return slice(self.nonvis + 3, self.model_dim)

    @property
    def required(self) -> int:
        return self.nonvis + 4

    def cell_code(self, cell: int) -> tuple[int, int]:
        """Indices (within a grid-sized block) of the row and column one-hots."""
        return cell // self.cols, self.rows + cell % self.cols


@dataclass(frozen=True)
class PlantedRecipe:
    """Construction parameters shared by a small/large planted pair.

    ``relevance_layers`` (1-indexed) places designated heads in the large
    model; ``small_relevance_layers`` does the same for the small model. Either
    left as ``None`` defaults to the upper part of the stack. ``planted_cells``
    restricts which cells a task may query (``None`` means every cell).
    ``shortcut_weight`` adds a small-model-only head that votes for the symbol
    frequencies of the whole image, which makes the small model fail on
    instances crowded with decoys.
    """

    grid: tuple[int, int] = (8, 8)
    planted_cells: tuple[int, ...] | None = None
    relevance_layers: tuple[int, ...] | None = None
    small_relevance_layers: tuple[int, ...] | None = None
    concentration: float = 0.9
    answer_fidelity: str = "faithful"
    n_symbols: int = 8
    n_fillers: int = 4
    answer_sharpness: float = 6.0
    shortcut_weight: float = 0.0
    noise_scale: float = 0.02

    def __post_init__(self) -> None:
        rows, cols = self.grid
        if rows < 1 or cols < 1:
            raise ConstructionError("grid dimensions must be positive")
        if self.planted_cells is not None:
            cells = tuple(sorted(set(int(c) for c in self.planted_cells)))
            if not cells or cells[0] < 0 or cells[-1] >= rows * cols:
                raise ConstructionError("planted cells must be a nonempty subset of the grid")
            object.__setattr__(self, "planted_cells", cells)
        if not 0.5 < self.concentration < 1:
            raise ConstructionError("concentration must lie in (0.5, 1)")
        if self.answer_fidelity not in FIDELITIES:
            raise ConstructionError(f"answer_fidelity must be one of {FIDELITIES}")
        if self.n_symbols < 2:
            raise ConstructionError("need at least two symbols")
        if self.n_fillers < 0:
            raise ConstructionError("n_fillers must be nonnegative")

    @property
    def n_cells(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.n_symbols, self.n_cells, self.n_fillers)

    def candidate_cells(self) -> tuple[int, ...]:
        return self.planted_cells if self.planted_cells is not None else tuple(range(self.n_cells))

    def to_dict(self) -> dict:
        return {
            "grid": list(self.grid),
            "planted_cells": None if self.planted_cells is None else list(self.planted_cells),
            "relevance_layers": None if self.relevance_layers is None else list(self.relevance_layers),
            "small_relevance_layers": (None if self.small_relevance_layers is None
                                       else list(self.small_relevance_layers)),
            "concentration": self.concentration,
            "answer_fidelity": self.answer_fidelity,
            "n_symbols": self.n_symbols,
            "n_fillers": self.n_fillers,
            "answer_sharpness": self.answer_sharpness,
            "shortcut_weight": self.shortcut_weight,
            "noise_scale": self.noise_scale,
        }


def default_relevance_layers(num_layers: int, role: str) -> tuple[int, ...]:
    if role == "small":
        return tuple(range(num_layers // 2 + 1, num_layers + 1))
    return tuple(sorted({math.ceil(num_layers / 2), math.ceil(3 * num_layers / 4), num_layers}))


def default_specs(recipe: PlantedRecipe, small_layers: int = 4, large_layers: int = 48,
                  num_heads: int = 4, head_dim: int = 16,
                  max_seq_len: int = 96) -> tuple[ModelSpec, ModelSpec]:
    v = recipe.vocab.size
    small = ModelSpec(small_layers, num_heads, num_heads * head_dim, head_dim, v, max_seq_len)
    large = ModelSpec(large_layers, num_heads, num_heads * head_dim, head_dim, v, max_seq_len)
    return small, large


@dataclass(frozen=True)
class PlantedHeads:
    router: tuple[int, int]
    designated: tuple[tuple[int, int], ...]
    shortcut: tuple[int, int] | None
    relevance_gap: float


def _solve_gap(p: float, partial: int, others: int) -> float:
    """Smallest b with e^{2b} / (e^{2b} + partial e^b + others) >= p."""
    disc = (p * partial) ** 2 + 4 * (1 - p) * p * others
    x = (p * partial + math.sqrt(disc)) / (2 * (1 - p))
    return math.log(max(x, 1.0))


def planted_heads(spec: ModelSpec, recipe: PlantedRecipe, role: str) -> PlantedHeads:
    """Where the planted circuits sit in a model of ``spec`` (0-indexed layers)."""
    rows, cols = recipe.grid
    subs = Subspaces(rows, cols, recipe.n_symbols, spec.model_dim)
    if spec.model_dim < subs.required:
        raise ConstructionError(
            f"model_dim {spec.model_dim} too small; the planted layout needs {subs.required}"
        )
    if spec.head_dim < max(rows + cols, recipe.n_symbols):
        raise ConstructionError(
            f"head_dim {spec.head_dim} cannot hold a {rows}x{cols} positional code "
            f"and {recipe.n_symbols} symbols; infeasible concentration"
        )
    if spec.vocab_size < recipe.vocab.size:
        raise ConstructionError(f"vocab_size {spec.vocab_size} < required {recipe.vocab.size}")
    if spec.max_seq_len < recipe.n_cells + 2:
        raise ConstructionError("max_seq_len too short for the grid plus a query")
    chosen = recipe.small_relevance_layers if role == "small" else recipe.relevance_layers
    layers = chosen if chosen is not None else default_relevance_layers(spec.num_layers, role)
    if not layers or min(layers) < 1 or max(layers) > spec.num_layers:
        raise ConstructionError(f"relevance layers {layers} outside [1, {spec.num_layers}]")
    H = spec.num_heads
    designated_head = 1 % H
    if H == 1 and 1 in layers:
        raise ConstructionError("a single-head model cannot host the router and a relevance head in layer 1")
    designated = tuple((l - 1, designated_head) for l in sorted(set(layers)))
    shortcut = None
    if role == "small" and recipe.shortcut_weight > 0:
        shortcut_layer = spec.num_layers - 1
        taken = {h for l, h in designated if l == shortcut_layer} | ({0} if shortcut_layer == 0 else set())
        free = [h for h in range(H) if h not in taken]
        if not free:
            raise ConstructionError("no free head left for the shortcut head")
        shortcut = (shortcut_layer, free[-1])

    # Worst case: the longest allowed sequence, and a generated row whose routed
    # query code has the smallest magnitude the router can deliver.
    n_max = spec.max_seq_len
    router_mass = math.exp(_ROUTER_GAP) / (math.exp(_ROUTER_GAP) + n_max - 1)
    partial = (rows - 1) + (cols - 1)
    others = n_max - 1 - partial
    gap = _solve_gap(recipe.concentration, partial, max(others, 0)) / router_mass
    return PlantedHeads((0, 0), designated, shortcut, gap)


class PlantedWeights:
    """Construction recipe callable accepted by :func:`engine.build_model`."""

    def __init__(self, recipe: PlantedRecipe, role: str) -> None:
        if role not in ("small", "large"):
            raise ConstructionError("role must be 'small' or 'large'")
        self.recipe = recipe
        self.role = role

    def __call__(self, spec: ModelSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
        r = self.recipe
        heads = planted_heads(spec, r, self.role)
        rows, cols = r.grid
        S, N_I = r.n_symbols, r.n_cells
        sub = Subspaces(rows, cols, S, spec.model_dim)
        voc = r.vocab
        C, H, hd, F = spec.model_dim, spec.num_heads, spec.head_dim, spec.ff_dim
        junk = sub.junk
        n_junk = junk.stop - junk.start
        eps = r.noise_scale
        g = rows + cols

        w: dict[str, np.ndarray] = {}
        tok = np.zeros((spec.vocab_size, C))
        tok[:, junk] = eps * rng.standard_normal((spec.vocab_size, n_junk))
        for s in range(S):
            tok[voc.symbol(s), sub.sym.start + s] = 1.0
        for cell in range(N_I):
            ri, ci = sub.cell_code(cell)
            tok[voc.query(cell), sub.qry.start + ri] = 1.0
            tok[voc.query(cell), sub.qry.start + ci] = 1.0
            tok[voc.query(cell), sub.isquery] = 1.0
        w["tok_emb"] = tok

        pos = np.zeros((spec.max_seq_len, C))
        pos[:, junk] = eps * rng.standard_normal((spec.max_seq_len, n_junk))
        for cell in range(N_I):
            ri, ci = sub.cell_code(cell)
            pos[cell, sub.pos.start + ri] = 1.0
            pos[cell, sub.pos.start + ci] = 1.0
        pos[N_I:, sub.nonvis] = 1.0
        w["pos_emb"] = pos

        designated = set(heads.designated)
        beta = heads.relevance_gap * math.sqrt(hd)
        for layer in range(spec.num_layers):
            wq = eps * rng.standard_normal((C, C))
            wk = eps * rng.standard_normal((C, C))
            wv = eps * rng.standard_normal((C, C))
            wo = np.zeros((C, C))
            wo[:, junk] = eps * rng.standard_normal((C, n_junk))
            w1 = eps * rng.standard_normal((C, F))
            b1 = np.zeros(F)
            w2 = np.zeros((F, C))
            w2[:, junk] = eps * rng.standard_normal((F, n_junk))
            b2 = np.zeros(C)

            def claim(h: int) -> slice:
                cols_h = slice(h * hd, (h + 1) * hd)
                wq[:, cols_h] = 0.0
                wk[:, cols_h] = 0.0
                wv[:, cols_h] = 0.0
                wo[cols_h, :] = 0.0
                return cols_h

            if layer == heads.router[0]:
                h0 = heads.router[1] * hd
                claim(heads.router[1])
                wq[sub.nonvis, h0] = _ROUTER_GAP * math.sqrt(hd)
                wk[sub.isquery, h0] = 1.0
                for j in range(g):
                    wv[sub.qry.start + j, h0 + j] = 1.0
                    wo[h0 + j, sub.qry.start + j] = 1.0
                # AND(symbol token, non-visual position) -> EOS feature
                w1[:, 0] = 0.0
                w1[sub.sym, 0] = 1.0
                w1[sub.nonvis, 0] = 1.0
                b1[0] = -1.0
                w2[0, :] = 0.0
                w2[0, sub.eosf] = 1.0

            for (l, h) in designated:
                if l != layer:
                    continue
                base = h * hd
                claim(h)
                for j in range(g):
                    wq[sub.qry.start + j, base + j] = beta
                    wk[sub.pos.start + j, base + j] = 1.0
                for s in range(S):
                    wv[sub.sym.start + s, base + s] = 1.0
                    wo[base + s, sub.out.start + s] = 1.0

            if heads.shortcut is not None and heads.shortcut[0] == layer:
                base = heads.shortcut[1] * hd
                claim(heads.shortcut[1])
                for s in range(S):
                    wv[sub.sym.start + s, base + s] = 1.0
                    wo[base + s, sub.out.start + s] = r.shortcut_weight

            for name, arr in zip(("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2"),
                                 (wq, wk, wv, wo, w1, b1, w2, b2)):
                w[f"layers.{layer}.{name}"] = arr

        gamma = r.answer_sharpness
        unembed = np.zeros((C, spec.vocab_size))
        shift = 1 if (self.role == "small" and r.answer_fidelity == "corrupted") else 0
        for s in range(S):
            unembed[sub.out.start + s, voc.symbol((s + shift) % S)] = gamma
        out_budget = len(heads.designated) + (r.shortcut_weight if heads.shortcut else 0.0)
        unembed[sub.eosf, EOS_ID] = gamma * out_budget + _EOS_MARGIN
        w["unembed"] = unembed
        return w


# --- tasks -------------------------------------------------------------------

@dataclass(frozen=True)
class NeedleInstance:
    grid: tuple[int, int]
    layout: TokenLayout
    query_cell: int
    answer_id: int
    planted_cells: tuple[int, ...]
    distractors: int = 0

    def to_dict(self) -> dict:
        return {"grid": list(self.grid), "token_ids": list(self.layout.token_ids),
                "query_cell": self.query_cell, "answer_id": self.answer_id,
                "planted_cells": list(self.planted_cells)}

    @classmethod
    def from_dict(cls, d: dict) -> "NeedleInstance":
        grid = tuple(d["grid"])
        n_vis = grid[0] * grid[1]
        ids = tuple(d["token_ids"])
        return cls(grid=grid, layout=TokenLayout(n_vis, len(ids) - n_vis, ids),
                   query_cell=int(d["query_cell"]), answer_id=int(d["answer_id"]),
                   planted_cells=tuple(d["planted_cells"]))


def _row_col_neighbours(cell: int, rows: int, cols: int) -> list[int]:
    r, c = divmod(cell, cols)
    same = [r * cols + j for j in range(cols) if j != c] + [i * cols + c for i in range(rows) if i != r]
    return same


def gen_needle_dataset(grid: tuple[int, int], n_instances: int, seed: int,
                       difficulty: int | tuple[int, int] = 0, *, n_symbols: int = 8,
                       n_fillers: int = 4, prompt_len: int = 3,
                       candidate_cells: Sequence[int] | None = None) -> list[NeedleInstance]:
    """Seeded needle tasks.

    ``difficulty`` is the number of distractor cells, or a ``(lo, hi)`` range
    sampled per instance. Distractors carry the decoy symbol (the answer's
    successor, which is also what a corrupted small model says) and are placed
    first in the queried cell's row and column, where a mis-pruned model looks.
    """
    if n_instances < 1:
        raise ValueError("n_instances must be at least 1")
    if prompt_len < 1 or (prompt_len > 1 and n_fillers < 1):
        raise ValueError("prompt_len > 1 needs filler words")
    rows, cols = grid
    n_cells = rows * cols
    voc = Vocab(n_symbols, n_cells, n_fillers)
    cells = tuple(range(n_cells)) if candidate_cells is None else tuple(candidate_cells)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_instances):
        query = int(cells[rng.integers(len(cells))])
        symbols = rng.integers(n_symbols, size=n_cells)
        answer = int(symbols[query])
        if isinstance(difficulty, tuple):
            d = int(rng.integers(difficulty[0], difficulty[1] + 1))
        else:
            d = int(difficulty)
        d = min(d, n_cells - 1)
        if d:
            near = _row_col_neighbours(query, rows, cols)
            far = [c for c in range(n_cells) if c != query and c not in set(near)]
            order = list(rng.permutation(near)) + list(rng.permutation(far))
            for c in order[:d]:
                symbols[c] = (answer + 1) % n_symbols
        fillers = [voc.filler(int(f)) for f in rng.integers(max(n_fillers, 1), size=prompt_len - 1)]
        ids = [voc.symbol(int(s)) for s in symbols] + fillers + [voc.query(query)]
        out.append(NeedleInstance(
            grid=(rows, cols),
            layout=TokenLayout(n_cells, prompt_len, tuple(ids)),
            query_cell=query,
            answer_id=voc.symbol(answer),
            planted_cells=(query,),
            distractors=d,
        ))
    return out


def dataset_for(recipe: PlantedRecipe, n_instances: int, seed: int,
                difficulty: int | tuple[int, int] = 0, prompt_len: int = 3) -> list[NeedleInstance]:
    return gen_needle_dataset(recipe.grid, n_instances, seed, difficulty,
                              n_symbols=recipe.n_symbols, n_fillers=recipe.n_fillers,
                              prompt_len=prompt_len, candidate_cells=recipe.candidate_cells())


def save_dataset(instances: Iterable[NeedleInstance], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_dict(), sort_keys=True) + "\n")


def load_dataset(path) -> list[NeedleInstance]:
    with open(path, encoding="utf-8") as fh:
        return [NeedleInstance.from_dict(json.loads(line)) for line in fh if line.strip()]


def heatmap_matrix(importance: Sequence[float], grid: tuple[int, int]) -> np.ndarray:
    v = np.asarray(importance, dtype=np.float64)
    rows, cols = grid
    if v.ndim != 1 or v.size != rows * cols:
        raise ValueError(f"importance of length {v.size} does not fit a {rows}x{cols} grid")
    return v.reshape(rows, cols)


# --- pair construction -------------------------------------------------------

class _RowCapture:
    """Keeps the designated heads' attention rows of a single probe run."""

    def __init__(self, heads: Iterable[tuple[int, int]]):
        self.heads = set(heads)
        self.prefill: dict[tuple[int, int], np.ndarray] = {}
        self.decode: dict[tuple[int, int], list[np.ndarray]] = {}

    def on_prefill(self, layer, attn, positions):
        for (l, h) in self.heads:
            if l == layer:
                self.prefill[(l, h)] = attn[h, -1].copy()

    def on_decode(self, layer, attn, positions):
        for (l, h) in self.heads:
            if l == layer:
                self.decode.setdefault((l, h), []).append(attn[h].copy())


def measure_concentration(model: Model, recipe: PlantedRecipe, role: str,
                          instance: NeedleInstance, max_new: int = 4) -> dict[tuple[int, int], float]:
    """Attention mass on the planted cells, per designated head (worst row).

    Rows checked: the query (last prompt) row, plus generated rows for heads
    sitting above the router.
    """
    heads = planted_heads(model.spec, recipe, role)
    cap = _RowCapture(heads.designated)
    generate(model, instance.layout, max_new, cap)
    planted = list(instance.planted_cells)
    result = {}
    for key in heads.designated:
        masses = [cap.prefill[key][planted].sum()]
        if key[0] > heads.router[0]:
            masses += [row[planted].sum() for row in cap.decode.get(key, [])]
        result[key] = float(min(masses))
    return result


def build_planted_pair(small_spec: ModelSpec, large_spec: ModelSpec, recipe: PlantedRecipe,
                       seed: int, *, self_check: bool = True) -> tuple[Model, Model]:
    """Build the (small, large) pair and verify the planted concentration."""
    if small_spec.vocab_size != large_spec.vocab_size:
        raise ConstructionError("small and large models must share a vocabulary")
    if large_spec.num_layers <= small_spec.num_layers:
        raise ConstructionError("the large model needs more layers than the small one")
    small = build_model(small_spec, seed, PlantedWeights(recipe, "small"))
    large = build_model(large_spec, (int(seed) + 1) % 2**64, PlantedWeights(recipe, "large"))
    if self_check:
        probe = dataset_for(recipe, 1, seed)[0]
        for model, role in ((small, "small"), (large, "large")):
            masses = measure_concentration(model, recipe, role, probe)
            worst = min(masses.values())
            if worst < recipe.concentration - 0.02:
                raise ConstructionError(
                    f"{role} model concentrates only {worst:.3f} on planted cells "
                    f"(target {recipe.concentration})"
                )
    return small, large
