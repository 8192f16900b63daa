"""Minimal decoder-only causal transformer in float64 numpy.

Visual tokens come first in every sequence, then prompt tokens, then generated
tokens. Attention maps are streamed to an optional sink one layer at a time and
never kept around. Visual tokens can be dropped once, between two layers; the
survivors keep their original absolute positions.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from os import PathLike
from typing import Callable, Iterable, Mapping, Protocol, Sequence, Union

import numpy as np

from .errors import CapacityError, ConstructionError, InvalidDirectiveError

EOS_ID = 0
MAGIC = b"CPRM"
FORMAT_VERSION = 1

_LAYER_PARAMS = ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int
    num_heads: int
    model_dim: int
    head_dim: int
    vocab_size: int
    max_seq_len: int

    def __post_init__(self) -> None:
        for name in ("num_layers", "num_heads", "model_dim", "head_dim", "vocab_size", "max_seq_len"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ConstructionError(f"{name} must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.model_dim != self.num_heads * self.head_dim:
            raise ConstructionError(
                f"model_dim ({self.model_dim}) != num_heads * head_dim "
                f"({self.num_heads} * {self.head_dim})"
            )
        if self.vocab_size < 2:
            raise ConstructionError("vocab_size must be at least 2")

    @property
    def ff_dim(self) -> int:
        return 4 * self.model_dim


def weight_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) order used for construction and serialization."""
    C, F, V = spec.model_dim, spec.ff_dim, spec.vocab_size
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (V, C)),
        ("pos_emb", (spec.max_seq_len, C)),
    ]
    per_layer = {"wq": (C, C), "wk": (C, C), "wv": (C, C), "wo": (C, C),
                 "w1": (C, F), "b1": (F,), "w2": (F, C), "b2": (C,)}
    for layer in range(spec.num_layers):
        shapes.extend((f"layers.{layer}.{p}", per_layer[p]) for p in _LAYER_PARAMS)
    shapes.append(("unembed", (C, V)))
    return shapes


@dataclass(frozen=True, eq=False)
class Model:
    """Immutable weights plus the spec and seed they were built from."""

    spec: ModelSpec
    weights: Mapping[str, np.ndarray]
    seed: int

    def __post_init__(self) -> None:
        frozen = {}
        for name, shape in weight_shapes(self.spec):
            if name not in self.weights:
                raise ConstructionError(f"missing weight array {name!r}")
            arr = np.array(self.weights[name], dtype=np.float64, copy=True)
            if arr.shape != shape:
                raise ConstructionError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ConstructionError(f"{name} contains non-finite values")
            arr.setflags(write=False)
            frozen[name] = arr
        extra = set(self.weights) - set(frozen)
        if extra:
            raise ConstructionError(f"unexpected weight arrays: {sorted(extra)}")
        object.__setattr__(self, "weights", frozen)
        object.__setattr__(self, "_layers", tuple(
            tuple(frozen[f"layers.{l}.{p}"] for p in _LAYER_PARAMS)
            for l in range(self.spec.num_layers)
        ))

    def layer(self, index: int) -> tuple[np.ndarray, ...]:
        return self._layers[index]  # type: ignore[attr-defined]

    def same_weights(self, other: "Model") -> bool:
        """Bitwise equality of spec and every weight array."""
        if self.spec != other.spec:
            return False
        return all(
            np.array_equal(self.weights[n], other.weights[n])
            and self.weights[n].tobytes() == other.weights[n].tobytes()
            for n, _ in weight_shapes(self.spec)
        )


Recipe = Union[str, Callable[[ModelSpec, np.random.Generator], Mapping[str, np.ndarray]]]


def _random_weights(spec: ModelSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    weights = {}
    for name, shape in weight_shapes(spec):
        if name == "tok_emb":
            weights[name] = rng.standard_normal(shape)
        elif name == "pos_emb":
            weights[name] = 0.5 * rng.standard_normal(shape)
        elif len(shape) == 1:
            weights[name] = 0.1 * rng.standard_normal(shape)
        else:
            weights[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return weights


def build_model(spec: ModelSpec, seed: int, recipe: Recipe = "random") -> Model:
    """Construct a model deterministically from ``(spec, seed, recipe)``.

    ``recipe`` is ``"random"`` or a callable ``(spec, rng) -> weights`` such as
    the planted recipes in :mod:`cascade_prune.synth`.
    """
    if not isinstance(spec, ModelSpec):
        raise ConstructionError("spec must be a ModelSpec")
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ConstructionError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    rng = np.random.default_rng(seed)
    if recipe == "random":
        weights = _random_weights(spec, rng)
    elif callable(recipe):
        weights = recipe(spec, rng)
    else:
        raise ConstructionError(f"unknown construction recipe {recipe!r}")
    return Model(spec=spec, weights=weights, seed=seed)


# --- serialization -----------------------------------------------------------

def model_to_bytes(model: Model) -> bytes:
    s = model.spec
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<6I", s.num_layers, s.num_heads, s.model_dim, s.head_dim,
                    s.vocab_size, s.max_seq_len),
        struct.pack("<Q", model.seed),
    ]
    for name, _ in weight_shapes(s):
        parts.append(np.ascontiguousarray(model.weights[name], dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(blob: bytes) -> Model:
    if blob[:4] != MAGIC:
        raise ConstructionError("not a CPRM model file (bad magic bytes)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise ConstructionError(f"unsupported CPRM format version {version}")
    fields = struct.unpack_from("<6I", blob, 8)
    (seed,) = struct.unpack_from("<Q", blob, 32)
    spec = ModelSpec(*fields)
    offset = 40
    weights = {}
    for name, shape in weight_shapes(spec):
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(blob):
            raise ConstructionError("truncated CPRM model file")
        weights[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset = end
    if offset != len(blob):
        raise ConstructionError("trailing bytes after CPRM weight arrays")
    return Model(spec=spec, weights=weights, seed=seed)


def save_model(model: Model, path: str | PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path: str | PathLike) -> Model:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


# --- runtime types -----------------------------------------------------------

@dataclass(frozen=True)
class TokenLayout:
    n_visual: int
    n_prompt: int
    token_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "token_ids", tuple(int(t) for t in self.token_ids))
        if self.n_visual < 1 or self.n_prompt < 1:
            raise ValueError("a layout needs at least one visual and one prompt token")
        if len(self.token_ids) != self.n_visual + self.n_prompt:
            raise ValueError(
                f"token_ids has length {len(self.token_ids)}, expected "
                f"{self.n_visual} + {self.n_prompt}"
            )
        if min(self.token_ids) < 0:
            raise ValueError("token ids must be nonnegative")

    def __len__(self) -> int:
        return self.n_visual + self.n_prompt


@dataclass
class KvCache:
    """Per-layer keys/values of shape (H, n_layer, head_dim).

    Layers at or above the prune layer only hold retained positions.
    """

    keys: list[np.ndarray]
    values: list[np.ndarray]
    positions: list[np.ndarray]
    n_visual: int
    next_position: int
    prune_layer: int | None = None

    @property
    def retained_positions(self) -> np.ndarray:
        return self.positions[-1]

    def layer_length(self, layer: int) -> int:
        return int(self.positions[layer].shape[0])


@dataclass(frozen=True)
class PrefixSnapshot:
    """Residual stream entering ``layer`` plus the KV entries of layers below it.

    Captured during an unpruned prefill so a later pass that prunes at ``layer``
    can skip recomputing the shared lower layers for the prefix.
    """

    layer: int
    hidden: np.ndarray
    positions: np.ndarray
    keys: tuple[np.ndarray, ...]
    values: tuple[np.ndarray, ...]


@dataclass(eq=False)
class GenerationResult:
    generated_ids: tuple[int, ...]
    step_probs: np.ndarray
    step_dists: np.ndarray
    prefix: PrefixSnapshot | None = None

    @property
    def answer_ids(self) -> tuple[int, ...]:
        """Generated ids with a terminating EOS removed."""
        if self.generated_ids and self.generated_ids[-1] == EOS_ID:
            return self.generated_ids[:-1]
        return self.generated_ids


@dataclass
class WorkLog:
    """Rows actually pushed through each layer, for FLOPs accounting.

    ``layers`` holds ``(phase, layer, query_rows, key_length)`` and ``logits``
    holds ``(phase, rows)``; phase is ``"prefill"`` or ``"decode"``.
    """

    layers: list[tuple[str, int, int, int]] = field(default_factory=list)
    logits: list[tuple[str, int]] = field(default_factory=list)

    def add_layer(self, phase: str, layer: int, query_rows: int, key_length: int) -> None:
        self.layers.append((phase, layer, int(query_rows), int(key_length)))

    def add_logits(self, phase: str, rows: int) -> None:
        self.logits.append((phase, int(rows)))


class AttentionSink(Protocol):
    def on_prefill(self, layer: int, attn: np.ndarray, positions: np.ndarray) -> None:
        """``attn`` has shape (H, n, n); ``positions`` are absolute positions of the n tokens."""

    def on_decode(self, layer: int, attn: np.ndarray, positions: np.ndarray) -> None:
        """``attn`` has shape (H, n); the last entry is the new token attending to itself."""


class MultiSink:
    """Fan attention out to several sinks."""

    def __init__(self, *sinks: AttentionSink | None) -> None:
        self.sinks = [s for s in sinks if s is not None]

    def on_prefill(self, layer, attn, positions):
        for s in self.sinks:
            s.on_prefill(layer, attn, positions)

    def on_decode(self, layer, attn, positions):
        for s in self.sinks:
            s.on_decode(layer, attn, positions)


@dataclass
class ForwardState:
    """Residual stream of a prefill pass at the entry of ``layer``."""

    hidden: np.ndarray
    positions: np.ndarray
    n_visual: int
    layer: int
    pruned_at: int | None = None


# --- core math ---------------------------------------------------------------

def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _embed(model: Model, ids: Sequence[int], positions: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= model.spec.vocab_size):
        raise ValueError("token id outside the vocabulary")
    return model.weights["tok_emb"][ids] + model.weights["pos_emb"][positions]


def _block(model: Model, layer: int, x: np.ndarray, q_pos: np.ndarray,
           past_k: np.ndarray | None = None, past_v: np.ndarray | None = None,
           past_pos: np.ndarray | None = None):
    """One transformer block. Returns (x_out, keys, values, key_positions, attn)."""
    spec = model.spec
    H, hd = spec.num_heads, spec.head_dim
    wq, wk, wv, wo, w1, b1, w2, b2 = model.layer(layer)
    n = x.shape[0]
    q = (x @ wq).reshape(n, H, hd).transpose(1, 0, 2)
    k = (x @ wk).reshape(n, H, hd).transpose(1, 0, 2)
    v = (x @ wv).reshape(n, H, hd).transpose(1, 0, 2)
    if past_k is not None:
        k = np.concatenate([past_k, k], axis=1)
        v = np.concatenate([past_v, v], axis=1)
        k_pos = np.concatenate([past_pos, q_pos])
    else:
        k_pos = q_pos
    scores = (q @ k.transpose(0, 2, 1)) / np.sqrt(hd)
    future = k_pos[None, :] > q_pos[:, None]
    if future.any():
        scores = np.where(future[None], -np.inf, scores)
    attn = softmax(scores)
    ctx = (attn @ v).transpose(1, 0, 2).reshape(n, spec.model_dim)
    x = x + ctx @ wo
    x = x + np.maximum(x @ w1 + b1, 0.0) @ w2 + b2
    return x, k, v, k_pos, attn


def prune_at_layer(state: ForwardState, kept_visual: Iterable[int], layer: int) -> ForwardState:
    """Drop every visual token not in ``kept_visual`` before ``layer`` runs.

    Prompt and generated tokens always survive and nothing is renumbered.
    """
    if state.pruned_at is not None:
        raise InvalidDirectiveError(f"pass already pruned at layer {state.pruned_at}")
    if layer != state.layer:
        raise InvalidDirectiveError(
            f"state sits at the entry of layer {state.layer}, cannot prune at layer {layer}"
        )
    kept = np.asarray(sorted(set(int(i) for i in kept_visual)), dtype=np.int64)
    if kept.size == 0:
        raise InvalidDirectiveError("kept visual set is empty")
    if kept[0] < 0 or kept[-1] >= state.n_visual:
        raise InvalidDirectiveError(f"kept indices must lie in [0, {state.n_visual})")
    mask = (state.positions >= state.n_visual) | np.isin(state.positions, kept)
    return ForwardState(
        hidden=state.hidden[mask],
        positions=state.positions[mask],
        n_visual=state.n_visual,
        layer=layer,
        pruned_at=layer,
    )


KeepSpec = Union[Sequence[int], Callable[[], Sequence[int]], None]


def _check_prune_layer(model: Model, prune_layer: int | None) -> None:
    if prune_layer is not None and not 0 <= prune_layer < model.spec.num_layers:
        raise InvalidDirectiveError(
            f"prune layer {prune_layer} outside [0, {model.spec.num_layers})"
        )


def _forward(model: Model, ids: Sequence[int], n_visual: int, sink: AttentionSink | None,
             prune_layer: int | None, keep: KeepSpec, snapshot_layer: int | None,
             work: WorkLog | None):
    spec = model.spec
    n = len(ids)
    if n > spec.max_seq_len:
        raise CapacityError(f"sequence length {n} exceeds max_seq_len {spec.max_seq_len}")
    _check_prune_layer(model, prune_layer)
    if prune_layer is not None and keep is None:
        raise InvalidDirectiveError("prune_layer given without a kept set")
    positions = np.arange(n)
    state = ForwardState(_embed(model, ids, positions), positions, n_visual, layer=0)
    keys, values, key_pos = [], [], []
    snapshot_hidden = None
    for layer in range(spec.num_layers):
        state.layer = layer
        if layer == snapshot_layer:
            snapshot_hidden = (state.hidden.copy(), state.positions.copy())
        if layer == prune_layer:
            kept = keep() if callable(keep) else keep
            state = prune_at_layer(state, kept, layer)
        x, k, v, kp, attn = _block(model, layer, state.hidden, state.positions)
        if sink is not None:
            sink.on_prefill(layer, attn, state.positions)
        if work is not None:
            work.add_layer("prefill", layer, x.shape[0], kp.shape[0])
        keys.append(k)
        values.append(v)
        key_pos.append(kp)
        state.hidden = x
    logits = state.hidden @ model.weights["unembed"]
    if work is not None:
        work.add_logits("prefill", logits.shape[0])
    cache = KvCache(keys, values, key_pos, n_visual=n_visual, next_position=n,
                    prune_layer=prune_layer)
    snapshot = None
    if snapshot_layer is not None:
        if snapshot_hidden is None:
            raise InvalidDirectiveError(f"snapshot layer {snapshot_layer} never reached")
        snapshot = PrefixSnapshot(
            layer=snapshot_layer,
            hidden=snapshot_hidden[0],
            positions=snapshot_hidden[1],
            keys=tuple(keys[:snapshot_layer]),
            values=tuple(values[:snapshot_layer]),
        )
    return cache, logits, state.positions, snapshot


def prefill(model: Model, layout: TokenLayout, attn_sink: AttentionSink | None = None, *,
            prune_layer: int | None = None, keep: KeepSpec = None,
            work: WorkLog | None = None) -> tuple[KvCache, np.ndarray]:
    """Run the prompt through the model; return the cache and next-token logits.

    ``keep`` may be a callable evaluated right before ``prune_layer`` runs, which
    lets a ranking depend on attention already streamed from lower layers.
    """
    cache, logits, _, _ = _forward(model, layout.token_ids, layout.n_visual, attn_sink,
                                   prune_layer, keep, None, work)
    return cache, logits[-1]


def decode_step(model: Model, cache: KvCache, token_id: int,
                attn_sink: AttentionSink | None = None, *,
                work: WorkLog | None = None) -> tuple[np.ndarray, KvCache]:
    pos = cache.next_position
    if pos >= model.spec.max_seq_len:
        raise CapacityError(f"position {pos} exceeds max_seq_len {model.spec.max_seq_len}")
    q_pos = np.array([pos])
    x = _embed(model, [token_id], q_pos)
    keys, values, key_pos = [], [], []
    for layer in range(model.spec.num_layers):
        x, k, v, kp, attn = _block(model, layer, x, q_pos, cache.keys[layer],
                                   cache.values[layer], cache.positions[layer])
        if attn_sink is not None:
            attn_sink.on_decode(layer, attn[:, 0, :], kp)
        if work is not None:
            work.add_layer("decode", layer, 1, kp.shape[0])
        keys.append(k)
        values.append(v)
        key_pos.append(kp)
    logits = (x @ model.weights["unembed"])[0]
    if work is not None:
        work.add_logits("decode", 1)
    new_cache = KvCache(keys, values, key_pos, n_visual=cache.n_visual,
                        next_position=pos + 1, prune_layer=cache.prune_layer)
    return logits, new_cache


def generate(model: Model, layout: TokenLayout, max_new: int,
             attn_sink: AttentionSink | None = None, *,
             prune_layer: int | None = None, keep: KeepSpec = None,
             snapshot_layer: int | None = None,
             work: WorkLog | None = None) -> GenerationResult:
    """Greedy decoding until EOS or ``max_new`` tokens.

    The EOS token, when produced, is part of ``generated_ids``.
    """
    if max_new < 1:
        raise ValueError("max_new must be at least 1")
    cache, logits, _, snapshot = _forward(model, layout.token_ids, layout.n_visual, attn_sink,
                                          prune_layer, keep, snapshot_layer, work)
    logits = logits[-1]
    ids, probs, dists = [], [], []
    for step in range(max_new):
        dist = softmax(logits)
        token = int(np.argmax(dist))
        ids.append(token)
        probs.append(dist[token])
        dists.append(dist)
        if token == EOS_ID or step == max_new - 1:
            break
        logits, cache = decode_step(model, cache, token, attn_sink, work=work)
    return GenerationResult(tuple(ids), np.array(probs), np.array(dists), prefix=snapshot)


def teacher_forced_probs(model: Model, layout: TokenLayout, forced_ids: Sequence[int],
                         directive=None, *, prefix: PrefixSnapshot | None = None,
                         work: WorkLog | None = None) -> np.ndarray:
    """Probability of each ``forced_ids[i]`` given everything before it, in one pass.

    ``directive`` is anything with ``engine_layer`` and ``kept`` attributes
    (see :class:`cascade_prune.pruner.PruneDirective`). When ``prefix`` was
    captured at the directive's layer, the layers below it only process the
    forced rows against the cached prefix keys/values.
    """
    forced = [int(t) for t in forced_ids]
    if not forced:
        raise ValueError("forced_ids must be nonempty")
    n0 = len(layout)
    total = n0 + len(forced)
    if total > model.spec.max_seq_len:
        raise CapacityError(f"sequence length {total} exceeds max_seq_len {model.spec.max_seq_len}")
    prune_layer = directive.engine_layer if directive is not None else None
    kept = tuple(directive.kept) if directive is not None else None

    if prefix is None or prune_layer is None:
        _, logits, positions, _ = _forward(model, list(layout.token_ids) + forced, layout.n_visual,
                                           None, prune_layer, kept, None, work)
    else:
        if prefix.layer != prune_layer:
            raise InvalidDirectiveError(
                f"prefix snapshot taken at layer {prefix.layer}, directive prunes at {prune_layer}"
            )
        logits, positions = _forward_with_prefix(model, layout, forced, prefix, kept, work)

    rows = np.searchsorted(positions, np.arange(n0 - 1, total - 1))
    probs = softmax(logits[rows])
    return probs[np.arange(len(forced)), forced]


def _forward_with_prefix(model: Model, layout: TokenLayout, forced: list[int],
                         prefix: PrefixSnapshot, kept: Sequence[int], work: WorkLog | None):
    n0 = len(layout)
    if prefix.hidden.shape[0] != n0:
        raise InvalidDirectiveError("prefix snapshot does not match the layout length")
    q_pos = np.arange(n0, n0 + len(forced))
    x = _embed(model, forced, q_pos)
    for layer in range(prefix.layer):
        x, _, _, kp, _ = _block(model, layer, x, q_pos, prefix.keys[layer],
                                prefix.values[layer], prefix.positions)
        if work is not None:
            work.add_layer("prefill", layer, x.shape[0], kp.shape[0])
    state = ForwardState(np.concatenate([prefix.hidden, x]),
                         np.concatenate([prefix.positions, q_pos]),
                         layout.n_visual, layer=prefix.layer)
    state = prune_at_layer(state, kept, prefix.layer)
    h = state.hidden
    for layer in range(prefix.layer, model.spec.num_layers):
        h, _, _, kp, _ = _block(model, layer, h, state.positions)
        if work is not None:
            work.add_layer("prefill", layer, h.shape[0], kp.shape[0])
    logits = h @ model.weights["unembed"]
    if work is not None:
        work.add_logits("prefill", logits.shape[0])
    return logits, state.positions
