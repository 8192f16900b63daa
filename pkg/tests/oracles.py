"""Independent reference implementations used as test oracles.

Written per token and per head with no caching, sharing nothing with the
engine except the weight arrays.
"""
import math

import numpy as np


def _softmax_row(scores):
    m = max(scores)
    e = [math.exp(s - m) for s in scores]
    z = sum(e)
    return [x / z for x in e]


def reference_forward(model, token_ids, n_visual, prune_layer=None, kept=None):
    """Full-sequence forward pass.

    Returns ``(logits, positions, attention)`` where ``logits`` has one row per
    surviving token, ``positions`` their absolute positions, and
    ``attention[layer]`` is an (H, n_layer, n_layer) array of that layer's maps.
    """
    spec = model.spec
    W = model.weights
    H, hd = spec.num_heads, spec.head_dim
    positions = list(range(len(token_ids)))
    h = [W["tok_emb"][t] + W["pos_emb"][p] for t, p in zip(token_ids, positions)]
    attention = []
    for layer in range(spec.num_layers):
        if prune_layer is not None and layer == prune_layer:
            keep = set(kept)
            pairs = [(p, x) for p, x in zip(positions, h) if p >= n_visual or p in keep]
            positions = [p for p, _ in pairs]
            h = [x for _, x in pairs]
        wq, wk, wv, wo = (W[f"layers.{layer}.{n}"] for n in ("wq", "wk", "wv", "wo"))
        w1, b1, w2, b2 = (W[f"layers.{layer}.{n}"] for n in ("w1", "b1", "w2", "b2"))
        n = len(h)
        amap = np.zeros((H, n, n))
        new_h = []
        for i in range(n):
            ctx = np.zeros(spec.model_dim)
            for head in range(H):
                cols = slice(head * hd, (head + 1) * hd)
                q = h[i] @ wq[:, cols]
                scores, vals = [], []
                for j in range(n):
                    if positions[j] > positions[i]:
                        continue
                    k = h[j] @ wk[:, cols]
                    scores.append(float(q @ k) / math.sqrt(hd))
                    vals.append((j, h[j] @ wv[:, cols]))
                weights = _softmax_row(scores)
                for a, (j, v) in zip(weights, vals):
                    amap[head, i, j] = a
                    ctx[cols] += a * v
            y = h[i] + ctx @ wo
            y = y + np.maximum(y @ w1 + b1, 0.0) @ w2 + b2
            new_h.append(y)
        h = new_h
        attention.append(amap)
    logits = np.array([x @ W["unembed"] for x in h])
    return logits, np.array(positions), attention


def brute_force_importance(attention, positions, n_visual, n_prompt, n_decoded, layers=None):
    """Sum the prompt-row and decoded-row blocks of fully materialized maps.

    ``n_decoded`` generated tokens were fed back through the model, occupying
    positions ``n_visual + n_prompt`` onward.
    """
    a_p = np.zeros(n_visual)
    a_d = np.zeros(n_visual)
    positions = np.asarray(positions)
    n_ctx = n_visual + n_prompt
    for layer, amap in enumerate(attention):
        if layers is not None and layer not in layers:
            continue
        for head in range(amap.shape[0]):
            for i, pi in enumerate(positions):
                for j, pj in enumerate(positions):
                    if pj >= n_visual:
                        continue
                    if n_visual <= pi < n_ctx:
                        a_p[pj] += amap[head, i, j]
                    elif n_ctx <= pi < n_ctx + n_decoded:
                        a_d[pj] += amap[head, i, j]
    return a_p, a_d


def hand_flops(L, C, V, lens):
    """Direct transcription of the per-layer cost terms, times two."""
    total = 0
    for n in lens:
        total += 4 * n * C * C + 2 * n * n * C + 2 * n * C * (4 * C)
    total += lens[-1] * C * V
    return 2 * total


def materialized_attention(model, token_ids):
    """Every layer's (H, n, n) map for the full sequence, as one (L, H, n, n) tensor.

    Vectorized counterpart of :func:`reference_forward` without pruning; each
    head is computed from explicit column slices of the weight matrices.
    """
    spec = model.spec
    W = model.weights
    H, hd = spec.num_heads, spec.head_dim
    n = len(token_ids)
    x = W["tok_emb"][list(token_ids)] + W["pos_emb"][:n]
    causal = np.tril(np.ones((n, n), dtype=bool))
    maps = np.zeros((spec.num_layers, H, n, n))
    for layer in range(spec.num_layers):
        g = lambda name: W[f"layers.{layer}.{name}"]  # noqa: E731
        ctx = np.zeros_like(x)
        for head in range(H):
            cols = slice(head * hd, (head + 1) * hd)
            s = (x @ g("wq")[:, cols]) @ (x @ g("wk")[:, cols]).T / math.sqrt(hd)
            s = np.where(causal, s, -np.inf)
            e = np.exp(s - s.max(axis=1, keepdims=True))
            a = e / e.sum(axis=1, keepdims=True)
            maps[layer, head] = a
            ctx[:, cols] = a @ (x @ g("wv")[:, cols])
        x = x + ctx @ g("wo")
        x = x + np.maximum(x @ g("w1") + g("b1"), 0.0) @ g("w2") + g("b2")
    return maps


def tensor_importance(maps, n_visual, n_prompt, n_decoded, layers=None):
    """``(A^P, A^D)`` by direct slicing of the materialized tensor."""
    if layers is not None:
        maps = maps[sorted(layers)]
    n_ctx = n_visual + n_prompt
    a_p = maps[:, :, n_visual:n_ctx, :n_visual].sum(axis=(0, 1, 2))
    a_d = maps[:, :, n_ctx:n_ctx + n_decoded, :n_visual].sum(axis=(0, 1, 2))
    return a_p, a_d
