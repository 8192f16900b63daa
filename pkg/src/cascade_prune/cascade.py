"""Small-then-large inference with guided pruning and early exit, plus FLOPs accounting.

Cost convention: one multiply-accumulate is two FLOPs. A layer that pushes
``q`` query rows against ``kv`` keys costs ``4 q C^2`` MACs for the four
projections, ``2 q kv C`` for scores and mixing, and ``2 q C C_ff`` for the
feed-forward block (``C_ff = 4 C``); every row that reaches the unembedding
adds ``C C_T``.
"""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import exit_gate
from .aggregate import SUBSET_MODES, AttentionTrace, first_layers
from .engine import GenerationResult, Model, ModelSpec, TokenLayout, WorkLog, generate, teacher_forced_probs
from .errors import ConfigError
from .exit_gate import CRITERIA, NEEDS_CONSISTENCY, ExitDecision
from .pruner import (RANKING_SOURCES, PruneDirective, avg_retention, fastv_rank, fastv_trace,
                     kept_count, make_directive, random_rank, rank_tokens)

FASTV_LAYER = 2  # 1-indexed default ranking layer of the single-layer baseline
METRICS_HEADER = ("config_id", "k", "R", "threshold", "criterion", "accuracy",
                  "exit_ratio", "avg_retention", "mean_flops")


# --- cost model --------------------------------------------------------------

def layer_macs(spec: ModelSpec, query_rows: int, key_length: int) -> int:
    C = spec.model_dim
    q = int(query_rows)
    return 4 * q * C * C + 2 * q * int(key_length) * C + 2 * q * C * spec.ff_dim


def flops_forward(spec: ModelSpec, seq_len_per_layer: Sequence[int]) -> int:
    """FLOPs of one full-sequence pass with ``seq_len_per_layer[l]`` tokens in layer l."""
    lens = [int(n) for n in seq_len_per_layer]
    if len(lens) != spec.num_layers:
        raise ValueError(f"need {spec.num_layers} per-layer lengths, got {len(lens)}")
    if min(lens) < 1:
        raise ValueError("per-layer lengths must be positive")
    macs = sum(layer_macs(spec, n, n) for n in lens) + lens[-1] * spec.model_dim * spec.vocab_size
    return 2 * macs


def flops_decode_step(spec: ModelSpec, key_len_per_layer: Sequence[int]) -> int:
    macs = sum(layer_macs(spec, 1, kv) for kv in key_len_per_layer)
    return 2 * (macs + spec.model_dim * spec.vocab_size)


def flops_from_work(spec: ModelSpec, work: WorkLog, phase: str | None = None) -> int:
    """FLOPs of the rows an engine pass actually processed."""
    macs = sum(layer_macs(spec, q, kv) for ph, _, q, kv in work.layers if phase in (None, ph))
    macs += sum(rows for ph, rows in work.logits if phase in (None, ph)) * spec.model_dim * spec.vocab_size
    return 2 * macs


def pruned_lengths(spec: ModelSpec, n_visual: int, n_rest: int, prune_layer: int,
                   retain_fraction: float) -> list[int]:
    """Per-layer lengths when pruning at ``prune_layer`` (1-indexed count of full layers)."""
    full = n_visual + n_rest
    cut = kept_count(n_visual, retain_fraction) + n_rest
    return [full if l < prune_layer else cut for l in range(spec.num_layers)]


def generation_flops(spec: ModelSpec, context_len: int, n_generated: int,
                     lens: Sequence[int] | None = None) -> int:
    """Prefill over the context plus ``n_generated - 1`` cached decode steps.

    ``lens`` optionally overrides the per-layer prefill lengths (for pruned
    passes); decode key lengths grow from those.
    """
    lens = list(lens) if lens is not None else [context_len] * spec.num_layers
    total = flops_forward(spec, lens)
    for step in range(1, n_generated):
        total += flops_decode_step(spec, [n + step for n in lens])
    return total


def consistency_flops(spec: ModelSpec, n_visual: int, n_prompt: int, n_generated: int,
                      prune_layer: int, retain_fraction: float, reuse_prefix: bool = True) -> int:
    """Teacher-forced pass over ``[kept visual | prompt | generated]``.

    With ``reuse_prefix`` the layers below the cut only process the generated
    rows, reading the prefix keys/values cached by the original generation.
    """
    context = n_visual + n_prompt
    n_cut = kept_count(n_visual, retain_fraction) + n_prompt + n_generated
    if not reuse_prefix:
        return flops_forward(spec, pruned_lengths(spec, n_visual, n_prompt + n_generated,
                                                  prune_layer, retain_fraction))
    macs = 0
    for layer in range(spec.num_layers):
        if layer < prune_layer:
            macs += layer_macs(spec, n_generated, context + n_generated)
        else:
            macs += layer_macs(spec, n_cut, n_cut)
    macs += n_cut * spec.model_dim * spec.vocab_size
    return 2 * macs


# --- configuration and results -----------------------------------------------

@dataclass(frozen=True)
class CascadeConfig:
    small_model: Model
    large_model: Model
    prune_layer: int = 2
    retain_fraction: float = 0.05
    ranking_source: str = "aggregated"
    exit_criterion: str = "combined"
    threshold: float = 0.9
    consistency_layer: int = 2
    consistency_fraction: float = 0.05
    max_new_tokens: int = 4
    layer_fraction: float = 1.0
    token_subset: str = "prompt_and_generated"
    decode_weight: float = 1.0
    fastv_layer: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        s, l = self.small_model.spec, self.large_model.spec
        if s.vocab_size != l.vocab_size:
            raise ConfigError(f"vocabulary mismatch: small {s.vocab_size} vs large {l.vocab_size}")
        if self.ranking_source not in RANKING_SOURCES:
            raise ConfigError(f"unknown ranking source {self.ranking_source!r}")
        if self.exit_criterion not in CRITERIA:
            raise ConfigError(f"unknown exit criterion {self.exit_criterion!r}")
        if self.token_subset not in SUBSET_MODES:
            raise ConfigError(f"unknown token subset {self.token_subset!r}")
        if not 1 <= self.prune_layer <= l.num_layers:
            raise ConfigError(f"prune layer {self.prune_layer} outside [1, {l.num_layers}]")
        if not 1 <= self.consistency_layer <= s.num_layers:
            raise ConfigError(f"consistency layer {self.consistency_layer} outside [1, {s.num_layers}]")
        if not 0 < self.retain_fraction <= 1 or not 0 < self.consistency_fraction <= 1:
            raise ConfigError("retain fractions must lie in (0, 1]")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be at least 1")
        if self.fastv_layer is not None and not 1 <= self.fastv_layer <= self.prune_layer:
            raise ConfigError("the FastV ranking layer must not lie above the prune layer")

    def check_instance(self, layout: TokenLayout) -> None:
        need = len(layout) + self.max_new_tokens
        for name, m in (("small", self.small_model), ("large", self.large_model)):
            if need > m.spec.max_seq_len:
                raise ConfigError(f"instance of length {len(layout)} plus {self.max_new_tokens} "
                                  f"new tokens does not fit the {name} model")


@dataclass
class CostReport:
    small_prefill_flops: int = 0
    small_decode_flops: int = 0
    consistency_flops: int = 0
    large_prefill_flops: int = 0
    large_decode_flops: int = 0
    avg_retention: float = 1.0
    exited_early: bool = False

    @property
    def total_flops(self) -> int:
        return (self.small_prefill_flops + self.small_decode_flops + self.consistency_flops
                + self.large_prefill_flops + self.large_decode_flops)

    def to_dict(self) -> dict:
        return {"small_prefill_flops": self.small_prefill_flops,
                "small_decode_flops": self.small_decode_flops,
                "consistency_flops": self.consistency_flops,
                "large_prefill_flops": self.large_prefill_flops,
                "large_decode_flops": self.large_decode_flops,
                "total_flops": self.total_flops,
                "avg_retention": self.avg_retention,
                "exited_early": self.exited_early}


@dataclass
class CascadeOutcome:
    answer_ids: tuple[int, ...]
    source: str
    decision: ExitDecision
    cost: CostReport
    directive: PruneDirective | None = None
    trace_export: dict | None = None


@dataclass
class SmallStage:
    """Everything the small model contributes for one instance."""

    generation: GenerationResult
    trace: AttentionTrace
    importance: np.ndarray
    forced_probs: np.ndarray | None
    prefill_flops: int
    decode_flops: int
    consistency_flops: int

    def score(self, criterion: str) -> float:
        return exit_gate.criterion_score(criterion, self.generation.step_probs,
                                         self.generation.step_dists, self.forced_probs)


@dataclass
class LargeStage:
    generation: GenerationResult
    directive: PruneDirective
    prefill_flops: int
    decode_flops: int


def _layout(instance) -> TokenLayout:
    return instance if isinstance(instance, TokenLayout) else instance.layout


def run_small(instance, config: CascadeConfig, with_consistency: bool | None = None) -> SmallStage:
    layout = _layout(instance)
    config.check_instance(layout)
    small = config.small_model
    layer_filter = None
    if config.layer_fraction < 1:
        layer_filter = first_layers(small.spec.num_layers, config.layer_fraction)
    trace = AttentionTrace(layout.n_visual, layout.n_prompt, layer_filter)
    if with_consistency is None:
        with_consistency = config.exit_criterion in NEEDS_CONSISTENCY
    snap = config.consistency_layer if config.consistency_layer < small.spec.num_layers else None
    work = WorkLog()
    gen = generate(small, layout, config.max_new_tokens, trace,
                   snapshot_layer=snap if with_consistency else None, work=work)
    if config.token_subset == "prompt_and_generated":
        importance = trace.finalize(config.decode_weight)
    else:
        importance = trace.subset_importance(config.token_subset)
    forced = None
    cons_work = WorkLog()
    if with_consistency:
        directive = make_directive(rank_tokens(importance), config.consistency_fraction,
                                   config.consistency_layer, layout.n_visual, "aggregated",
                                   num_layers=small.spec.num_layers)
        forced = teacher_forced_probs(small, layout, gen.generated_ids, directive,
                                      prefix=gen.prefix, work=cons_work)
    return SmallStage(
        generation=gen,
        trace=trace,
        importance=importance,
        forced_probs=forced,
        prefill_flops=flops_from_work(small.spec, work, "prefill"),
        decode_flops=flops_from_work(small.spec, work, "decode"),
        consistency_flops=flops_from_work(small.spec, cons_work),
    )


def _instance_seed(base: int, layout: TokenLayout) -> int:
    ss = np.random.SeedSequence([int(base) % 2**64, *layout.token_ids])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def run_large(instance, config: CascadeConfig, small_stage: SmallStage | None = None,
              prune_layer: int | None = None, retain_fraction: float | None = None,
              ranking_source: str | None = None) -> LargeStage:
    layout = _layout(instance)
    large = config.large_model
    L = large.spec.num_layers
    k = config.prune_layer if prune_layer is None else prune_layer
    R = config.retain_fraction if retain_fraction is None else retain_fraction
    source = config.ranking_source if ranking_source is None else ranking_source
    n_vis = layout.n_visual
    work = WorkLog()
    extra = WorkLog()

    def directive_for(ranking):
        return make_directive(ranking, R, k, n_vis, source, num_layers=L)

    if source == "fastv_single_layer":
        rank_layer = (config.fastv_layer if config.fastv_layer is not None else min(FASTV_LAYER, k)) - 1
        if rank_layer >= k:
            raise ConfigError("the FastV ranking layer must not lie above the prune layer")
        tap = fastv_trace(n_vis, layout.n_prompt, rank_layer)
        built: list[PruneDirective] = []

        def keep():
            built.append(directive_for(fastv_rank(tap)))
            return built[-1].kept

        engine_layer = k if k < L else None
        gen = generate(large, layout, config.max_new_tokens, tap,
                       prune_layer=engine_layer, keep=keep if engine_layer is not None else None,
                       work=work)
        directive = built[-1] if built else directive_for(fastv_rank(tap))
    else:
        if source == "aggregated":
            if small_stage is None:
                raise ConfigError("aggregated ranking needs the small model's trace")
            ranking = rank_tokens(small_stage.importance)
        elif source == "random":
            ranking = random_rank(n_vis, _instance_seed(config.seed, layout))
        else:  # oracle_large: an unpruned large pass supplies its own ranking
            own = AttentionTrace(n_vis, layout.n_prompt)
            generate(large, layout, config.max_new_tokens, own, work=extra)
            ranking = rank_tokens(own.finalize())
        directive = directive_for(ranking)
        gen = generate(large, layout, config.max_new_tokens,
                       prune_layer=directive.engine_layer,
                       keep=directive.kept if directive.engine_layer is not None else None,
                       work=work)
    return LargeStage(
        generation=gen,
        directive=directive,
        prefill_flops=flops_from_work(large.spec, work, "prefill") + flops_from_work(large.spec, extra, "prefill"),
        decode_flops=flops_from_work(large.spec, work, "decode") + flops_from_work(large.spec, extra, "decode"),
    )


def run_cascade(instance, config: CascadeConfig) -> CascadeOutcome:
    """Small model first; exit on a confident answer, otherwise call the pruned large model."""
    layout = _layout(instance)
    small = run_small(layout, config)
    gen = small.generation
    decision = exit_gate.decide(config.exit_criterion, config.threshold, gen.step_probs,
                                gen.step_dists, small.forced_probs)
    cost = CostReport(
        small_prefill_flops=small.prefill_flops,
        small_decode_flops=small.decode_flops,
        consistency_flops=small.consistency_flops,
        avg_retention=avg_retention(config.large_model.spec.num_layers, config.prune_layer,
                                    config.retain_fraction),
        exited_early=decision.exit,
    )
    if decision.exit:
        return CascadeOutcome(gen.answer_ids, "small", decision, cost,
                              trace_export=small.trace.to_dict())
    large = run_large(layout, config, small)
    cost.large_prefill_flops = large.prefill_flops
    cost.large_decode_flops = large.decode_flops
    return CascadeOutcome(large.generation.answer_ids, "large", decision, cost,
                          directive=large.directive, trace_export=small.trace.to_dict())


# --- sweeps ------------------------------------------------------------------

@dataclass(frozen=True)
class SweepPoint:
    """One evaluation setting; unset fields fall back to the config.

    Give either ``threshold`` or ``target_exit_ratio`` (calibrated on the
    dataset's own scores).
    """

    k: int
    R: float
    threshold: float | None = None
    target_exit_ratio: float | None = None
    criterion: str | None = None
    ranking_source: str | None = None


@dataclass
class MetricsRow:
    config_id: str
    k: int
    R: float
    threshold: float
    criterion: str
    accuracy: float
    exit_ratio: float
    avg_retention: float
    mean_flops: float
    ranking_source: str = "aggregated"
    per_instance: list[dict] = field(default_factory=list, repr=False)

    def as_record(self) -> dict:
        return {name: getattr(self, name) for name in METRICS_HEADER}


def _parallel_map(fn: Callable, items: Sequence, parallel: int) -> list:
    if parallel <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(fn, items))


def _answer(instance) -> tuple[int, ...] | None:
    answer = getattr(instance, "answer_id", None)
    return None if answer is None else (int(answer),)


def config_id(source: str, k: int, R: float, criterion: str, threshold: float) -> str:
    return f"{source}|k={k}|R={R:g}|{criterion}|t={threshold:.6g}"


class Evaluator:
    """Memoizes per-instance small and large stages across sweep points."""

    def __init__(self, dataset: Sequence, config: CascadeConfig, parallel: int = 1,
                 with_consistency: bool = True) -> None:
        if not dataset:
            raise ConfigError("dataset is empty")
        self.dataset = list(dataset)
        self.config = config
        self.parallel = parallel
        self.small = _parallel_map(lambda inst: run_small(inst, config, with_consistency),
                                   self.dataset, parallel)
        self._large: dict[tuple, LargeStage] = {}

    def large(self, indices: Sequence[int], k: int, R: float, source: str) -> dict[int, LargeStage]:
        todo = [i for i in indices if (i, k, R, source) not in self._large]
        results = _parallel_map(
            lambda i: run_large(self.dataset[i], self.config, self.small[i], k, R, source),
            todo, self.parallel)
        for i, res in zip(todo, results):
            self._large[(i, k, R, source)] = res
        return {i: self._large[(i, k, R, source)] for i in indices}

    def scores(self, criterion: str) -> np.ndarray:
        return np.array([s.score(criterion) for s in self.small])

    def point(self, p: SweepPoint) -> MetricsRow:
        cfg = self.config
        criterion = p.criterion or cfg.exit_criterion
        source = p.ranking_source or cfg.ranking_source
        unscored = criterion in NEEDS_CONSISTENCY and self.small[0].forced_probs is None
        if unscored and (p.threshold is None or p.threshold <= 1):
            raise ConfigError(f"criterion {criterion!r} needs the consistency pass, "
                              "which this evaluator skipped")
        # A threshold above 1 never exits, so the scores are not needed.
        scores = np.full(len(self.dataset), np.nan) if unscored else self.scores(criterion)
        if p.threshold is not None:
            threshold = float(p.threshold)
        elif p.target_exit_ratio is not None:
            threshold = exit_gate.calibrate_threshold(scores, p.target_exit_ratio)
        else:
            threshold = cfg.threshold
        exits = scores >= threshold
        stay = [i for i in range(len(self.dataset)) if not exits[i]]
        large = self.large(stay, p.k, p.R, source)
        correct, flops, records = [], [], []
        charge_consistency = criterion in NEEDS_CONSISTENCY
        for i, inst in enumerate(self.dataset):
            s = self.small[i]
            total = s.prefill_flops + s.decode_flops + (s.consistency_flops if charge_consistency else 0)
            if exits[i]:
                answer = s.generation.answer_ids
            else:
                answer = large[i].generation.answer_ids
                total += large[i].prefill_flops + large[i].decode_flops
            truth = _answer(inst)
            ok = truth is not None and tuple(answer) == truth
            correct.append(ok)
            flops.append(total)
            records.append({"instance": i, "answer": list(answer), "correct": bool(ok),
                            "exited": bool(exits[i]),
                            "score": None if unscored else float(scores[i]),
                            "flops": int(total),
                            "kept": None if exits[i] else list(large[i].directive.kept)})
        L = cfg.large_model.spec.num_layers
        return MetricsRow(
            config_id=config_id(source, p.k, p.R, criterion, threshold),
            k=p.k, R=p.R, threshold=threshold, criterion=criterion,
            accuracy=float(np.mean(correct)),
            exit_ratio=float(np.mean(exits)),
            avg_retention=avg_retention(L, p.k, p.R),
            mean_flops=float(np.mean(flops)),
            ranking_source=source,
            per_instance=records,
        )


def evaluate(dataset: Sequence, config: CascadeConfig, sweep: Iterable[SweepPoint],
             parallel: int = 1) -> list[MetricsRow]:
    """One metrics row per sweep point, in sweep order."""
    ev = Evaluator(dataset, config, parallel)
    return [ev.point(p) for p in sweep]


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_csv(rows: Sequence[MetricsRow], extra: Sequence[str] = (),
                extra_values: Sequence[dict] | None = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(METRICS_HEADER) + list(extra))
    for i, row in enumerate(rows):
        values = [_fmt(v) for v in row.as_record().values()]
        if extra:
            values += [_fmt(extra_values[i][name]) for name in extra]
        writer.writerow(values)
    return buf.getvalue()


def metrics_jsonl(rows: Sequence[MetricsRow]) -> str:
    return "".join(json.dumps(row.as_record(), sort_keys=True) + "\n" for row in rows)
