"""Analytic per-query cost model and its check against instrumented counts.

All costs are multiply-accumulate counts.  A query that skips retrieval pays
``(L_q + L_a) * N``; one that retrieves additionally pays the search and
``N_d * N`` for reading the retrieved context, so

    E[cost] = (L_q + L_a) * N + f * (search(M) + N_d * N).

The per-token cost ``N`` (attention included) is calibrated from queries that
did not retrieve.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import instrument
from . import tensor as T
from .config import ModelConfig
from .errors import ContractError, DomainError
from .model import Generator, KVCache, parameter_counts
from .pipeline import CostReport, ExpertRAG, InferenceTrace

SEARCH_KINDS = ("brute", "ann")


@dataclass(frozen=True)
class CostParams:
    N: float
    N_d: float
    M: int
    f: float
    L_q: float
    L_a: float
    d: int = 64
    search: str = "brute"
    c: float = 1.0
    N_dense: float = 0.0

    def validate(self) -> None:
        if not 0.0 <= self.f <= 1.0 or math.isnan(self.f):
            raise DomainError(f"retrieval fraction f must lie in [0, 1], got {self.f}")
        for name in ("N", "N_d", "M", "L_q", "L_a", "d", "c", "N_dense"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.search not in SEARCH_KINDS:
            raise DomainError(f"search cost must be one of {SEARCH_KINDS}, got {self.search!r}")

    def search_cost(self) -> float:
        if self.search == "brute":
            return self.c * self.M * self.d
        return self.c * math.log2(self.M) if self.M > 1 else 0.0

    def with_f(self, f: float) -> "CostParams":
        return replace(self, f=f)


def expected_cost(params: CostParams) -> float:
    params.validate()
    gen = (params.L_q + params.L_a) * params.N
    return gen + params.f * (params.search_cost() + params.N_d * params.N)


def retrieval_share(params: CostParams) -> float:
    """Fraction of an always-retrieve query's cost spent on search and context."""
    full = expected_cost(params.with_f(1.0))
    if full == 0:
        raise DomainError("zero cost: retrieval share undefined")
    return 1.0 - expected_cost(params.with_f(0.0)) / full


def savings_ratio(params: CostParams, baseline: CostParams) -> float:
    base = expected_cost(baseline)
    if base == 0:
        raise DomainError("baseline cost is zero")
    return 1.0 - expected_cost(params) / base


def always_retrieve(params: CostParams) -> CostParams:
    return params.with_f(1.0)


def dense_baseline(params: CostParams) -> CostParams:
    """A dense model that never retrieves and pays ``N_dense`` per token."""
    if params.N_dense <= 0:
        raise DomainError("dense baseline needs a positive N_dense")
    return replace(params, N=params.N_dense, f=0.0)


def calibrate(reports: Sequence[CostReport], M: int, d: int, search: str = "brute") -> CostParams:
    """Fit CostParams to a measured query stream.

    N is total non-search multiplies per processed token over the queries that
    did not retrieve; L_q, L_a and f are stream means; N_d is the mean context
    length of the retrieving queries.
    """
    if not reports:
        raise ContractError("calibration needs at least one cost report")
    plain = [r for r in reports if not r.retrieved]
    if not plain:
        raise ContractError("calibration needs at least one query that did not retrieve")
    gen = sum(r.total - r.search for r in plain)
    tokens = sum(r.query_tokens + r.answer_tokens for r in plain)
    fetched = [r.context_tokens for r in reports if r.retrieved]
    return CostParams(
        N=gen / tokens,
        N_d=float(np.mean(fetched)) if fetched else 0.0,
        M=M,
        f=float(np.mean([r.retrieved for r in reports])),
        L_q=float(np.mean([r.query_tokens for r in reports])),
        L_a=float(np.mean([r.answer_tokens for r in reports])),
        d=d,
        search=search,
    )


@dataclass
class Validation:
    f_hat: float
    measured: float
    predicted: float
    deviation: float
    # category -> (measured mean, predicted mean)
    breakdown: dict[str, tuple[float, float]]


def validate_against_measurement(reports: Sequence[CostReport], params: CostParams) -> Validation:
    """Compare the mean measured cost with expected_cost at the empirical retrieval fraction."""
    if not reports:
        raise ContractError("validate_against_measurement needs at least one report")
    f_hat = float(np.mean([r.retrieved for r in reports]))
    p = params.with_f(f_hat)
    predicted = expected_cost(p)
    measured = float(np.mean([r.total for r in reports]))
    search_pred = f_hat * p.search_cost()
    search_meas = float(np.mean([r.search for r in reports]))
    breakdown = {
        "search": (search_meas, search_pred),
        "generation": (measured - search_meas, predicted - search_pred),
    }
    for cat in instrument.CATEGORIES:
        if cat != "search":
            breakdown[cat] = (float(np.mean([r.macs.get(cat, 0) for r in reports])), float("nan"))
    deviation = abs(measured - predicted) / predicted if predicted else float("inf")
    return Validation(f_hat, measured, predicted, deviation, breakdown)


def dense_comparison_config(cfg: ModelConfig, factor: float = 10.0) -> ModelConfig:
    """Smallest all-dense config (d_ff = 2 d, same depth) with at least ``factor`` x the total parameters."""
    target = factor * parameter_counts(cfg)[0]
    d = cfg.d_model
    while True:
        dense = cfg.replace(d_model=d, d_ff=2 * d, moe_layers=(), n_experts=1, k_experts=1)
        if parameter_counts(dense)[0] >= target:
            return dense
        d += cfg.n_heads


def replay_cost(generator: Generator, trace: InferenceTrace, vocab_ans: int) -> int:
    """Multiplies a generator spends processing the token stream of ``trace``.

    The stream (fused input, answer marker, generated tokens) is fed through a
    KV cache exactly as greedy decoding would, so the count is comparable with
    the trace's own generation cost.
    """
    counter = instrument.MacCounter()
    ids = list(trace.fused.tokens) + [vocab_ans]
    segs = list(trace.fused.segments) + [0]
    cache = KVCache(generator.config.n_layers)
    fed = trace.answer[: max(trace.cost.answer_tokens - 1, 0)]
    with instrument.counting(counter), T.no_grad():
        generator.forward(ids, segs, cache=cache)
        for tok in fed:
            generator.forward([tok], [0], cache=cache)
    return counter.total


@dataclass
class BenchRow:
    config_id: str
    f_hat: float
    measured: float
    predicted: float
    deviation: float
    savings_vs_retrieve: float
    savings_vs_dense: float
    dense_reduction: float

    FIELDS = (
        "config_id", "f_hat", "measured_mean", "predicted", "deviation",
        "savings_vs_always_retrieve", "savings_vs_dense", "dense_reduction_no_retrieval",
    )

    def line(self) -> str:
        vals = [self.f_hat, self.measured, self.predicted, self.deviation,
                self.savings_vs_retrieve, self.savings_vs_dense, self.dense_reduction]
        return self.config_id + "\t" + "\t".join(f"{v:.6f}" for v in vals) + "\n"

    @classmethod
    def header(cls) -> str:
        return "\t".join(cls.FIELDS) + "\n"


def bench(
    system: ExpertRAG,
    queries: Sequence[Sequence[int]],
    corpus,
    seed: int = 0,
    config_id: str = "default",
    dense_factor: float = 10.0,
) -> tuple[BenchRow, CostParams, list[InferenceTrace], list[InferenceTrace]]:
    """Run a query stream under the learned gate and under forced retrieval, then score the cost model."""
    from .pipeline import infer

    normal = [infer(q, system, corpus, seed + i, "normal") for i, q in enumerate(queries)]
    forced = [infer(q, system, corpus, seed + i, "force_retrieve") for i, q in enumerate(queries)]
    reports = [t.cost for t in normal]
    params = calibrate(reports + [t.cost for t in forced], corpus.M, system.config.d_model)
    check = validate_against_measurement(reports, params)
    measured_forced = float(np.mean([t.cost.total for t in forced]))

    dense_gen = Generator(dense_comparison_config(system.generator.config, dense_factor), seed)
    plain = [t for t in normal if not t.z_effective]
    if plain:
        dense_costs = np.array([replay_cost(dense_gen, t, system.vocab.ans) for t in plain], dtype=float)
        own = np.array([t.cost.total for t in plain], dtype=float)
        reduction = float(dense_costs.mean() / own.mean())
        n_dense = float(dense_costs.sum() / sum(t.cost.query_tokens + t.cost.answer_tokens for t in plain))
    else:
        reduction, n_dense = float("nan"), 0.0
    params = replace(params, N_dense=n_dense, f=check.f_hat)
    vs_dense = savings_ratio(params, dense_baseline(params)) if n_dense > 0 else float("nan")
    row = BenchRow(
        config_id,
        check.f_hat,
        check.measured,
        check.predicted,
        check.deviation,
        1.0 - check.measured / measured_forced,
        vs_dense,
        reduction,
    )
    return row, params, normal, forced
