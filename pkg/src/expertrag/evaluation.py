"""Evaluation metrics, ablation modes and the corpus hot-update probe."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import LoadError, VocabularyError
from .pipeline import MODES, ExpertRAG, InferenceTrace, infer, sequence_log_prob, build_input
from .retrieval import Corpus
from .task import Example, Fact
from . import checkpoint


@dataclass
class EvalMetrics:
    mode: str
    n_queries: int
    accuracy: float
    accuracy_parametric: float
    accuracy_external: float
    gate_precision: float
    gate_recall: float
    gate_specificity: float
    retrieval_fraction: float
    mean_cost: float
    mean_cost_no_retrieval: float
    mean_cost_retrieval: float
    retrieval_useful: float

    FIELDS = (
        "mode", "n_queries", "accuracy", "accuracy_parametric", "accuracy_external",
        "gate_precision", "gate_recall", "gate_specificity", "retrieval_fraction",
        "mean_cost", "mean_cost_no_retrieval", "mean_cost_retrieval", "retrieval_useful",
    )

    def row(self) -> str:
        d = asdict(self)
        out = []
        for k in self.FIELDS:
            v = d[k]
            out.append(f"{v:.6f}" if isinstance(v, float) else str(v))
        return "\t".join(out) + "\n"

    @classmethod
    def header(cls) -> str:
        return "\t".join(cls.FIELDS) + "\n"


def _rate(num: float, den: float) -> float:
    return float(num) / float(den) if den else 0.0


def confusion(predicted: Sequence[int], labels: Sequence[int]) -> dict[str, int]:
    p = np.asarray(predicted, dtype=bool)
    y = np.asarray(labels, dtype=bool)
    return {
        "tp": int(np.sum(p & y)),
        "fp": int(np.sum(p & ~y)),
        "fn": int(np.sum(~p & y)),
        "tn": int(np.sum(~p & ~y)),
    }


def check_vocabulary(system: ExpertRAG, examples: Sequence[Example]) -> None:
    for ex in examples:
        try:
            system.vocab.encode(ex.query)
            system.vocab.encode(ex.answer)
        except VocabularyError as exc:
            raise LoadError(f"test set does not match checkpoint vocabulary: {exc}") from None


def run_queries(
    system: ExpertRAG, examples: Sequence[Example], corpus: Corpus, mode: str = "normal", seed: int = 0
) -> list[InferenceTrace]:
    check_vocabulary(system, examples)
    return [infer(system.vocab.encode(ex.query), system, corpus, seed + i, mode) for i, ex in enumerate(examples)]


def metrics_from_traces(
    system: ExpertRAG, examples: Sequence[Example], traces: Sequence[InferenceTrace], corpus: Corpus, mode: str
) -> EvalMetrics:
    vocab = system.vocab
    correct = np.array([tr.answer == vocab.encode(ex.answer) for ex, tr in zip(examples, traces)], dtype=float)
    labels = np.array([ex.label for ex in examples])
    z = np.array([tr.z_effective for tr in traces])
    cm = confusion(z, labels)
    costs = np.array([tr.cost.total for tr in traces], dtype=float)

    useful = 0
    for ex, tr in zip(examples, traces):
        want = vocab.encode(f"{ex.query} {ex.answer}")
        if any(corpus[i].text == want for i in tr.retrieved_ids() if i in corpus):
            useful += 1

    def mean_of(sel):
        return float(costs[sel].mean()) if np.any(sel) else 0.0

    return EvalMetrics(
        mode=mode,
        n_queries=len(examples),
        accuracy=float(correct.mean()) if len(correct) else 0.0,
        accuracy_parametric=mean_of_bool(correct, labels == 0),
        accuracy_external=mean_of_bool(correct, labels == 1),
        gate_precision=_rate(cm["tp"], cm["tp"] + cm["fp"]),
        gate_recall=_rate(cm["tp"], cm["tp"] + cm["fn"]),
        gate_specificity=_rate(cm["tn"], cm["tn"] + cm["fp"]),
        retrieval_fraction=float(z.mean()) if len(z) else 0.0,
        mean_cost=float(costs.mean()) if len(costs) else 0.0,
        mean_cost_no_retrieval=mean_of(z == 0),
        mean_cost_retrieval=mean_of(z == 1),
        retrieval_useful=_rate(useful, int(z.sum())),
    )


def mean_of_bool(values: np.ndarray, sel: np.ndarray) -> float:
    return float(values[sel].mean()) if np.any(sel) else 0.0


def evaluate(
    system: ExpertRAG, examples: Sequence[Example], corpus: Corpus, mode: str = "normal", seed: int = 0
) -> tuple[EvalMetrics, list[str]]:
    """Metrics over the whole test set plus one trace line per query, ordered by query id."""
    if mode not in MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    traces = run_queries(system, examples, corpus, mode, seed)
    lines = [tr.to_line(f"q{i:05d}", system.vocab) for i, tr in enumerate(traces)]
    return metrics_from_traces(system, examples, traces, corpus, mode), lines


@dataclass
class ProbeResult:
    fact_id: str
    correct_before: bool
    correct_after: bool
    answer_before: str
    answer_after: str
    rank_after: int | None
    log_prob_before: float
    log_prob_after: float
    hash_before: str
    hash_after: str

    @property
    def flipped(self) -> bool:
        return (not self.correct_before) and self.correct_after and self.hash_before == self.hash_after


def corpus_update_probe(system: ExpertRAG, corpus: Corpus, facts: Sequence[Fact], seed: int = 0) -> ProbeResult:
    """Hold one external fact's document back, query it, insert the document, query again.

    The first held-out external fact whose query is answered wrongly without
    its document is used.  No parameter is touched; the checkpoint hash is
    compared before and after.
    """
    vocab = system.vocab
    hash_before = checkpoint.parameter_hash(system)
    candidates = [f for f in facts if f.split == "external" and f.heldout] or [f for f in facts if f.split == "external"]
    chosen = None
    for fact in candidates:
        reduced = corpus.without(fact.doc_id)
        q = vocab.encode(fact.query)
        tr = infer(q, system, reduced, seed, "normal")
        if tr.answer != vocab.encode(fact.value):
            chosen = (fact, reduced, tr)
            break
    if chosen is None:
        raise LoadError("no external fact is answered wrongly without its document")
    fact, reduced, before = chosen
    q, gold = vocab.encode(fact.query), vocab.encode(fact.value)
    fused, _, prefix, _ = build_input(system, q, 1, reduced)
    lp_before = sequence_log_prob(system, fused, gold + [vocab.eoa], prefix)

    reduced.add(fact.doc_id, vocab.encode(fact.doc_text))
    after = infer(q, system, reduced, seed, "normal")
    fused, result, prefix, _ = build_input(system, q, 1, reduced)
    lp_after = sequence_log_prob(system, fused, gold + [vocab.eoa], prefix)
    rank = result.ids.index(fact.doc_id) + 1 if result is not None and fact.doc_id in result.ids else None
    return ProbeResult(
        fact.id,
        before.answer == gold,
        after.answer == gold,
        " ".join(vocab.decode(before.answer)),
        " ".join(vocab.decode(after.answer)),
        rank,
        lp_before,
        lp_after,
        hash_before,
        checkpoint.parameter_hash(system),
    )
