"""End-to-end inference: gate, optional retrieval, fusion, greedy MoE decoding."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import instrument
from . import tensor as T
from .config import ModelConfig
from .errors import ConfigError, ContractError
from .fusion import AugmentationModule, FusedInput, augment_fuse, concat_context
from .gate import GateDecision, RetrievalGate, decide, gate_score, pool_query
from .model import Generator, KVCache, parameter_counts
from .retrieval import Corpus, RetrievalResult, embed_document_tensor, search_top_k
from .tensor import Tensor
from .vocab import Vocab

MODES = ("normal", "force_retrieve", "no_retrieve", "dense")


class ExpertRAG:
    """Generator, retrieval gate and (optional) augmentation module sharing one vocabulary."""

    def __init__(
        self,
        config: ModelConfig,
        vocab: Vocab,
        seed: int = 0,
        fusion_mode: str = "concat",
        gate_mode: str = "threshold",
        generator: Generator | None = None,
        gate: RetrievalGate | None = None,
        augment: AugmentationModule | None = None,
    ):
        if config.vocab_size != len(vocab):
            raise ConfigError(f"config vocab_size={config.vocab_size} but vocabulary has {len(vocab)} tokens")
        if fusion_mode not in ("concat", "augment"):
            raise ConfigError(f"fusion.mode must be 'concat' or 'augment', got {fusion_mode!r}")
        self.config = config
        self.vocab = vocab
        self.fusion_mode = fusion_mode
        self.generator = generator or Generator(config, seed)
        self.gate = gate or RetrievalGate.init(config.d_model, config.gate_threshold, gate_mode)
        if augment is None and fusion_mode == "augment":
            augment = AugmentationModule.init(config.d_model, config.k_docs + 1, seed + 1)
        self.augment = augment

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.generator.params)
        out["gate.weight"] = self.gate.weight
        out["gate.bias"] = self.gate.bias
        if self.augment is not None:
            out.update(self.augment.named_parameters())
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    @property
    def embedding_table(self) -> Tensor:
        return self.generator.params["tok_emb"]

    def query_representation(self, query: Sequence[int], track: bool = False) -> Tensor:
        """Pooled token embeddings of the query (h_q)."""
        table = self.embedding_table if track else self.embedding_table.detach()
        return pool_query(T.take(table, list(query)))

    def with_retrieval_depth(self, k_docs: int) -> "ExpertRAG":
        """A view sharing all parameters that retrieves ``k_docs`` documents (at most the trained depth)."""
        if not 0 <= k_docs <= self.generator.config.k_docs:
            raise ConfigError(f"retrieval depth must lie in [0, {self.generator.config.k_docs}], got {k_docs}")
        view = ExpertRAG.__new__(ExpertRAG)
        view.__dict__.update(self.__dict__)
        view.config = self.config.replace(k_docs=k_docs)
        return view

    def context_budget(self) -> int:
        extra = 1 if self.fusion_mode == "augment" else 0
        return self.config.max_seq_len - 1 - self.config.answer_cap - extra


@dataclass
class CostReport:
    macs: dict[str, int]
    tokens_processed: int
    context_tokens: int
    query_tokens: int
    answer_tokens: int
    n_total: int
    n_active: int
    active_measured: float
    retrieved: bool

    @property
    def total(self) -> int:
        return int(sum(self.macs.values()))

    @property
    def search(self) -> int:
        return int(self.macs.get("search", 0))

    @property
    def generation(self) -> int:
        return self.total - self.search


@dataclass
class InferenceTrace:
    query: list[int]
    decision: GateDecision
    retrieval: RetrievalResult | None
    fused: FusedInput
    experts: list[np.ndarray]  # per MoE layer: selected experts for every processed token
    answer: list[int]
    cost: CostReport
    corpus_empty: bool = False
    z_effective: int = 0
    mode: str = "normal"

    def retrieved_ids(self) -> list[str]:
        return [] if self.retrieval is None else self.retrieval.ids

    def to_line(self, query_id: str, vocab: Vocab) -> str:
        docs = ",".join(self.retrieved_ids()) or "-"
        answer = " ".join(vocab.decode(self.answer)) or "-"
        return (
            f"{query_id}\t{self.decision.p_ret:.17g}\t{self.z_effective}\t{docs}\t{answer}\t"
            f"{self.cost.total}\t{self.cost.search}\t{self.cost.context_tokens}\n"
        )


TRACE_HEADER = "query_id\tp_ret\tz_ret\tretrieved\tanswer\tmultiplies\tsearch_comparisons\tN_d\n"


def _gate_decision(system: ExpertRAG, query: Sequence[int], seed: int, mode: str) -> GateDecision:
    h_q = system.query_representation(query)
    p = gate_score(h_q, system.gate)
    dec = decide(p.item(), system.gate, np.random.default_rng(seed))
    if mode == "force_retrieve":
        return GateDecision(dec.p_ret, 1, "forced", dec.draw)
    if mode == "no_retrieve":
        return GateDecision(dec.p_ret, 0, "forced", dec.draw)
    return dec


def build_input(
    system: ExpertRAG, query: Sequence[int], z_ret: int, corpus: Corpus | None, track: bool = False
) -> tuple[FusedInput, RetrievalResult | None, Tensor | None, bool]:
    """Fused generator input for a gate outcome.

    Returns ``(fused, retrieval, prefix, corpus_empty)``; ``prefix`` is the
    augmentation vector in augment mode and ``None`` otherwise.
    """
    cfg = system.config
    corpus_empty = bool(z_ret) and (corpus is None or corpus.M == 0)
    retrieval = None
    if z_ret and not corpus_empty and cfg.k_docs > 0:
        q_emb = corpus.embed_query(query)
        retrieval = search_top_k(q_emb, cfg.k_docs, corpus)
    if system.fusion_mode == "concat":
        fused = concat_context(query, retrieval, corpus, system.vocab.sep, system.context_budget())
        return fused, retrieval, None, corpus_empty
    fused = concat_context(query, None, None, system.vocab.sep, system.context_budget())
    h_q = system.query_representation(query, track=track)
    docs = []
    if retrieval is not None:
        table = system.embedding_table if track else system.embedding_table.detach()
        docs = [embed_document_tensor(corpus[i].text, table) for i in retrieval.ids if corpus[i].text]
        fused.doc_ids = tuple(retrieval.ids)
    prefix, _ = augment_fuse(h_q, docs, system.augment)
    return fused, retrieval, prefix, corpus_empty


def greedy_decode(
    system: ExpertRAG, fused: FusedInput, prefix: Tensor | None = None, expert_override: int | None = None
) -> tuple[list[int], int, list[np.ndarray]]:
    """Greedy KV-cached decoding after the answer marker.

    Returns ``(answer ids without end marker, tokens generated, experts per MoE layer)``.
    """
    cfg, vocab, gen = system.config, system.vocab, system.generator
    cache = KVCache(cfg.n_layers)
    ids = list(fused.tokens) + [vocab.ans]
    segs = list(fused.segments) + [0]
    experts = [[] for _ in cfg.moe_layers]
    answer: list[int] = []
    generated = 0
    with T.no_grad():
        res = gen.forward(ids, segs, prefix=prefix, cache=cache, expert_override=expert_override)
        while True:
            for i, dec in enumerate(res.decisions):
                experts[i].append(dec.selected)
            nxt = int(np.argmax(res.logits.data[-1]))
            generated += 1
            if nxt == vocab.eoa or generated >= cfg.answer_cap:
                if nxt != vocab.eoa:
                    answer.append(nxt)
                break
            answer.append(nxt)
            res = gen.forward([nxt], [0], cache=cache, expert_override=expert_override)
    return answer, generated, [np.concatenate(e) for e in experts]


def infer(
    query: Sequence[int],
    system: ExpertRAG,
    corpus: Corpus | None,
    seed: int = 0,
    mode: str = "normal",
) -> InferenceTrace:
    if mode not in MODES:
        raise ConfigError(f"unknown inference mode {mode!r}; expected one of {', '.join(MODES)}")
    query = list(query)
    if not query:
        raise ContractError("infer needs a non-empty query")
    counter = instrument.MacCounter()
    with instrument.counting(counter), T.no_grad():
        decision = _gate_decision(system, query, seed, mode)
        fused, retrieval, prefix, corpus_empty = build_input(system, query, decision.z_ret, corpus)
        override = 0 if mode == "dense" else None
        answer, generated, experts = greedy_decode(system, fused, prefix, override)
    n_total, n_active = parameter_counts(system.generator.config)
    context = len(fused.tokens) - len(query)
    cost = CostReport(
        macs={k: counter.macs.get(k, 0) for k in instrument.CATEGORIES},
        tokens_processed=counter.tokens_processed,
        context_tokens=context,
        query_tokens=len(query),
        answer_tokens=generated,
        n_total=n_total,
        n_active=n_active,
        active_measured=counter.active_params_per_token(),
        retrieved=retrieval is not None,
    )
    z_eff = int(decision.z_ret and not corpus_empty)
    return InferenceTrace(query, decision, retrieval, fused, experts, answer, cost, corpus_empty, z_eff, mode)


def instrumented_infer(query, system, corpus, seed: int = 0, mode: str = "normal") -> tuple[InferenceTrace, CostReport]:
    trace = infer(query, system, corpus, seed, mode)
    return trace, trace.cost


def sequence_log_prob(system: ExpertRAG, fused: FusedInput, answer: Sequence[int], prefix: Tensor | None = None) -> float:
    """Sum of log p(answer token) under teacher forcing after the answer marker."""
    vocab = system.vocab
    ids = list(fused.tokens) + [vocab.ans] + list(answer)
    segs = list(fused.segments) + [0] * (1 + len(answer))
    with T.no_grad():
        logits = system.generator.forward(ids[:-1], segs[:-1], prefix=prefix).logits.data
    offset = 0 if prefix is None else 1
    start = offset + len(fused.tokens)  # row predicting answer[0]
    rows = logits[start : start + len(answer)]
    z = rows - rows.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(logp[np.arange(len(answer)), list(answer)].sum())


@dataclass
class MarginalLikelihood:
    probability: float
    p_ret: float
    p_without: float
    p_with: float


def marginal_likelihood(query, answer, system: ExpertRAG, corpus: Corpus | None) -> MarginalLikelihood:
    """p(a|q) = (1 - p_ret) p(a | [q]) + p_ret p(a | [q; D_q]) with deterministic top-k D_q."""
    answer = list(answer)
    if not answer:
        raise ContractError("marginal_likelihood needs a non-empty answer")
    with T.no_grad():
        p_ret = gate_score(system.query_representation(query), system.gate).item()
        branches = []
        for z in (0, 1):
            fused, _, prefix, _ = build_input(system, query, z, corpus)
            branches.append(math.exp(sequence_log_prob(system, fused, answer, prefix)))
    return MarginalLikelihood(mix_branches(p_ret, branches[0], branches[1]), p_ret, branches[0], branches[1])


def mix_branches(p_ret: float, p_without: float, p_with: float) -> float:
    if p_ret == 0.0:
        return p_without
    if p_ret == 1.0:
        return p_with
    return (1.0 - p_ret) * p_without + p_ret * p_with
