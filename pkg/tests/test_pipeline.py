import math

import numpy as np
import pytest

from expertrag.errors import ConfigError, ContractError
from expertrag.pipeline import (
    MODES,
    TRACE_HEADER,
    ExpertRAG,
    build_input,
    infer,
    instrumented_infer,
    marginal_likelihood,
    mix_branches,
    sequence_log_prob,
)
from expertrag.retrieval import Corpus

from conftest import tiny_config, tiny_vocab


def make_corpus(system):
    v = system.vocab
    corpus = Corpus(system.embedding_table)
    for i, text in enumerate(["e0 r0 v0", "e1 r1 v1", "e2 r0 v2", "e3 r1 v0"]):
        corpus.add(f"d{i}", v.encode(text))
    return corpus


def set_bias(system, b):
    system.gate.weight.data[:] = 0.0
    system.gate.bias.data[...] = b


def q(system, text="e1 r1"):
    return system.vocab.encode(text)


def test_closed_gate_uses_query_only(tiny_system):
    set_bias(tiny_system, -30.0)
    corpus = make_corpus(tiny_system)
    tr = infer(q(tiny_system), tiny_system, corpus, 0)
    assert tr.decision.p_ret < 1e-12 and tr.decision.z_ret == 0
    assert tr.retrieval is None and tr.retrieved_ids() == []
    assert tr.fused.tokens == q(tiny_system) and set(tr.fused.segments) == {0}
    assert tr.cost.search == 0 and tr.cost.context_tokens == 0


def test_open_gate_retrieves_top_k_and_concatenates(tiny_system):
    set_bias(tiny_system, 30.0)
    corpus = make_corpus(tiny_system)
    query = q(tiny_system)
    tr = infer(query, tiny_system, corpus, 0)
    assert tr.z_effective == 1
    assert len(tr.retrieval) == min(tiny_system.config.k_docs, corpus.M)
    # layout [q; SEP; d1; SEP; d2] in rank order with segment ids by rank
    expected, segs = list(query), [0] * len(query)
    for rank, doc_id in enumerate(tr.retrieved_ids(), 1):
        expected += [tiny_system.vocab.sep] + corpus[doc_id].text
        segs += [rank] * (1 + len(corpus[doc_id].text))
    assert tr.fused.tokens == expected and tr.fused.segments == segs
    assert tr.cost.search == corpus.M * tiny_system.config.d_model
    assert tr.cost.context_tokens == len(expected) - len(query)


def test_forced_modes_override_gate(tiny_system):
    corpus = make_corpus(tiny_system)
    set_bias(tiny_system, -30.0)
    assert infer(q(tiny_system), tiny_system, corpus, 0, "force_retrieve").z_effective == 1
    set_bias(tiny_system, 30.0)
    tr = infer(q(tiny_system), tiny_system, corpus, 0, "no_retrieve")
    assert tr.z_effective == 0 and tr.cost.search == 0


def test_dense_mode_routes_every_token_to_expert_zero(tiny_system):
    tr = infer(q(tiny_system), tiny_system, make_corpus(tiny_system), 0, "dense")
    assert all((e == 0).all() for e in tr.experts)


def test_trace_determinism(tiny_system):
    corpus = make_corpus(tiny_system)
    for mode in MODES:
        a = infer(q(tiny_system), tiny_system, corpus, 5, mode)
        b = infer(q(tiny_system), tiny_system, corpus, 5, mode)
        assert a.to_line("q", tiny_system.vocab) == b.to_line("q", tiny_system.vocab)
        assert a.answer == b.answer and a.cost == b.cost
        assert all(np.array_equal(x, y) for x, y in zip(a.experts, b.experts))


def test_sample_mode_is_reproducible_per_seed(tiny_system):
    tiny_system.gate.mode = "sample"
    set_bias(tiny_system, 0.0)
    corpus = make_corpus(tiny_system)
    zs = [infer(q(tiny_system), tiny_system, corpus, s).z_effective for s in range(40)]
    assert zs == [infer(q(tiny_system), tiny_system, corpus, s).z_effective for s in range(40)]
    assert 0 < sum(zs) < 40


def test_empty_corpus_falls_back_to_no_retrieval(tiny_system):
    set_bias(tiny_system, 30.0)
    empty = Corpus(tiny_system.embedding_table)
    tr = infer(q(tiny_system), tiny_system, empty, 0)
    assert tr.corpus_empty and tr.z_effective == 0 and tr.retrieval is None
    ref = infer(q(tiny_system), tiny_system, empty, 0, "no_retrieve")
    assert tr.answer == ref.answer and tr.fused == ref.fused and tr.cost.total == ref.cost.total
    assert infer(q(tiny_system), tiny_system, None, 0).corpus_empty


def test_answer_respects_cap_and_trace_line(tiny_system):
    tr = infer(q(tiny_system), tiny_system, None, 0)
    assert tr.cost.answer_tokens <= tiny_system.config.answer_cap
    line = tr.to_line("q00001", tiny_system.vocab)
    assert line.count("\t") == TRACE_HEADER.count("\t") and line.endswith("\n")


def test_infer_errors(tiny_system):
    with pytest.raises(ContractError):
        infer([], tiny_system, None)
    with pytest.raises(ConfigError):
        infer(q(tiny_system), tiny_system, None, 0, "sometimes")


def test_marginal_degenerate_and_convex(tiny_system):
    corpus = make_corpus(tiny_system)
    query, answer = q(tiny_system), tiny_system.vocab.encode("v1 <eoa>")
    set_bias(tiny_system, -800.0)
    ml = marginal_likelihood(query, answer, tiny_system, corpus)
    assert ml.p_ret == 0.0 and ml.probability == ml.p_without
    set_bias(tiny_system, 800.0)
    ml = marginal_likelihood(query, answer, tiny_system, corpus)
    assert ml.p_ret == 1.0 and ml.probability == ml.p_with
    for b in (-2.0, 0.0, 1.5):
        set_bias(tiny_system, b)
        ml = marginal_likelihood(query, answer, tiny_system, corpus)
        lo, hi = sorted((ml.p_without, ml.p_with))
        assert lo - 1e-15 <= ml.probability <= hi + 1e-15


def test_marginal_branches_match_independent_evaluation(tiny_system):
    corpus = make_corpus(tiny_system)
    query, answer = q(tiny_system), tiny_system.vocab.encode("v1 <eoa>")
    set_bias(tiny_system, 0.0)
    ml = marginal_likelihood(query, answer, tiny_system, corpus)
    branches = [math.exp(sequence_log_prob(tiny_system, build_input(tiny_system, query, z, corpus)[0], answer)) for z in (0, 1)]
    assert ml.p_without == branches[0] and ml.p_with == branches[1]
    assert abs(ml.probability - 0.5 * (branches[0] + branches[1])) < 1e-15
    assert mix_branches(0.5, 0.2, 0.8) == 0.5


def test_marginal_needs_answer(tiny_system):
    with pytest.raises(ContractError):
        marginal_likelihood(q(tiny_system), [], tiny_system, None)


def test_greedy_answer_is_argmax_of_teacher_forced_distribution(tiny_system):
    corpus = make_corpus(tiny_system)
    tr = infer(q(tiny_system), tiny_system, corpus, 0)
    v = tiny_system.vocab
    answer = tr.answer + ([v.eoa] if tr.cost.answer_tokens > len(tr.answer) else [])
    best = sequence_log_prob(tiny_system, tr.fused, answer)
    # changing the first token to any other id cannot score higher
    for alt in range(len(v)):
        if alt != answer[0]:
            assert sequence_log_prob(tiny_system, tr.fused, [alt]) <= sequence_log_prob(tiny_system, tr.fused, answer[:1])
    assert best <= 0.0


def test_instrumented_counts_and_categories(tiny_system):
    corpus = make_corpus(tiny_system)
    set_bias(tiny_system, 30.0)
    tr, cost = instrumented_infer(q(tiny_system), tiny_system, corpus)
    assert cost is tr.cost
    assert all(v >= 0 for v in cost.macs.values())
    assert cost.macs["attention"] > 0 and cost.macs["experts"] > 0 and cost.macs["gate"] == tiny_system.config.d_model
    assert cost.n_active <= cost.n_total
    assert cost.tokens_processed == len(tr.fused.tokens) + cost.answer_tokens


def test_retrieval_depth_view(tiny_system):
    corpus = make_corpus(tiny_system)
    set_bias(tiny_system, 30.0)
    shallow = tiny_system.with_retrieval_depth(1)
    assert len(infer(q(tiny_system), shallow, corpus).retrieval) == 1
    assert shallow.generator is tiny_system.generator
    with pytest.raises(ConfigError):
        tiny_system.with_retrieval_depth(5)


def test_augment_fusion_prepends_one_position():
    vocab = tiny_vocab()
    system = ExpertRAG(tiny_config(len(vocab)), vocab, seed=2, fusion_mode="augment")
    corpus = make_corpus(system)
    set_bias(system, 30.0)
    tr = infer(q(system), system, corpus, 0)
    assert tr.fused.tokens == q(system) and len(tr.fused.doc_ids) == system.config.k_docs
    assert tr.cost.macs["fusion"] > 0
    assert tr.cost.tokens_processed == len(q(system)) + 1 + tr.cost.answer_tokens
    with pytest.raises(ConfigError):
        ExpertRAG(tiny_config(len(vocab)), vocab, fusion_mode="blend")
