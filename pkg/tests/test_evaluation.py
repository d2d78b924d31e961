import numpy as np
import pytest

from expertrag.errors import LoadError
from expertrag.evaluation import EvalMetrics, confusion, corpus_update_probe, evaluate, run_queries
from expertrag.task import Example, Fact

from conftest import corpus_for, tiny_config
from expertrag.config import TaskConfig
from expertrag.pipeline import ExpertRAG
from expertrag.task import gen_task


@pytest.fixture(scope="module")
def setup():
    task = gen_task(TaskConfig(n_entities=8, n_relations=3, n_facts=20, n_values=6), 2)
    system = ExpertRAG(tiny_config(len(task.vocab), d_model=16, max_seq_len=32), task.vocab, seed=2)
    system.gate.mode = "sample"
    return task, system, corpus_for(system, task)


def test_confusion_counts():
    assert confusion([1, 1, 0, 0, 1], [1, 0, 0, 1, 1]) == {"tp": 2, "fp": 1, "fn": 1, "tn": 1}


def test_forced_modes(setup):
    task, system, corpus = setup
    m, lines = evaluate(system, task.test, corpus, "no_retrieve")
    assert m.retrieval_fraction == 0.0 and len(lines) == len(task.test)
    assert all(line.split("\t")[6] == "0" for line in lines)
    m, _ = evaluate(system, task.test, corpus, "force_retrieve")
    assert m.retrieval_fraction == 1.0 and m.gate_recall == 1.0 and m.gate_specificity == 0.0


def test_metrics_match_confusion_matrix_oracle(setup):
    task, system, corpus = setup
    m, lines = evaluate(system, task.test, corpus, "normal", seed=4)
    z = [int(line.split("\t")[2]) for line in lines]
    y = [ex.label for ex in task.test]
    tp = sum(a and b for a, b in zip(z, y))
    fp = sum(a and not b for a, b in zip(z, y))
    fn = sum(b and not a for a, b in zip(z, y))
    tn = sum(not a and not b for a, b in zip(z, y))
    assert m.gate_precision == (tp / (tp + fp) if tp + fp else 0.0)
    assert m.gate_recall == tp / (tp + fn)
    assert m.gate_specificity == tn / (tn + fp)
    assert m.retrieval_fraction == np.mean(z)
    assert lines == [f"q{i:05d}" + line[6:] for i, line in enumerate(lines)]
    for name in EvalMetrics.FIELDS[2:9]:
        assert 0.0 <= getattr(m, name) <= 1.0


def test_row_and_header_align(setup):
    task, system, corpus = setup
    m, _ = evaluate(system, task.test[:3], corpus, "dense")
    assert len(m.row().split("\t")) == len(EvalMetrics.header().split("\t"))


def test_vocabulary_mismatch_is_a_load_error(setup):
    task, system, corpus = setup
    with pytest.raises(LoadError):
        run_queries(system, [Example("e99 r0", "v0", 1)], corpus)


def test_probe_without_candidates_is_a_load_error(setup):
    task, system, corpus = setup
    with pytest.raises(LoadError):
        corpus_update_probe(system, corpus, [Fact("p0", "e0", "r0", "v0", "parametric")])


def test_probe_never_touches_parameters(setup):
    task, system, corpus = setup
    system.gate.mode = "threshold"
    probe = corpus_update_probe(system, corpus, task.facts)
    assert probe.hash_before == probe.hash_after
    assert not probe.correct_before
    assert corpus.M == len(task.external_facts)
