import time

import numpy as np
import pytest

from expertrag.config import ModelConfig, TaskConfig, TrainConfig
from expertrag.pipeline import ExpertRAG
from expertrag.retrieval import Corpus
from expertrag.task import gen_task
from expertrag.vocab import Vocab

# criterion number -> (passed, detail); filled by the acceptance tests
CRITERIA: dict[int, tuple[bool, str]] = {}

DEFAULT_SEED = 7


def tiny_config(vocab_size: int = 12, **kw) -> ModelConfig:
    base = dict(
        vocab_size=vocab_size, d_model=8, n_layers=2, moe_layers=(1,), n_experts=3, k_experts=1,
        d_ff=6, max_seq_len=24, n_heads=2, k_docs=2, answer_cap=4,
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_vocab() -> Vocab:
    return Vocab.for_task(4, 2, 3)


@pytest.fixture
def tiny_system():
    vocab = tiny_vocab()
    return ExpertRAG(tiny_config(len(vocab)), vocab, seed=3)


@pytest.fixture(scope="session")
def default_task():
    return gen_task(TaskConfig(), DEFAULT_SEED)


def corpus_for(system, task) -> Corpus:
    corpus = Corpus(system.embedding_table)
    for f in task.external_facts:
        corpus.add(f.doc_id, task.vocab.encode(f.doc_text))
    return corpus


@pytest.fixture(scope="session")
def trained(default_task):
    """The default synthetic task trained once with the default configuration."""
    from expertrag.training import train

    task = default_task
    system = ExpertRAG(ModelConfig(vocab_size=len(task.vocab)), task.vocab, seed=DEFAULT_SEED)
    corpus = corpus_for(system, task)
    start = time.perf_counter()
    result = train(system, corpus, task.train, TrainConfig(), DEFAULT_SEED)
    elapsed = time.perf_counter() - start
    return {"system": system, "corpus": corpus, "task": task, "logs": result.logs, "seconds": elapsed}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
