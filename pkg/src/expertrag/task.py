"""Synthetic fact-lookup task.

Facts are ``(entity, relation) -> value`` triples.  Entities are split into a
parametric group, whose facts are trained directly, and an external group,
whose facts live in the corpus as documents ``"e r v"``.  Part of the external
facts also appear in training (the model learns to read retrieved documents);
the remaining *held-out* external facts are answerable only through the
corpus and form the external half of the test set.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TaskConfig
from .errors import ConfigError, IngestionError
from .vocab import Vocab

CORPUS_FILE = "corpus.tsv"
TRAIN_FILE = "train.tsv"
TEST_FILE = "test.tsv"
FACTS_FILE = "facts.tsv"


@dataclass(frozen=True)
class Fact:
    id: str
    entity: str
    relation: str
    value: str
    split: str  # "parametric" | "external"
    heldout: bool = False

    @property
    def query(self) -> str:
        return f"{self.entity} {self.relation}"

    @property
    def doc_id(self) -> str:
        return f"doc-{self.id}"

    @property
    def doc_text(self) -> str:
        return f"{self.entity} {self.relation} {self.value}"


@dataclass(frozen=True)
class Example:
    query: str
    answer: str
    label: int

    def line(self) -> str:
        return f"{self.query}\t{self.answer}\t{self.label}\n"


@dataclass
class FactTask:
    config: TaskConfig
    seed: int
    vocab: Vocab
    external_entities: tuple[str, ...]
    facts: list[Fact]
    train: list[Example]
    test: list[Example]

    @property
    def external_facts(self) -> list[Fact]:
        return [f for f in self.facts if f.split == "external"]

    @property
    def parametric_facts(self) -> list[Fact]:
        return [f for f in self.facts if f.split == "parametric"]

    def fact_for_query(self, query: str) -> Fact:
        return {f.query: f for f in self.facts}[query]


def gen_task(cfg: TaskConfig, seed: int) -> FactTask:
    f_ext = cfg.external_fraction
    if not 0.0 < f_ext < 1.0:
        raise ConfigError(f"task.external_fraction must lie strictly between 0 and 1, got {f_ext}")
    if not 0.0 < cfg.heldout_fraction < 1.0:
        raise ConfigError(f"task.heldout_fraction must lie strictly between 0 and 1, got {cfg.heldout_fraction}")
    if min(cfg.n_entities, cfg.n_relations, cfg.n_values, cfg.n_facts, cfg.min_repeats) < 1:
        raise ConfigError("task sizes must all be positive")
    rng = np.random.default_rng(seed)
    vocab = Vocab.for_task(cfg.n_entities, cfg.n_relations, cfg.n_values)

    n_ext_entities = int(round(f_ext * cfg.n_entities))
    n_ext = int(round(f_ext * cfg.n_facts))
    n_par = cfg.n_facts - n_ext
    if not 0 < n_ext_entities < cfg.n_entities:
        raise ConfigError("external_fraction leaves one entity group empty")
    if n_ext > n_ext_entities * cfg.n_relations or n_par > (cfg.n_entities - n_ext_entities) * cfg.n_relations:
        raise ConfigError("not enough (entity, relation) pairs for the requested fact count")

    entity_order = rng.permutation(cfg.n_entities)
    ext_entities = np.sort(entity_order[:n_ext_entities])
    par_entities = np.sort(entity_order[n_ext_entities:])

    def draw_pairs(entities: np.ndarray, n: int) -> list[tuple[int, int]]:
        pairs = [(int(e), r) for e in entities for r in range(cfg.n_relations)]
        chosen = np.sort(rng.choice(len(pairs), size=n, replace=False))
        return [pairs[i] for i in chosen]

    ext_pairs = draw_pairs(ext_entities, n_ext)
    par_pairs = draw_pairs(par_entities, n_par)
    n_heldout = max(1, int(round(cfg.heldout_fraction * n_ext)))
    heldout = set(rng.choice(n_ext, size=n_heldout, replace=False).tolist())

    facts: list[Fact] = []
    for i, (e, r) in enumerate(par_pairs):
        facts.append(Fact(f"p{i:04d}", f"e{e}", f"r{r}", f"v{int(rng.integers(cfg.n_values))}", "parametric"))
    for i, (e, r) in enumerate(ext_pairs):
        facts.append(Fact(f"x{i:04d}", f"e{e}", f"r{r}", f"v{int(rng.integers(cfg.n_values))}", "external", i in heldout))

    train: list[Example] = []
    for f in facts:
        if f.heldout:
            continue
        label = int(f.split == "external")
        train.extend([Example(f.query, f.value, label)] * cfg.min_repeats)
    train = [train[i] for i in rng.permutation(len(train))]

    ext_test = [f for f in facts if f.heldout]
    n_par_test = min(n_par, int(round(len(ext_test) * (1.0 - f_ext) / f_ext)))
    par_test_idx = np.sort(rng.choice(n_par, size=n_par_test, replace=False))
    par_test = [facts[i] for i in par_test_idx]
    test = [Example(f.query, f.value, int(f.split == "external")) for f in par_test + ext_test]
    test = [test[i] for i in rng.permutation(len(test))]

    task = FactTask(
        cfg, seed, vocab, tuple(f"e{e}" for e in ext_entities), facts, train, test
    )
    verify_task(task)
    return task


def verify_task(task: FactTask) -> None:
    """Re-check the construction invariants by scanning the generated sets."""
    cfg = task.config
    by_query = {f.query: f for f in task.facts}
    train_queries: dict[str, int] = {}
    for ex in task.train:
        fact = by_query[ex.query]
        if fact.heldout:
            raise ConfigError(f"held-out external fact {fact.id} leaked into training")
        if ex.label != int(fact.split == "external"):
            raise ConfigError(f"wrong oracle label for {ex.query}")
        train_queries[ex.query] = train_queries.get(ex.query, 0) + 1
    for f in task.facts:
        if f.split == "parametric" and train_queries.get(f.query, 0) < cfg.min_repeats:
            raise ConfigError(f"parametric fact {f.id} appears fewer than {cfg.min_repeats} times")
    for ex in task.test:
        if ex.label != int(by_query[ex.query].split == "external"):
            raise ConfigError(f"wrong oracle label for test query {ex.query}")


def leaked_pairs(task: FactTask, train: list[Example] | None = None) -> list[str]:
    """Training lines whose (query, answer) pair belongs to a held-out external fact."""
    heldout = {(f.query, f.value) for f in task.facts if f.heldout}
    return [ex.line() for ex in (train if train is not None else task.train) if (ex.query, ex.answer) in heldout]


def write_task(task: FactTask, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in (CORPUS_FILE, TRAIN_FILE, TEST_FILE, FACTS_FILE)}
    with open(paths[CORPUS_FILE], "w", encoding="utf-8", newline="\n") as fh:
        for f in task.external_facts:
            fh.write(f"{f.doc_id}\t{f.doc_text}\n")
    for name, rows in ((TRAIN_FILE, task.train), (TEST_FILE, task.test)):
        with open(paths[name], "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(ex.line() for ex in rows)
    with open(paths[FACTS_FILE], "w", encoding="utf-8", newline="\n") as fh:
        fh.write("fact_id\tentity\trelation\tvalue\tsplit\theldout\n")
        for f in task.facts:
            fh.write(f"{f.id}\t{f.entity}\t{f.relation}\t{f.value}\t{f.split}\t{int(f.heldout)}\n")
    return paths


def read_examples(path: str | Path) -> list[Example]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise IngestionError(f"{path}:{lineno}: expected 'query<TAB>answer<TAB>0|1'")
            rows.append(Example(parts[0], parts[1], int(parts[2])))
    return rows


def read_facts(path: str | Path) -> list[Fact]:
    facts = []
    with open(path, encoding="utf-8") as fh:
        next(fh, None)
        for line in fh:
            fid, e, r, v, split, held = line.rstrip("\n").split("\t")
            facts.append(Fact(fid, e, r, v, split, held == "1"))
    return facts
