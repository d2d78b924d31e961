"""External knowledge store: document embedding, exact cosine search, live updates."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import instrument
from . import tensor as T
from .errors import ContractError, EmptyCorpusError, IngestionError, UpdateError, VocabularyError
from .tensor import Tensor
from .vocab import Vocab


@dataclass
class Document:
    id: str
    text: list[int]
    embedding: np.ndarray


@dataclass
class RetrievalResult:
    hits: list[tuple[str, float]]
    query_embedding: np.ndarray

    @property
    def ids(self) -> list[str]:
        return [doc_id for doc_id, _ in self.hits]

    def __len__(self) -> int:
        return len(self.hits)


def embed_document(text: Sequence[int], table) -> np.ndarray:
    """L2-normalised mean of the token embedding rows; zeros for empty text."""
    table = table.data if isinstance(table, Tensor) else np.asarray(table)
    ids = np.asarray(text, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        return np.zeros(table.shape[1])
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise VocabularyError(f"document token outside embedding table of {table.shape[0]} rows")
    v = table[ids].mean(axis=0)
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def embed_document_tensor(text: Sequence[int], table: Tensor) -> Tensor:
    """Differentiable variant of :func:`embed_document` (non-empty text only)."""
    if len(text) == 0:
        raise ContractError("cannot build a differentiable embedding for empty text")
    v = T.mean(T.take(table, text), axis=0)
    return v * T.rsqrt(T.sum(v * v))


class Corpus:
    """Ordered document collection with a dense embedding matrix.

    Updates take an exclusive lock and publish a fresh snapshot, so a search
    never sees a half-inserted document.
    """

    def __init__(self, table=None, embedder_version: str = "untrained"):
        self._table = None if table is None else np.array(table.data if isinstance(table, Tensor) else table, dtype=np.float64)
        self.embedder_version = embedder_version
        self._docs: list[Document] = []
        self._by_id: dict[str, int] = {}
        self._matrix = np.zeros((0, 0))
        self._searchable = np.zeros(0, dtype=bool)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._docs)

    @property
    def M(self) -> int:
        return len(self._docs)

    @property
    def ids(self) -> list[str]:
        return [d.id for d in self._docs]

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id

    def __getitem__(self, doc_id: str) -> Document:
        return self._docs[self._by_id[doc_id]]

    def __iter__(self):
        return iter(list(self._docs))

    def _embed(self, text: Sequence[int]) -> np.ndarray:
        if self._table is None:
            raise ContractError("corpus has no embedding table")
        return embed_document(text, self._table)

    def _publish(self, docs: list[Document]) -> None:
        if docs:
            matrix = np.stack([d.embedding for d in docs])
        else:
            matrix = np.zeros((0, 0 if self._table is None else self._table.shape[1]))
        searchable = np.array([len(d.text) > 0 for d in docs], dtype=bool)
        self._docs = docs
        self._by_id = {d.id: i for i, d in enumerate(docs)}
        self._matrix, self._searchable = matrix, searchable

    def embed_query(self, text: Sequence[int]) -> np.ndarray:
        """Embed a query with the same table snapshot as the documents."""
        return self._embed(text)

    def add(self, doc_id: str, text: Sequence[int]) -> Document:
        with self._lock:
            if doc_id in self._by_id:
                raise UpdateError(f"document id {doc_id!r} already in corpus")
            doc = Document(doc_id, list(text), self._embed(text))
            self._publish(self._docs + [doc])
        return doc

    def replace(self, doc_id: str, text: Sequence[int]) -> Document:
        with self._lock:
            if doc_id not in self._by_id:
                raise UpdateError(f"document id {doc_id!r} not in corpus")
            doc = Document(doc_id, list(text), self._embed(text))
            docs = list(self._docs)
            docs[self._by_id[doc_id]] = doc
            self._publish(docs)
        return doc

    def reembed(self, table, version: str) -> None:
        """Recompute every document embedding from a new embedding table."""
        with self._lock:
            self._table = table.data.copy() if isinstance(table, Tensor) else np.array(table)
            self.embedder_version = version
            self._publish([Document(d.id, d.text, self._embed(d.text)) for d in self._docs])

    def copy(self) -> "Corpus":
        other = Corpus(self._table, self.embedder_version)
        other._publish(list(self._docs))
        return other

    def without(self, doc_id: str) -> "Corpus":
        other = Corpus(self._table, self.embedder_version)
        other._publish([d for d in self._docs if d.id != doc_id])
        return other

    def snapshot(self) -> tuple[list[Document], np.ndarray, np.ndarray]:
        return self._docs, self._matrix, self._searchable


def _dot_rows(matrix: np.ndarray, q: np.ndarray) -> np.ndarray:
    # fixed left-to-right accumulation, so scores do not depend on BLAS blocking
    sims = np.zeros(matrix.shape[0])
    for j in range(matrix.shape[1]):
        sims += matrix[:, j] * q[j]
    return sims


def search_top_k(query_embedding, k: int, corpus: Corpus) -> RetrievalResult:
    """Exact cosine ranking over non-empty documents, ties by insertion order."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    docs, matrix, searchable = corpus.snapshot()
    if not docs:
        raise EmptyCorpusError("search over an empty corpus")
    q = np.asarray(query_embedding.data if isinstance(query_embedding, Tensor) else query_embedding, dtype=np.float64)
    instrument.record_macs(matrix.shape[0] * matrix.shape[1], "search")
    sims = _dot_rows(matrix, q)
    order = np.flatnonzero(searchable)
    # stable sort keeps insertion order among equal scores
    order = order[np.argsort(-sims[order], kind="stable")][:k]
    return RetrievalResult([(docs[i].id, float(sims[i])) for i in order], q.copy())


def update_corpus(corpus: Corpus, text: Sequence[int], doc_id: str) -> Corpus:
    corpus.add(doc_id, text)
    return corpus


def parse_corpus_lines(lines: Iterable[str], vocab: Vocab) -> list[tuple[str, list[int]]]:
    records: list[tuple[str, list[int]]] = []
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        if "\t" not in line:
            raise IngestionError(f"line {lineno}: expected 'id<TAB>tokens'")
        doc_id, text = line.split("\t", 1)
        doc_id = doc_id.strip()
        if not doc_id or "\t" in text:
            raise IngestionError(f"line {lineno}: malformed record")
        if doc_id in seen:
            raise IngestionError(f"line {lineno}: duplicate document id {doc_id!r} (first on line {seen[doc_id]})")
        seen[doc_id] = lineno
        try:
            ids = vocab.encode(text)
        except VocabularyError as exc:
            raise IngestionError(f"line {lineno}: {exc}") from None
        records.append((doc_id, ids))
    return records


def ingest_corpus(path: str | Path, vocab: Vocab, table, embedder_version: str = "untrained") -> Corpus:
    try:
        with open(path, encoding="utf-8") as fh:
            records = parse_corpus_lines(fh, vocab)
    except UnicodeDecodeError as exc:
        raise IngestionError(f"{path}: not valid UTF-8 ({exc.reason})") from None
    except OSError as exc:
        raise IngestionError(f"cannot read corpus {path}: {exc.strerror}") from None
    corpus = Corpus(table, embedder_version)
    docs = [Document(doc_id, ids, corpus._embed(ids)) for doc_id, ids in records]
    corpus._publish(docs)
    return corpus


def format_corpus_line(doc_id: str, tokens: Sequence[str]) -> str:
    return f"{doc_id}\t{' '.join(tokens)}\n"
