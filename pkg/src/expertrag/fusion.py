"""Evidence fusion: segment-marked concatenation and the slot-gated augmentation module."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import instrument
from . import tensor as T
from .errors import LengthError, ShapeError
from .retrieval import Corpus, RetrievalResult
from .tensor import Tensor


@dataclass
class FusedInput:
    tokens: list[int]
    segments: list[int]
    answer_start: int
    doc_ids: tuple[str, ...] = ()
    truncated: int = 0

    def __len__(self) -> int:
        return len(self.tokens)


def concat_context(
    query: Sequence[int],
    result: RetrievalResult | None,
    corpus: Corpus | None,
    sep_id: int,
    max_len: int,
) -> FusedInput:
    """Lay out ``[q; SEP; d_1; SEP; ...; d_k]`` with segment ids 0..k by rank.

    Over-long inputs lose tokens from the tail of the lowest-ranked document
    first; a document emptied this way also loses its separator.  The query is
    never truncated.
    """
    query = list(query)
    if len(query) > max_len:
        raise LengthError(f"query of length {len(query)} exceeds the {max_len}-token budget")
    docs: list[list[int]] = []
    ids: list[str] = []
    if result is not None and len(result):
        for doc_id in result.ids:
            docs.append(list(corpus[doc_id].text))
            ids.append(doc_id)

    excess = len(query) + sum(1 + len(d) for d in docs) - max_len
    removed = 0
    while excess > 0 and docs:
        last = docs[-1]
        cut = min(excess, len(last))
        if cut:
            del last[len(last) - cut :]
            excess -= cut
            removed += cut
        if not last:
            docs.pop()
            ids.pop()
            excess -= 1
            removed += 1

    tokens, segments = list(query), [0] * len(query)
    for rank, d in enumerate(docs, 1):
        tokens += [sep_id] + d
        segments += [rank] * (1 + len(d))
    return FusedInput(tokens, segments, len(tokens), tuple(ids), removed)


@dataclass
class AugmentationModule:
    transforms: list[Tensor]  # slot j -> d x d map, slot 0 is the query
    scorer: Tensor  # d vector scoring each transformed slot

    @classmethod
    def init(cls, d_model: int, n_slots: int, seed: int = 0) -> "AugmentationModule":
        rng = np.random.default_rng(seed)
        transforms = [
            Tensor(np.eye(d_model) + rng.normal(0.0, 0.1 / math.sqrt(d_model), (d_model, d_model)),
                   requires_grad=True, name=f"fusion.t{j}")
            for j in range(n_slots)
        ]
        scorer = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_model), d_model), requires_grad=True, name="fusion.scorer")
        return cls(transforms, scorer)

    @property
    def n_slots(self) -> int:
        return len(self.transforms)

    def parameters(self) -> list[Tensor]:
        return self.transforms + [self.scorer]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"fusion.t{j}": t for j, t in enumerate(self.transforms)}
        out["fusion.scorer"] = self.scorer
        return out


def augment_fuse(h_q: Tensor, doc_embeddings: Sequence[Tensor], module: AugmentationModule) -> tuple[Tensor, Tensor]:
    """``h_fused = sum_j alpha_j T_j(h_j)`` with ``alpha = softmax(scorer . T_j(h_j))``.

    Returns ``(h_fused, alpha)``.
    """
    slots = [h_q] + list(doc_embeddings)
    if len(slots) > module.n_slots:
        raise ShapeError(f"{len(slots)} inputs but the module has {module.n_slots} slots")
    d = module.scorer.shape[0]
    with instrument.category("fusion"):
        rows = []
        for j, h in enumerate(slots):
            if h.shape != (d,):
                raise ShapeError(f"slot {j} has shape {h.shape}, expected ({d},)")
            rows.append(T.reshape(h, (1, d)) @ module.transforms[j])
        transformed = T.concat(rows)  # slots x d
        logits = T.reshape(transformed @ T.reshape(module.scorer, (d, 1)), (len(slots),))
        alpha = T.softmax(logits)
        fused = T.reshape(T.reshape(alpha, (1, len(slots))) @ transformed, (d,))
    return fused, alpha
