from __future__ import annotations

from typing import Iterable, Sequence

from .errors import VocabularyError

SEP = "<sep>"
ANS = "<ans>"
EOA = "<eoa>"
SPECIALS = (SEP, ANS, EOA)


class Vocab:
    """Bidirectional token <-> id map; specials occupy ids 0..2."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[: len(SPECIALS)] != list(SPECIALS):
            raise VocabularyError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def for_task(cls, n_entities: int, n_relations: int, n_values: int) -> "Vocab":
        return cls(
            list(SPECIALS)
            + [f"e{i}" for i in range(n_entities)]
            + [f"r{i}" for i in range(n_relations)]
            + [f"v{i}" for i in range(n_values)]
        )

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @property
    def sep(self) -> int:
        return 0

    @property
    def ans(self) -> int:
        return 1

    @property
    def eoa(self) -> int:
        return 2

    def encode(self, text: str | Iterable[str]) -> list[int]:
        toks = text.split() if isinstance(text, str) else list(text)
        out = []
        for t in toks:
            try:
                out.append(self.index[t])
            except KeyError:
                raise VocabularyError(f"unknown token {t!r}") from None
        return out

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= int(i) < len(self.tokens):
                raise VocabularyError(f"token id {i} outside vocabulary of size {len(self.tokens)}")
            out.append(self.tokens[int(i)])
        return out
