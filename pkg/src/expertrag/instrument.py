"""Operation-count instrumentation.

A :class:`MacCounter` installed with :func:`counting` receives every
multiply-accumulate executed by :func:`expertrag.tensor.matmul` plus explicit
records from the retrieval and model code.  Counts are attributed to the
category currently opened with :func:`category`.
"""
from __future__ import annotations

import threading
from collections import defaultdict
from contextlib import contextmanager

CATEGORIES = ("dense", "attention", "experts", "search", "gate", "fusion")

_state = threading.local()


class MacCounter:
    def __init__(self) -> None:
        self.macs: dict[str, int] = defaultdict(int)
        self.tokens_processed = 0
        self.context_tokens = 0
        # parameter name -> number of (token, use) pairs that touched it
        self.param_touches: dict[str, int] = defaultdict(int)
        self.param_sizes: dict[str, int] = {}

    def add(self, n: int, cat: str | None = None) -> None:
        self.macs[cat or current_category()] += int(n)

    def touch(self, name: str, size: int, n_tokens: int) -> None:
        self.param_sizes[name] = int(size)
        self.param_touches[name] += int(n_tokens)

    @property
    def total(self) -> int:
        return sum(self.macs.values())

    def active_params_per_token(self) -> float:
        if self.tokens_processed == 0:
            return 0.0
        used = sum(self.param_sizes[k] * v for k, v in self.param_touches.items())
        return used / self.tokens_processed


def active_counter() -> MacCounter | None:
    return getattr(_state, "counter", None)


def current_category() -> str:
    return getattr(_state, "category", "dense")


@contextmanager
def counting(counter: MacCounter | None = None):
    counter = counter if counter is not None else MacCounter()
    prev = active_counter()
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = prev


@contextmanager
def category(name: str):
    prev = current_category()
    _state.category = name
    try:
        yield
    finally:
        _state.category = prev


def record_macs(n: int, cat: str | None = None) -> None:
    c = active_counter()
    if c is not None:
        c.add(n, cat)


def record_touch(name: str, size: int, n_tokens: int) -> None:
    c = active_counter()
    if c is not None:
        c.touch(name, size, n_tokens)


def record_tokens(n: int, context: int = 0) -> None:
    c = active_counter()
    if c is not None:
        c.tokens_processed += int(n)
        c.context_tokens += int(context)
