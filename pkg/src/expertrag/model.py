"""Decoder-only transformer whose FFN sublayers at chosen depths are MoE layers.

Blocks are pre-norm: ``x + Attn(LN(x))`` followed by ``x + FFN(LN(x))``, where
FFN is either a dense two-layer MLP or a top-k routed mixture of such MLPs.
Several independent sequences can be packed into one call; attention is then
block-causal and positions restart at each sequence start.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import instrument
from . import tensor as T
from .config import ModelConfig
from .errors import ContractError, LengthError, ShapeError, VocabularyError
from .tensor import Tensor

MASK_VALUE = -1e9


@dataclass
class RouterDecision:
    scores: Tensor  # seq x E, after optional noise
    selected: np.ndarray  # seq x k, best first
    weights: Tensor  # seq x k, softmax over the selected scores
    counts: np.ndarray  # per-expert dispatch counts

    @property
    def n_experts(self) -> int:
        return self.scores.shape[1]

    def top1_fractions(self) -> np.ndarray:
        n = self.selected.shape[0]
        return np.bincount(self.selected[:, 0], minlength=self.n_experts) / n


@dataclass
class ForwardResult:
    logits: Tensor
    decisions: list[RouterDecision] = field(default_factory=list)


class KVCache:
    """Per-layer key/value rows for incremental greedy decoding."""

    def __init__(self, n_layers: int):
        self.keys: list[np.ndarray | None] = [None] * n_layers
        self.values: list[np.ndarray | None] = [None] * n_layers
        self.length = 0


def topk_select(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, best first; ties favour the lower index."""
    # stable sort on negated scores keeps ascending index order among equal values
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)[:, : d // 2]
    return pe


def block_causal_mask(lengths: Sequence[int]) -> np.ndarray:
    total = int(np.sum(lengths))
    mask = np.full((total, total), MASK_VALUE)
    start = 0
    for n in lengths:
        tri = np.tril(np.ones((n, n), dtype=bool))
        block = mask[start : start + n, start : start + n]
        block[tri] = 0.0
        start += n
    return mask


def expert_param_count(cfg: ModelConfig) -> int:
    return 2 * cfg.d_model * cfg.d_ff + cfg.d_ff + cfg.d_model


def parameter_counts(cfg: ModelConfig) -> tuple[int, int]:
    """(N_total, N_active per token) implied by a config.

    Embedding tables contribute one row per token to the active count; every
    other dense parameter is active for every token; an MoE layer contributes
    its router plus k_experts experts.
    """
    d, ffn = cfg.d_model, expert_param_count(cfg)
    total = cfg.vocab_size * d + (cfg.k_docs + 1) * d
    active = 2 * d
    for layer in range(cfg.n_layers):
        shared = 4 * d * d + 4 * d
        total += shared
        active += shared
        if layer in cfg.moe_layers:
            total += d * cfg.n_experts + cfg.n_experts * ffn
            active += d * cfg.n_experts + cfg.k_experts * ffn
        else:
            total += ffn
            active += ffn
    head = 2 * d + d * cfg.vocab_size
    return total + head, active + head


class Generator:
    def __init__(self, config: ModelConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.config = config
        self._pe = sinusoidal_positions(config.max_seq_len + 1, config.d_model)
        self.params = params if params is not None else self._init_params(np.random.default_rng(seed))

    # -- parameters --------------------------------------------------------
    def _init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        c = self.config
        d, dff = c.d_model, c.d_ff
        resid = 1.0 / math.sqrt(2 * c.n_layers)
        p: dict[str, np.ndarray] = {
            "tok_emb": rng.normal(0.0, 1.0, (c.vocab_size, d)),
            "seg_emb": rng.normal(0.0, 1.0, (c.k_docs + 1, d)),
        }

        def mlp(prefix: str) -> None:
            p[f"{prefix}.w1"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, dff))
            p[f"{prefix}.b1"] = np.zeros(dff)
            p[f"{prefix}.w2"] = rng.normal(0.0, resid / math.sqrt(dff), (dff, d))
            p[f"{prefix}.b2"] = np.zeros(d)

        for layer in range(c.n_layers):
            pre = f"layer{layer}"
            p[f"{pre}.ln1.g"] = np.ones(d)
            p[f"{pre}.ln1.b"] = np.zeros(d)
            for w in ("wq", "wk", "wv"):
                p[f"{pre}.attn.{w}"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
            p[f"{pre}.attn.wo"] = rng.normal(0.0, resid / math.sqrt(d), (d, d))
            p[f"{pre}.ln2.g"] = np.ones(d)
            p[f"{pre}.ln2.b"] = np.zeros(d)
            if layer in c.moe_layers:
                p[f"{pre}.router"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, c.n_experts))
                for e in range(c.n_experts):
                    mlp(f"{pre}.expert{e}")
            else:
                mlp(f"{pre}.ffn")
        p["ln_f.g"] = np.ones(d)
        p["ln_f.b"] = np.zeros(d)
        p["out"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, c.vocab_size))
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def _p(self, name: str, n_tokens: int = 0) -> Tensor:
        t = self.params[name]
        if n_tokens:
            instrument.record_touch(name, t.size, n_tokens)
        return t

    # -- building blocks ---------------------------------------------------
    def embed_tokens(self, ids, segment_ids, positions=None) -> Tensor:
        c = self.config
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        segs = np.asarray(segment_ids, dtype=np.int64).reshape(-1)
        if ids.shape != segs.shape:
            raise LengthError(f"{ids.size} token ids but {segs.size} segment ids")
        if positions is None:
            if ids.size > c.max_seq_len:
                raise LengthError(f"sequence of length {ids.size} exceeds max_seq_len={c.max_seq_len}")
            positions = np.arange(ids.size)
        positions = np.asarray(positions, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= c.vocab_size):
            bad = ids[(ids < 0) | (ids >= c.vocab_size)][0]
            raise VocabularyError(f"token id {bad} outside vocabulary of size {c.vocab_size}")
        if segs.size and (segs.min() < 0 or segs.max() > c.k_docs):
            raise VocabularyError(f"segment ids must lie in 0..{c.k_docs}")
        if positions.size and positions.max() >= self._pe.shape[0]:
            raise LengthError(f"position {positions.max()} exceeds max_seq_len={c.max_seq_len}")
        n = ids.size
        tok = T.take(self._p("tok_emb"), ids)
        seg = T.take(self._p("seg_emb"), segs)
        instrument.record_touch("tok_emb.row", c.d_model, n)
        instrument.record_touch("seg_emb.row", c.d_model, n)
        return tok + T.Tensor(self._pe[positions]) + seg

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        n = x.shape[0]
        return T.layer_norm(x) * self._p(f"{prefix}.g", n) + self._p(f"{prefix}.b", n)

    def _mlp(self, x: Tensor, prefix: str, n_tokens: int) -> Tensor:
        h = T.relu(x @ self._p(f"{prefix}.w1", n_tokens) + self._p(f"{prefix}.b1", n_tokens))
        return h @ self._p(f"{prefix}.w2", n_tokens) + self._p(f"{prefix}.b2", n_tokens)

    def attention_block(self, layer: int, x: Tensor, mask: np.ndarray, cache: KVCache | None = None) -> Tensor:
        c = self.config
        pre = f"layer{layer}"
        n = x.shape[0]
        h = self._norm(x, f"{pre}.ln1")
        q = h @ self._p(f"{pre}.attn.wq", n)
        k = h @ self._p(f"{pre}.attn.wk", n)
        v = h @ self._p(f"{pre}.attn.wv", n)
        if cache is not None:
            if cache.keys[layer] is not None:
                k = T.concat([Tensor(cache.keys[layer]), k])
                v = T.concat([Tensor(cache.values[layer]), v])
            cache.keys[layer] = k.data
            cache.values[layer] = v.data
        scale = 1.0 / math.sqrt(c.head_dim)
        mask_t = Tensor(mask)
        heads = []
        with instrument.category("attention"):
            for hd in range(c.n_heads):
                a, b = hd * c.head_dim, (hd + 1) * c.head_dim
                qh, kh, vh = T.slice_cols(q, a, b), T.slice_cols(k, a, b), T.slice_cols(v, a, b)
                att = T.softmax((qh @ T.transpose(kh)) * scale + mask_t)
                heads.append(att @ vh)
        o = T.concat(heads, axis=1) @ self._p(f"{pre}.attn.wo", n)
        return x + o

    def dense_ffn_block(self, layer: int, x: Tensor) -> Tensor:
        pre = f"layer{layer}"
        return x + self._mlp(self._norm(x, f"{pre}.ln2"), f"{pre}.ffn", x.shape[0])

    def moe_layer_forward(
        self,
        layer: int,
        x: Tensor,
        rng: np.random.Generator | None = None,
        expert_override: int | None = None,
    ) -> tuple[Tensor, RouterDecision]:
        """MoE sublayer with residual; ``expert_override`` pins every token to one expert."""
        c = self.config
        pre = f"layer{layer}"
        n = x.shape[0]
        h = self._norm(x, f"{pre}.ln2")
        scores = h @ self._p(f"{pre}.router", n)
        if c.router_noise and rng is not None:
            scores = scores + Tensor(rng.normal(0.0, c.router_noise_std, scores.shape))
        if expert_override is None:
            selected = topk_select(scores.data, c.k_experts)
        else:
            selected = np.full((n, 1), int(expert_override), dtype=np.int64)
        k = selected.shape[1]
        rows = np.repeat(np.arange(n), k)
        picked = T.reshape(T.gather(scores, rows, selected.reshape(-1)), (n, k))
        weights = T.softmax(picked)
        counts = np.bincount(selected.reshape(-1), minlength=c.n_experts)

        out = None
        with instrument.category("experts"):
            for e in range(c.n_experts):
                tok, slot = np.nonzero(selected == e)
                if tok.size == 0:
                    continue
                y = self._mlp(T.take(h, tok), f"{pre}.expert{e}", tok.size)
                w = T.reshape(T.gather(weights, tok, slot), (tok.size, 1))
                contrib = T.scatter_rows(y * w, tok, n)
                out = contrib if out is None else out + contrib
        if out is None:
            raise ShapeError("moe_layer_forward called with an empty sequence")
        return x + out, RouterDecision(scores, selected, weights, counts)

    # -- full model --------------------------------------------------------
    def forward(
        self,
        ids,
        segment_ids,
        *,
        lengths: Sequence[int] | None = None,
        prefix: Tensor | None = None,
        cache: KVCache | None = None,
        rng: np.random.Generator | None = None,
        expert_override: int | None = None,
    ) -> ForwardResult:
        """Logits for one sequence, or several packed ones when ``lengths`` is given.

        ``prefix`` (a d_model vector) is placed before the tokens at position 0.
        With ``cache`` the tokens continue a single sequence already cached.
        """
        c = self.config
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        segs = np.asarray(segment_ids, dtype=np.int64).reshape(-1)
        extra = 0 if prefix is None else 1
        if lengths is None:
            lengths = [ids.size + extra]
        lengths = [int(x) for x in lengths]
        if cache is not None and len(lengths) != 1:
            raise ContractError("KV-cached forward takes a single sequence")
        offset = cache.length if cache is not None else 0
        if max(lengths) + offset > c.max_seq_len:
            raise LengthError(f"sequence of length {max(lengths) + offset} exceeds max_seq_len={c.max_seq_len}")
        if prefix is not None and len(lengths) != 1:
            raise ContractError("prefix vectors are only supported for single sequences")

        positions = np.concatenate([np.arange(n) for n in lengths]) + offset
        x = self.embed_tokens(ids, segs, positions[extra:])
        if prefix is not None:
            x = T.concat([T.reshape(prefix, (1, c.d_model)) + Tensor(self._pe[offset : offset + 1]), x])
        n = x.shape[0]
        instrument.record_tokens(n)

        if cache is None:
            mask = block_causal_mask(lengths)
        else:
            mask = np.zeros((n, offset + n))
            mask[:, offset:] = np.where(np.tril(np.ones((n, n), dtype=bool)), 0.0, MASK_VALUE)

        decisions = []
        for layer in range(c.n_layers):
            x = self.attention_block(layer, x, mask, cache)
            if layer in c.moe_layers:
                x, dec = self.moe_layer_forward(layer, x, rng, expert_override)
                decisions.append(dec)
            else:
                x = self.dense_ffn_block(layer, x)
        logits = self._norm(x, "ln_f") @ self._p("out", n)
        if cache is not None:
            cache.length += n
        return ForwardResult(logits, decisions)

    def lm_forward(self, ids, segment_ids, **kw) -> ForwardResult:
        return self.forward(ids, segment_ids, **kw)

    def parameter_counts(self) -> tuple[int, int]:
        return parameter_counts(self.config)


def load_balance_loss(decisions: Sequence[RouterDecision], alpha_lb: float) -> Tensor:
    """Switch-style auxiliary loss summed over the given router decisions.

    Per layer: ``alpha_lb * E * sum_i f_i * P_i`` with f_i the top-1 dispatch
    fraction (constant) and P_i the mean router probability (differentiable).
    """
    if not decisions:
        raise ContractError("load_balance_loss needs at least one router decision")
    total = None
    for dec in decisions:
        if dec.selected.shape[0] == 0:
            raise ContractError("load_balance_loss: a router decision routed no tokens")
        probs = T.mean(T.softmax(dec.scores), axis=0)
        f = dec.top1_fractions()
        term = T.sum(probs * Tensor(f)) * (alpha_lb * dec.n_experts)
        total = term if total is None else total + term
    return total


def token_loss(
    logits: Tensor,
    targets,
    answer_mask,
    decisions: Sequence[RouterDecision] = (),
    alpha_lb: float = 0.0,
) -> Tensor:
    """Mean answer-position NLL plus the load-balance term of every MoE layer."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.size != logits.shape[0]:
        raise ShapeError(f"{targets.size} targets for logits with {logits.shape[0]} rows")
    loss = T.cross_entropy(logits, targets, answer_mask)
    if decisions:
        loss = loss + load_balance_loss(decisions, alpha_lb)
    return loss
