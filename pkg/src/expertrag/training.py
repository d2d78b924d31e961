"""Joint training of generator and retrieval gate.

Each epoch re-embeds the corpus with the current token table and freezes that
snapshot for the epoch.  The first ``warmup_epochs`` always retrieve and train
only the generator.  Afterwards every example samples ``z_ret`` from the gate:

* ``ste``: the loss ``z L_ret + (1 - z) L_noret + lambda z`` is built with a
  straight-through ``z``; the sampled branch trains the generator and the
  counterfactual branch (evaluated without gradients) supplies the gate's
  signal ``L_ret - L_noret + lambda``.
* ``reinforce``: reward 1 for a teacher-forced exact match minus
  ``lambda z``; score-function gradient with an EMA baseline.

With ``branches = "both"`` the counterfactual branch also trains the
generator, so it keeps learning to answer with and without documents whatever
the gate currently prefers.  With ``resample_external`` every external fact
seen in training gets a fresh random value each epoch, written into a private
copy of the corpus; memorising those values is useless and the generator has
to copy them from the retrieved document.  ``lr_decay`` anneals only the
generator's learning rate.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .errors import ConfigError, TrainingDiverged
from .fusion import FusedInput
from .gate import BaselineState, Episode, GateDecision, gate_score, reinforce_update, ste_z
from .model import load_balance_loss
from .pipeline import ExpertRAG, build_input
from .retrieval import Corpus
from .task import Example
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class EncodedExample:
    query: list[int]
    answer: list[int]
    label: int


@dataclass
class EpochLog:
    epoch: int
    loss: float
    retrieval_fraction: float
    dispatch: list[list[int]]
    gate_bias: float

    def line(self) -> str:
        hist = ";".join(",".join(str(c) for c in layer) for layer in self.dispatch) or "-"
        return f"{self.epoch}\t{self.loss:.10f}\t{self.retrieval_fraction:.6f}\t{hist}\t{self.gate_bias:.10f}\n"


LOG_HEADER = "epoch\tloss\tf_hat\texpert_dispatch\tgate_bias\n"


@dataclass
class TrainResult:
    logs: list[EpochLog] = field(default_factory=list)

    def lines(self) -> list[str]:
        return [LOG_HEADER] + [entry.line() for entry in self.logs]


def encode_examples(system: ExpertRAG, examples: Sequence[Example]) -> list[EncodedExample]:
    v = system.vocab
    return [EncodedExample(v.encode(ex.query), v.encode(ex.answer), ex.label) for ex in examples]


def _sequence(system: ExpertRAG, fused: FusedInput, answer: Sequence[int]):
    v = system.vocab
    full = list(fused.tokens) + [v.ans] + list(answer) + [v.eoa]
    segs = list(fused.segments) + [0] * (2 + len(answer))
    ids, targets = full[:-1], full[1:]
    mask = np.zeros(len(ids))
    mask[len(fused.tokens) :] = 1.0
    return ids, segs[:-1], targets, mask


class _Batch:
    """Several sequences packed into one block-causal forward."""

    def __init__(self, seqs):
        self.lengths = [len(s[0]) for s in seqs]
        self.ids = np.concatenate([s[0] for s in seqs])
        self.segs = np.concatenate([s[1] for s in seqs])
        self.targets = np.concatenate([s[2] for s in seqs])
        total = int(np.sum(self.lengths))
        # row i averages example i's answer positions
        self.avg = np.zeros((len(seqs), total))
        start = 0
        for i, s in enumerate(seqs):
            n = len(s[0])
            self.avg[i, start : start + n] = s[3] / s[3].sum()
            start += n


def _example_losses(system: ExpertRAG, batch: _Batch, rng=None):
    res = system.generator.forward(batch.ids, batch.segs, lengths=batch.lengths, rng=rng)
    nll = T.nll_rows(res.logits, batch.targets)
    per_example = T.reshape(Tensor(batch.avg) @ T.reshape(nll, (nll.shape[0], 1)), (len(batch.lengths),))
    return per_example, res


def _exact_match(logits: np.ndarray, batch: _Batch) -> np.ndarray:
    hit = (np.argmax(logits, axis=1) == batch.targets).astype(np.float64)
    masked = batch.avg > 0
    return np.array([float(np.all(hit[row])) for row in masked])


def _clip_and_step(params: Sequence[Tensor], lr: float, clip: float, velocity: dict, momentum: float) -> float:
    grads = [p.grad for p in params]
    norm = math.sqrt(float(sum(float((g * g).sum()) for g in grads)))
    scale = min(1.0, clip / norm) if clip > 0 and norm > 0 else 1.0
    for p, g in zip(params, grads):
        step = g * scale
        if momentum:
            v = velocity.get(id(p))
            v = step if v is None else momentum * v + step
            velocity[id(p)] = v
            step = v
        p.data -= lr * step
    return norm


def _fused_inputs(system: ExpertRAG, data: Sequence[EncodedExample], corpus: Corpus, z: int) -> list[FusedInput]:
    with T.no_grad():
        return [build_input(system, ex.query, z, corpus)[0] for ex in data]


def dataset_loss(system: ExpertRAG, data: Sequence[EncodedExample], corpus: Corpus, z: int = 1, batch_size: int = 32) -> float:
    """Mean per-example answer NLL with the gate pinned to ``z``."""
    if system.fusion_mode == "augment":
        return float(np.mean([_augment_example_loss(system, ex, corpus, z, track=False).item() for ex in data]))
    fused = _fused_inputs(system, data, corpus, z)
    total = 0.0
    with T.no_grad():
        for s in range(0, len(data), batch_size):
            chunk = range(s, min(s + batch_size, len(data)))
            batch = _Batch([_sequence(system, fused[i], data[i].answer) for i in chunk])
            losses, _ = _example_losses(system, batch)
            total += float(losses.data.sum())
    return total / len(data)


def _augment_example_loss(system: ExpertRAG, ex: EncodedExample, corpus: Corpus, z: int, track: bool, rng=None):
    fused, _, prefix, _ = build_input(system, ex.query, z, corpus, track=track)
    ids, segs, targets, mask = _sequence(system, fused, ex.answer)
    res = system.generator.forward(ids, segs, prefix=prefix, rng=rng)
    logits = T.slice_rows(res.logits, 1, res.logits.shape[0])
    loss = T.cross_entropy(logits, targets, mask)
    if track and system.config.moe_layers:
        loss = loss + load_balance_loss(res.decisions, system.config.alpha_lb)
    return loss


def _volatile_facts(data: Sequence[EncodedExample], corpus: Corpus) -> dict[tuple, str]:
    """External training queries whose answer document is in the corpus: query -> doc id."""
    by_text = {tuple(d.text): d.id for d in corpus}
    out = {}
    for ex in data:
        key = tuple(ex.query) + tuple(ex.answer)
        if ex.label == 1 and key in by_text:
            out[tuple(ex.query)] = by_text[key]
    return out


def _resample(data, volatile, corpus: Corpus, answers, rng) -> list[EncodedExample]:
    """Give every volatile fact a fresh answer and rewrite its document to match."""
    fresh = {}
    for q in sorted(volatile, key=lambda q: volatile[q]):
        fresh[q] = list(answers[int(rng.integers(len(answers)))])
        corpus.replace(volatile[q], list(q) + fresh[q])
    return [EncodedExample(ex.query, fresh.get(tuple(ex.query), ex.answer), ex.label) for ex in data]


def _branch_losses(system, data, idx, zs, fused, store, track: bool, rng=None):
    """Per-example answer losses for the given gate outcomes.

    Returns ``(losses, batch, forward result, routing decisions)``; batch and
    forward result are ``None`` in augment mode.
    """
    if system.fusion_mode == "concat":
        batch = _Batch([_sequence(system, fused[int(z)][i], data[i].answer) for i, z in zip(idx, zs)])
        losses, res = _example_losses(system, batch, rng if track else None)
        return losses, batch, res, list(res.decisions)
    per = [_augment_example_loss(system, data[i], store, int(z), track, rng) for i, z in zip(idx, zs)]
    return T.concat([T.reshape(x, (1,)) for x in per]), None, None, []


def train(
    system: ExpertRAG,
    corpus: Corpus,
    examples: Sequence[Example],
    cfg: TrainConfig,
    seed: int,
    on_epoch: Callable[[EpochLog, ExpertRAG], None] | None = None,
    gate_override: int | None = None,
) -> TrainResult:
    """Train in place.  ``gate_override`` pins z_ret for every example (ablation runs)."""
    if cfg.trainer not in ("ste", "reinforce"):
        raise ConfigError(f"gate.trainer must be 'ste' or 'reinforce', got {cfg.trainer!r}")
    rng = np.random.default_rng(seed)
    data = encode_examples(system, examples)
    result = TrainResult()
    baseline = BaselineState()
    velocity: dict = {}
    gen_params = system.generator.parameters() + (system.augment.parameters() if system.augment else [])
    gate_params = system.gate.parameters()
    last_good = {k: t.data.copy() for k, t in system.named_parameters().items()}
    base_data, store = data, corpus
    volatile: dict = {}
    if cfg.resample_external:
        store = corpus.copy()
        volatile = _volatile_facts(data, store)
    answers = sorted({tuple(ex.answer) for ex in data})

    for epoch in range(1, cfg.epochs + 1):
        if volatile:
            data = _resample(base_data, volatile, store, answers, rng)
        store.reembed(system.embedding_table, f"epoch{epoch}")
        warm = epoch <= cfg.warmup_epochs
        lr_scale = 1.0 - (epoch - 1) / cfg.epochs if cfg.lr_decay else 1.0
        fused = {z: _fused_inputs(system, data, store, z) for z in (0, 1)} if system.fusion_mode == "concat" else None
        order = rng.permutation(len(data))
        losses, retrieved = [], []
        dispatch = [np.zeros(system.config.n_experts, dtype=np.int64) for _ in system.config.moe_layers]

        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            system.zero_grad()
            p_nodes, decisions = [], []
            for i in idx:
                h_q = system.query_representation(data[i].query)
                p = gate_score(h_q, system.gate)
                if gate_override is not None:
                    z = gate_override
                elif warm:
                    z = 1
                else:
                    z = int(rng.random() < p.item())
                p_nodes.append((p, h_q))
                decisions.append(GateDecision(p.item(), z, "sample", None, p))
            zs = np.array([d.z_ret for d in decisions])
            retrieved.extend(zs.tolist())

            train_gate = not warm and gate_override is None
            both = train_gate and cfg.branches == "both"
            live_losses, live, res, route = _branch_losses(system, data, idx, zs, fused, store, True, rng)
            gen_loss = T.mean(live_losses)
            for layer, dec in enumerate(route):
                dispatch[layer] += dec.counts
            other_losses = None
            if both:
                other, _, _, other_route = _branch_losses(system, data, idx, 1 - zs, fused, store, True, rng)
                gen_loss = gen_loss + T.mean(other)
                route = route + other_route
                other_losses = other.data
            if route:
                gen_loss = gen_loss + load_balance_loss(route, system.config.alpha_lb)

            loss = gen_loss
            if train_gate and cfg.trainer == "ste":
                if other_losses is None:
                    with T.no_grad():
                        other_losses = _branch_losses(system, data, idx, 1 - zs, fused, store, False)[0].data
                live_vals = live_losses.data
                gate_terms = []
                for j, i in enumerate(idx):
                    l_ret = live_vals[j] if zs[j] else other_losses[j]
                    l_noret = other_losses[j] if zs[j] else live_vals[j]
                    penalty = system.config.lambda_ret + cfg.parametric_penalty * (1 - data[i].label)
                    z_t = ste_z(decisions[j])
                    # value of this term is z * (L_ret - L_noret + penalty); its
                    # gradient reaches only the gate through z
                    gate_terms.append(z_t * float(l_ret - l_noret + penalty))
                loss = loss + T.mean(T.concat([T.reshape(g, (1,)) for g in gate_terms]))

            if not np.isfinite(loss.item()):
                for k, t in system.named_parameters().items():
                    t.data[...] = last_good[k]
                raise TrainingDiverged(f"loss became non-finite in epoch {epoch}")
            T.backward(loss)
            losses.append(float(live_losses.data.mean()))

            _clip_and_step(gen_params, cfg.lr * lr_scale, cfg.clip, velocity, cfg.momentum)
            if train_gate and cfg.trainer == "ste":
                _clip_and_step(gate_params, cfg.gate_lr, cfg.clip, velocity, 0.0)
            elif train_gate:
                hits = _exact_match(res.logits.data, live) if live is not None else (np.exp(-live_losses.data) > 0.5).astype(np.float64)
                episodes = [
                    Episode(int(z), d.p_ret, float(h) - cfg.parametric_penalty * z * (1 - data[i].label), ph[1].data)
                    for z, d, h, i, ph in zip(zs, decisions, hits, idx, p_nodes)
                ]
                _, g_bias, g_w = reinforce_update(episodes, baseline, system.config.lambda_ret)
                system.gate.weight.grad = -g_w / len(idx)
                system.gate.bias.grad = np.array(-g_bias / len(idx))
                _clip_and_step(gate_params, cfg.gate_lr, cfg.clip, velocity, 0.0)

        entry = EpochLog(
            epoch,
            float(np.mean(losses)),
            float(np.mean(retrieved)),
            [d.tolist() for d in dispatch],
            float(system.gate.bias.data),
        )
        if not np.isfinite(entry.loss):
            raise TrainingDiverged(f"loss became non-finite in epoch {epoch}")
        last_good = {k: t.data.copy() for k, t in system.named_parameters().items()}
        result.logs.append(entry)
        log.info("epoch %d loss %.4f f_hat %.3f", epoch, entry.loss, entry.retrieval_fraction)
        if on_epoch is not None:
            on_epoch(entry, system)
    corpus.reembed(system.embedding_table, f"epoch{cfg.epochs}")
    return result
