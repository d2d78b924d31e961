"""Learned retrieval gate: pooled query -> p_ret -> binary z_ret, plus its two trainers."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import instrument
from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

PROB_CLAMP = 1e-6
BASELINE_DECAY = 0.99


@dataclass
class RetrievalGate:
    weight: Tensor
    bias: Tensor
    threshold: float = 0.5
    mode: str = "threshold"

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"gate threshold {self.threshold} outside [0, 1]")
        if self.mode not in ("threshold", "sample"):
            raise ConfigError(f"gate mode must be 'threshold' or 'sample', got {self.mode!r}")

    @classmethod
    def init(cls, d_model: int, threshold: float = 0.5, mode: str = "threshold", bias: float = 0.0) -> "RetrievalGate":
        return cls(
            Tensor(np.zeros(d_model), requires_grad=True, name="gate.weight"),
            Tensor(np.array(bias, dtype=np.float64), requires_grad=True, name="gate.bias"),
            threshold,
            mode,
        )

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def zero_grad(self) -> None:
        self.weight.zero_grad()
        self.bias.zero_grad()


@dataclass
class GateDecision:
    p_ret: float
    z_ret: int
    mode: str
    draw: float | None = None
    # graph node for p_ret, kept only when gradients are needed
    p_tensor: Tensor | None = field(default=None, repr=False, compare=False)


def pool_query(rows: Tensor) -> Tensor:
    """Mean over the sequence positions of the query's token embeddings."""
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ContractError(f"pool_query needs at least one query row, got shape {rows.shape}")
    return T.mean(rows, axis=0)


def gate_logit(h_q: Tensor, gate: RetrievalGate) -> Tensor:
    if h_q.shape != gate.weight.shape:
        raise ShapeError(f"gate: h_q shape {h_q.shape} does not match weight shape {gate.weight.shape}")
    with instrument.category("gate"):
        return T.matmul(T.reshape(h_q, (1, h_q.size)), T.reshape(gate.weight, (h_q.size, 1)))


def gate_score(h_q: Tensor, gate: RetrievalGate) -> Tensor:
    """p_ret = sigmoid(w . h_q + b) as a scalar tensor."""
    return T.reshape(T.sigmoid(gate_logit(h_q, gate) + gate.bias), ())


def decide(p_ret, gate: RetrievalGate, rng: np.random.Generator | None = None) -> GateDecision:
    p_t = p_ret if isinstance(p_ret, Tensor) else None
    p = float(p_ret.item() if isinstance(p_ret, Tensor) else p_ret)
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"p_ret={p} outside [0, 1]")
    if gate.mode == "threshold":
        return GateDecision(p, int(p >= gate.threshold), "threshold", None, p_t)
    if rng is None:
        raise ContractError("sample-mode gating needs a caller-owned random generator")
    u = float(rng.random())
    return GateDecision(p, int(u < p), "sample", u, p_t)


def ste_gradient(decision: GateDecision, downstream_grad: float) -> float:
    """Gradient w.r.t. p_ret under the straight-through (identity) surrogate."""
    if decision.mode != "sample":
        raise ContractError("straight-through training needs a sampled gate decision")
    return float(downstream_grad)


def ste_z(decision: GateDecision) -> Tensor:
    """z_ret as a graph node: hard value forward, identity gradient to p_ret."""
    if decision.mode != "sample":
        raise ContractError("straight-through training needs a sampled gate decision")
    if decision.p_tensor is None:
        raise ContractError("decision carries no p_ret graph node")
    return T.ste(decision.p_tensor, float(decision.z_ret))


@dataclass
class Episode:
    z_ret: int
    p_ret: float
    reward: float
    h_q: np.ndarray | None = None


@dataclass
class BaselineState:
    value: float = 0.0
    decay: float = BASELINE_DECAY


def reinforce_update(
    episodes: Sequence[Episode], baseline: BaselineState, lambda_ret: float
) -> tuple[np.ndarray, float, np.ndarray]:
    """Score-function estimate for the gate parameters (ascent direction).

    Returns ``(grad_logits, grad_bias, grad_weight)``: per-episode gradient of
    ``(r' - b) * log pi(z)`` w.r.t. the pre-sigmoid logit, and the summed
    gradients for bias and weight.  Every episode uses the baseline value at
    entry; the EMA baseline is then advanced over the episodes in order.
    """
    b = baseline.value
    grad_logits = np.zeros(len(episodes))
    grad_w = None
    adjusted = []
    for i, ep in enumerate(episodes):
        r_adj = ep.reward - lambda_ret * ep.z_ret
        adjusted.append(r_adj)
        p = min(max(ep.p_ret, PROB_CLAMP), 1.0 - PROB_CLAMP)
        # d/dlogit [z log p + (1 - z) log(1 - p)] = z - p
        grad_logits[i] = (r_adj - b) * (ep.z_ret - p)
        if ep.h_q is not None:
            contrib = grad_logits[i] * np.asarray(ep.h_q, dtype=np.float64)
            grad_w = contrib if grad_w is None else grad_w + contrib
    for r_adj in adjusted:
        baseline.value = baseline.decay * baseline.value + (1.0 - baseline.decay) * r_adj
    if grad_w is None:
        grad_w = np.zeros(0)
    return grad_logits, float(grad_logits.sum()), grad_w
