"""Difficulty-biased expert gate.

A learned sigmoid head scores each token's difficulty d in [0, 1]. The gate
adds +gamma*d to the logits of the matrix-memory (mLSTM) expert group and
-gamma*d to the scalar-memory (sLSTM) group before the routing softmax, so
the odds of landing in the mLSTM group grow as exp(2*gamma*d) relative to
the raw-logit preference:

    p_m / p_s = exp(2 gamma d) * (sum_m exp(z_i)) / (sum_s exp(z_k))

which reduces to exp(2 gamma d) exactly when the raw logits are group-sum
balanced. Experts 0 .. E/2-1 form the mLSTM group, the rest the sLSTM group.
Top-k weights are the selected softmax probabilities, not renormalized, with
ties broken toward the lower expert index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor


class DegenerateRoutingError(ValueError):
    """All probability mass left one expert group (p_s underflowed to zero)."""


@dataclass
class RouterParams:
    gate_w: Tensor          # [d, E]
    gate_b: Tensor          # [E]
    diff_w: Tensor          # [d]
    diff_b: Tensor          # scalar
    gamma: float
    num_experts: int
    renormalize_topk: bool = False

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ContractError("gamma must be >= 0")
        if self.num_experts < 2 or self.num_experts % 2 != 0:
            raise ContractError("router needs an even expert count >= 2")

    @property
    def group_signs(self) -> np.ndarray:
        half = self.num_experts // 2
        return np.concatenate([np.ones(half), -np.ones(half)])

    @property
    def mlstm_group(self) -> range:
        return range(self.num_experts // 2)

    @property
    def slstm_group(self) -> range:
        return range(self.num_experts // 2, self.num_experts)

    def tensors(self) -> dict[str, Tensor]:
        return {"gate_w": self.gate_w, "gate_b": self.gate_b,
                "diff_w": self.diff_w, "diff_b": self.diff_b}


def init_router(d: int, num_experts: int, gamma: float,
                rng: np.random.Generator,
                renormalize_topk: bool = False) -> RouterParams:
    bound = 1.0 / np.sqrt(d)
    return RouterParams(
        gate_w=Tensor(rng.uniform(-bound, bound, (d, num_experts)), requires_grad=True),
        gate_b=Tensor(np.zeros(num_experts), requires_grad=True),
        diff_w=Tensor(rng.uniform(-bound, bound, d), requires_grad=True),
        diff_b=Tensor(np.zeros(()), requires_grad=True),
        gamma=gamma,
        num_experts=num_experts,
        renormalize_topk=renormalize_topk,
    )


@dataclass
class RouterDecision:
    """Per-token routing record; tensor fields stay on the active tape."""

    raw_logits: Tensor          # [E]
    bias: Tensor                # [E]
    adjusted_logits: Tensor     # [E]
    probs: Tensor               # [E]
    unbiased_probs: Tensor      # [E]
    difficulty: Tensor          # scalar
    normalized_entropy: float
    topk: list[tuple[int, float]]
    gamma: float = 0.0
    num_experts: int = 0


@dataclass
class RoutingBatch:
    """Routing of a whole token sequence at once (what layers consume)."""

    raw_logits: Tensor          # [S, E]
    bias: Tensor                # [S, E]
    adjusted_logits: Tensor     # [S, E]
    probs: Tensor               # [S, E]
    unbiased_probs: Tensor      # [S, E]
    difficulty: Tensor          # [S]
    entropy: np.ndarray         # [S], detached training target
    topk_indices: np.ndarray    # [S, k] int
    gamma: float = 0.0


def difficulty_score(params: RouterParams, h: Tensor) -> Tensor:
    """d = sigmoid(w_D . h + b_D), a scalar in [0, 1] per token."""
    return T.sigmoid(T.add(T.matmul(h, params.diff_w), params.diff_b))


def modulation_bias(d: Tensor, params: RouterParams) -> Tensor:
    """Per-expert logit bias: +gamma*d for the mLSTM half, -gamma*d for the
    sLSTM half. Works on a scalar d (-> [E]) or a vector of tokens (-> [S, E])."""
    signs = Tensor(params.gamma * params.group_signs)
    if d.ndim == 0:
        return T.mul(d, signs)
    return T.outer(d, signs)


def normalized_entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy over experts divided by log E, in [0, 1].

    0 * log 0 counts as 0; works on a single distribution or a batch with
    experts on the last axis.
    """
    p = np.asarray(probs, dtype=np.float64)
    n = p.shape[-1]
    if n < 2:
        raise ContractError("normalized entropy needs at least two experts")
    logp = np.where(p > 0.0, np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return -(p * logp).sum(axis=-1) / np.log(n)


def _entropy_from_logits(raw: np.ndarray) -> np.ndarray:
    # entropy of softmax(raw) computed through log-softmax, safe for extreme logits
    shifted = raw - raw.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    p = np.exp(logp)
    return -(p * logp).sum(axis=-1) / np.log(raw.shape[-1])


def top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest probabilities, ties broken by lower index."""
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., :k]


def route_tokens(params: RouterParams, hs: Tensor, k: int) -> RoutingBatch:
    """Route every token of a [S, d] sequence; returns batched decisions."""
    e = params.num_experts
    if not (1 <= k <= e):
        raise ContractError(f"top-k must satisfy 1 <= k <= {e}, got {k}")
    raw = T.add(T.matmul(hs, params.gate_w), params.gate_b)
    d = difficulty_score(params, hs)
    bias = modulation_bias(d, params)
    adjusted = T.add(raw, bias)
    probs = T.softmax(adjusted, axis=-1)
    unbiased = T.softmax(raw, axis=-1)
    entropy = _entropy_from_logits(raw.data)
    topk = top_k_indices(probs.data, k)
    return RoutingBatch(
        raw_logits=raw, bias=bias, adjusted_logits=adjusted, probs=probs,
        unbiased_probs=unbiased, difficulty=d, entropy=entropy,
        topk_indices=topk, gamma=params.gamma,
    )


def _assemble_decision(raw: Tensor, d: Tensor, bias: Tensor, gamma: float,
                       e: int, k: int) -> RouterDecision:
    adjusted = T.add(raw, bias)
    probs = T.softmax(adjusted, axis=-1)
    unbiased = T.softmax(raw, axis=-1)
    entropy = float(_entropy_from_logits(raw.data))
    idx = top_k_indices(probs.data, k)
    topk = [(int(i), float(probs.data[i])) for i in idx]
    return RouterDecision(
        raw_logits=raw, bias=bias, adjusted_logits=adjusted, probs=probs,
        unbiased_probs=unbiased, difficulty=d, normalized_entropy=entropy,
        topk=topk, gamma=gamma, num_experts=e,
    )


def route(params: RouterParams, h: Tensor, k: int) -> RouterDecision:
    """Route a single token: bias the gate logits by the difficulty score,
    take the softmax, and select the top-k experts with their raw weights."""
    e = params.num_experts
    if not (1 <= k <= e):
        raise ContractError(f"top-k must satisfy 1 <= k <= {e}, got {k}")
    raw = T.add(T.matmul(h, params.gate_w), params.gate_b)
    d = difficulty_score(params, h)
    bias = modulation_bias(d, params)
    return _assemble_decision(raw, d, bias, params.gamma, e, k)


def decision_from_components(raw_logits, gamma: float, difficulty: float,
                             k: int = 1) -> RouterDecision:
    """Assemble a decision from explicit raw logits and difficulty, through
    the same bias/softmax/top-k path route() uses; lets verification suites
    probe the routing math directly."""
    raw = np.asarray(raw_logits, dtype=np.float64)
    e = raw.size
    if e < 2 or e % 2 != 0:
        raise ContractError("raw logits need an even expert count >= 2")
    if not (0.0 <= difficulty <= 1.0):
        raise ContractError("difficulty must lie in [0, 1]")
    if not (1 <= k <= e):
        raise ContractError(f"top-k must satisfy 1 <= k <= {e}, got {k}")
    d = Tensor(float(difficulty))
    signs = np.concatenate([np.ones(e // 2), -np.ones(e // 2)])
    bias = T.mul(d, Tensor(float(gamma) * signs))
    return _assemble_decision(Tensor(raw), d, bias, float(gamma), e, k)


def group_mass(probs, num_experts: int | None = None):
    """Split probability mass into (mLSTM-group, sLSTM-group) sums.

    Accepts a numpy vector/batch (returns numpy) or a Tensor (returns a pair
    of scalar Tensors that stay differentiable).
    """
    if isinstance(probs, Tensor):
        e = probs.shape[-1] if num_experts is None else num_experts
        half_mask = np.concatenate([np.ones(e // 2), np.zeros(e // 2)])
        if probs.ndim == 1:
            p_m = T.mul(probs, Tensor(half_mask)).sum()
            p_s = T.mul(probs, Tensor(1.0 - half_mask)).sum()
        else:
            p_m = T.mul(probs, Tensor(half_mask)).sum(axis=-1).mean()
            p_s = T.mul(probs, Tensor(1.0 - half_mask)).sum(axis=-1).mean()
        return p_m, p_s
    p = np.asarray(probs, dtype=np.float64)
    half = p.shape[-1] // 2
    return p[..., :half].sum(axis=-1), p[..., half:].sum(axis=-1)


def routing_ratio(decision: RouterDecision) -> tuple[float, float, float]:
    """Return (exact ratio p_m/p_s, predicted exp(2*gamma*d), raw-logit
    correction factor). The identity exact == predicted * correction holds
    up to floating-point error; the predicted factor alone is the
    balanced-raw-logit approximation.
    """
    p_m, p_s = group_mass(decision.probs.data)
    if p_s == 0.0:
        raise DegenerateRoutingError("sLSTM group received zero probability mass")
    half = decision.num_experts // 2
    raw = decision.raw_logits.data
    lse = lambda z: np.log(np.exp(z - z.max()).sum()) + z.max()
    correction = float(np.exp(lse(raw[:half]) - lse(raw[half:])))
    predicted = float(np.exp(2.0 * decision.gamma * decision.difficulty.data))
    return float(p_m / p_s), predicted, correction
