"""Task cross-entropy and the four auxiliary routing losses.

All auxiliary terms are averaged over the B*S tokens of a batch:

    difficulty   L_d     = mean (d - H)^2, H the normalized entropy of the
                           unbiased routing distribution, treated as a
                           constant target (the prediction moves, not H)
    group        L_group = p_m log(2 p_m) + p_s log(2 p_s), the KL of the
                           batch-mean group masses from a 50/50 split
    z-loss       L_z     = mean (log sum_i exp(raw logit_i))^2
    load balance L_aux   = scale * sum_i f_i p_i, with p_i the mean routing
                           probability and f_i the dispatched token-slot
                           fraction (constant w.r.t. gradients); scale
                           defaults to the expert count, making the minimum
                           exactly 1 at uniform routing

and the total objective is ce + lambda_d L_d + lambda_group L_group +
lambda_z L_z + lambda_aux L_aux with the auxiliary terms averaged across
layers first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import router as R
from . import tensor as T
from .errors import NumericError
from .tensor import Tensor

# keeps x*log(2x) exact at the endpoints: 0*log(2*tiny) == -0.0, 1*log(2) == log 2
_LOG_CLAMP = 1e-300


@dataclass
class RoutingStats:
    """Per-layer routing record for one batch; tensors stay differentiable."""

    raw_logits: Tensor           # [T, E]
    probs: Tensor                # [T, E]
    unbiased_probs: Tensor       # [T, E]
    difficulty: Tensor           # [T]
    entropy_target: np.ndarray   # [T], detached
    dispatch_fractions: np.ndarray  # [E], detached token-slot fractions
    batch_size: int = 1
    seq_len: int = 0

    @property
    def num_tokens(self) -> int:
        return self.probs.shape[0]

    @property
    def num_experts(self) -> int:
        return self.probs.shape[-1]


@dataclass
class LossBundle:
    task_ce: Tensor
    l_d: Tensor
    l_group: Tensor
    l_z: Tensor
    l_aux: Tensor
    total: Tensor
    lambdas: tuple[float, float, float, float]
    per_layer: dict[str, list[float]] = field(default_factory=dict)

    def scalars(self) -> dict[str, float]:
        return {
            "ce": self.task_ce.item(),
            "l_d": self.l_d.item(),
            "l_group": self.l_group.item(),
            "l_z": self.l_z.item(),
            "l_aux": self.l_aux.item(),
            "total": self.total.item(),
        }


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy in nats, computed through log-softmax."""
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    lse = T.logsumexp(logits, axis=-1)
    picked = T.take_elems(logits, np.arange(targets.size), targets)
    return T.sub(lse, picked).mean()


def difficulty_loss(stats: RoutingStats) -> Tensor:
    """Mean squared gap between predicted difficulty and the entropy target."""
    return T.square(T.sub(stats.difficulty, Tensor(stats.entropy_target))).mean()


def group_balance_loss(p_m: Tensor | float, p_s: Tensor | float) -> Tensor:
    """KL([p_m, p_s] || [1/2, 1/2]) written as p log(2p) terms, with
    x log(2x) = 0 at x = 0. Zero iff the masses are balanced; at most log 2."""
    p_m = p_m if isinstance(p_m, Tensor) else Tensor(p_m)
    p_s = p_s if isinstance(p_s, Tensor) else Tensor(p_s)
    term_m = T.mul(p_m, T.log(T.mul(T.maximum(p_m, _LOG_CLAMP), 2.0)))
    term_s = T.mul(p_s, T.log(T.mul(T.maximum(p_s, _LOG_CLAMP), 2.0)))
    return T.add(term_m, term_s)


def group_loss(stats: RoutingStats) -> Tensor:
    """Group-balance KL on the batch-averaged biased routing probabilities."""
    p_m, p_s = R.group_mass(stats.probs, stats.num_experts)
    return group_balance_loss(p_m, p_s)


def z_loss(stats: RoutingStats) -> Tensor:
    """Mean squared log-partition of the raw (pre-bias) router logits."""
    return T.square(T.logsumexp(stats.raw_logits, axis=-1)).mean()


def load_balance_loss(stats: RoutingStats, scale: float | None = None) -> Tensor:
    """scale * sum_i f_i * p_i; f_i carries no gradient, p_i does."""
    if scale is None:
        scale = float(stats.num_experts)
    mean_probs = stats.probs.mean(axis=0)
    return T.mul(T.mul(mean_probs, Tensor(stats.dispatch_fractions)).sum(), scale)


def total_loss(
    task_ce: Tensor,
    layer_stats: list[RoutingStats],
    lambdas: tuple[float, float, float, float],
    group_loss_enabled: bool = True,
    aux_scale: float | None = None,
) -> LossBundle:
    """Combine the task loss with layer-averaged auxiliary losses."""
    lam_d, lam_group, lam_z, lam_aux = lambdas
    per_layer: dict[str, list[float]] = {"l_d": [], "l_group": [], "l_z": [], "l_aux": []}
    terms: dict[str, list[Tensor]] = {"l_d": [], "l_group": [], "l_z": [], "l_aux": []}
    for stats in layer_stats:
        values = {
            "l_d": difficulty_loss(stats),
            "l_group": group_loss(stats),
            "l_z": z_loss(stats),
            "l_aux": load_balance_loss(stats, aux_scale),
        }
        for name, value in values.items():
            terms[name].append(value)
            per_layer[name].append(value.item())

    def layer_mean(ts: list[Tensor]) -> Tensor:
        return T.stack(ts).mean() if ts else Tensor(0.0)

    l_d = layer_mean(terms["l_d"])
    l_group = layer_mean(terms["l_group"])
    l_z = layer_mean(terms["l_z"])
    l_aux = layer_mean(terms["l_aux"])

    effective_group = lam_group if group_loss_enabled else 0.0
    total = task_ce
    for lam, term, name in (
        (lam_d, l_d, "l_d"),
        (effective_group, l_group, "l_group"),
        (lam_z, l_z, "l_z"),
        (lam_aux, l_aux, "l_aux"),
    ):
        if not np.isfinite(term.data):
            raise NumericError(f"loss term {name} is not finite")
        if lam != 0.0:
            total = T.add(total, T.mul(term, lam))
    if not np.isfinite(task_ce.data):
        raise NumericError("loss term task_ce is not finite")

    return LossBundle(
        task_ce=task_ce, l_d=l_d, l_group=l_group, l_z=l_z, l_aux=l_aux,
        total=total, lambdas=lambdas, per_layer=per_layer,
    )
