"""Full model assembly: embedding, mixer + routed expert bank layers, head.

Each layer applies an xLSTM sequence mixer (an sLSTM sub-block then an mLSTM
sub-block, both pre-norm residual), routes every token of the mixed sequence,
and adds the probability-weighted outputs of the selected experts back onto
the residual stream:

    h1  = h + slstm(norm(h));  h1 = h1 + mlstm(norm(h1))
    y_t = h1_t + sum_{e in topk(t)} p_{t,e} * proj_e(expert_e(norm(h1))_t)

Recurrent experts process their assigned tokens as a causal sub-stream in
original order, carrying state across the gaps left by tokens routed
elsewhere. A (token, expert) slot beyond the expert's capacity
ceil(C * T / E) is dropped: that expert contributes nothing for that token
and the remaining selected experts still apply.

Incremental decoding (`init_decode_state` / `step`) threads the same mixer
and expert states one token at a time with no capacity limit, so memory and
per-token work are independent of position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import cells
from . import router as R
from . import tensor as T
from .errors import ConfigError, InputError
from .losses import RoutingStats
from .tensor import Tensor

EXPERT_KINDS = ("mixed", "mlstm-only", "slstm-only", "ffn")
RMS_EPS = 1e-6


@dataclass
class ModelConfig:
    vocab_size: int = 256
    embed_dim: int = 64
    num_layers: int = 2
    num_experts: int = 4
    top_k: int = 2
    num_heads: int = 2
    gamma: float = 1.0
    lambda_d: float = 0.01
    lambda_group: float = 0.01
    lambda_z: float = 0.001
    lambda_aux: float = 0.01
    capacity_factor: float | None = 1.25  # None = unlimited
    expert_kind: str = "mixed"
    group_loss_enabled: bool = True
    seed: int = 0
    renormalize_topk: bool = False
    forget_gate: str = "sigmoid"
    mixer_order: str = "slstm-first"
    tie_embeddings: bool = False
    aux_scale: float | None = None  # None = num_experts

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be at least 1")
        if self.num_experts < 2 or self.num_experts % 2 != 0:
            raise ConfigError("num_experts must be even and >= 2")
        if not (1 <= self.top_k <= self.num_experts):
            raise ConfigError("top_k must satisfy 1 <= k <= num_experts")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.capacity_factor is not None and self.capacity_factor <= 0:
            raise ConfigError("capacity_factor must be positive or unlimited")
        if self.expert_kind not in EXPERT_KINDS:
            raise ConfigError(f"expert_kind must be one of {EXPERT_KINDS}")
        if self.forget_gate not in ("sigmoid", "exp"):
            raise ConfigError("forget_gate must be 'sigmoid' or 'exp'")
        if self.mixer_order not in ("slstm-first", "mlstm-first"):
            raise ConfigError("mixer_order must be 'slstm-first' or 'mlstm-first'")

    @property
    def lambdas(self) -> tuple[float, float, float, float]:
        return (self.lambda_d, self.lambda_group, self.lambda_z, self.lambda_aux)

    def expert_kinds(self) -> list[str]:
        half = self.num_experts // 2
        if self.expert_kind == "mixed":
            return ["mlstm"] * half + ["slstm"] * half
        if self.expert_kind == "mlstm-only":
            return ["mlstm"] * self.num_experts
        if self.expert_kind == "slstm-only":
            return ["slstm"] * self.num_experts
        return ["ffn"] * self.num_experts

    def to_flat(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                out[f.name] = "unlimited" if f.name == "capacity_factor" else "auto"
            elif isinstance(value, bool):
                out[f.name] = "true" if value else "false"
            else:
                out[f.name] = str(value)
        return out

    @classmethod
    def from_flat(cls, entries: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        by_name = {f.name: f for f in fields(cls)}
        for key, raw in entries.items():
            if key not in by_name:
                raise ConfigError(f"unknown model config key {key!r}")
            kwargs[key] = _parse_field(key, raw)
        return cls(**kwargs)


def _parse_field(key: str, raw: str):
    ints = {"vocab_size", "embed_dim", "num_layers", "num_experts", "top_k",
            "num_heads", "seed"}
    floats = {"gamma", "lambda_d", "lambda_group", "lambda_z", "lambda_aux"}
    bools = {"group_loss_enabled", "renormalize_topk", "tie_embeddings"}
    try:
        if key in ints:
            return int(raw)
        if key in floats:
            return float(raw)
        if key in bools:
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if key == "capacity_factor":
            return None if raw.lower() in ("unlimited", "none") else float(raw)
        if key == "aux_scale":
            return None if raw.lower() in ("auto", "none") else float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for config key {key!r}") from exc


# --- dispatch ----------------------------------------------------------------


@dataclass
class DispatchPlan:
    """Token-slot assignment after capacity enforcement."""

    assignments: list[list[tuple[int, float]]]  # per expert: (position, weight)
    dropped: list[tuple[int, int]]              # (position, expert index)
    capacity: int | None

    def counts(self) -> list[int]:
        return [len(a) for a in self.assignments]


def expert_capacity(capacity_factor: float | None, num_tokens: int,
                    num_experts: int) -> int | None:
    if capacity_factor is None:
        return None
    return math.ceil(capacity_factor * num_tokens / num_experts)


def dispatch(topk_indices: np.ndarray, probs: np.ndarray, num_tokens: int,
             num_experts: int, capacity_factor: float | None) -> DispatchPlan:
    """Greedy assignment in token order; a slot that would push an expert
    past its capacity is dropped, the token's other selections still apply."""
    cap = expert_capacity(capacity_factor, num_tokens, num_experts)
    assignments: list[list[tuple[int, float]]] = [[] for _ in range(num_experts)]
    dropped: list[tuple[int, int]] = []
    for t in range(num_tokens):
        for e in topk_indices[t]:
            e = int(e)
            if cap is not None and len(assignments[e]) >= cap:
                dropped.append((t, e))
            else:
                assignments[e].append((t, float(probs[t, e])))
    return DispatchPlan(assignments=assignments, dropped=dropped, capacity=cap)


# --- parameter bundles ---------------------------------------------------------


@dataclass
class MixerBlock:
    slstm: cells.SLstmParams
    slstm_norm: Tensor
    slstm_proj: Tensor
    mlstm: cells.MLstmParams
    mlstm_norm: Tensor
    mlstm_proj: Tensor
    order: str = "slstm-first"


@dataclass
class Expert:
    kind: str
    cell: object
    out_proj: Tensor


@dataclass
class Layer:
    mixer: MixerBlock
    norm: Tensor
    router: R.RouterParams
    experts: list[Expert]


@dataclass
class LayerOutput:
    hidden: Tensor
    stats: RoutingStats
    expert_counts: list[int]
    plan: DispatchPlan


def rmsnorm(x: Tensor, gain: Tensor) -> Tensor:
    scale = T.sqrt(T.add(T.square(x).mean(axis=-1, keepdims=x.ndim > 1), RMS_EPS))
    return T.mul(T.div(x, scale), gain)


class Model:
    """The assembled network; parameters are named float64 leaf tensors."""

    def __init__(self, cfg: ModelConfig) -> None:
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, v = cfg.embed_dim, cfg.vocab_size
        bound = 1.0 / math.sqrt(d)

        self.embed = Tensor(rng.uniform(-bound, bound, (v, d)), requires_grad=True)
        self.layers: list[Layer] = []
        for _ in range(cfg.num_layers):
            mixer = MixerBlock(
                slstm=cells.init_slstm(d, cfg.num_heads, rng, cfg.forget_gate, cfg.seed),
                slstm_norm=Tensor(np.ones(d), requires_grad=True),
                slstm_proj=Tensor(rng.uniform(-bound, bound, (d, d)), requires_grad=True),
                mlstm=cells.init_mlstm(d, rng, cfg.forget_gate, cfg.seed),
                mlstm_norm=Tensor(np.ones(d), requires_grad=True),
                mlstm_proj=Tensor(rng.uniform(-bound, bound, (d, d)), requires_grad=True),
                order=cfg.mixer_order,
            )
            router_params = R.init_router(d, cfg.num_experts, cfg.gamma, rng,
                                          cfg.renormalize_topk)
            experts = []
            for kind in cfg.expert_kinds():
                experts.append(Expert(
                    kind=kind,
                    cell=cells.init_cell_params(kind, d, cfg.num_heads, rng,
                                                cfg.forget_gate, cfg.seed),
                    out_proj=Tensor(rng.uniform(-bound, bound, (d, d)),
                                    requires_grad=True),
                ))
            self.layers.append(Layer(
                mixer=mixer, norm=Tensor(np.ones(d), requires_grad=True),
                router=router_params, experts=experts,
            ))
        self.final_norm = Tensor(np.ones(d), requires_grad=True)
        if cfg.tie_embeddings:
            self.head_w = None
        else:
            self.head_w = Tensor(rng.uniform(-bound, bound, (d, v)), requires_grad=True)
        self.head_b = Tensor(np.zeros(v), requires_grad=True)
        self._params = self._collect_params()

    # -- parameter registry --

    def _collect_params(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {"embed": self.embed}
        for li, layer in enumerate(self.layers):
            p = f"layers.{li}"
            for name, t in layer.mixer.slstm.tensors().items():
                params[f"{p}.mixer.slstm.{name}"] = t
            params[f"{p}.mixer.slstm_norm"] = layer.mixer.slstm_norm
            params[f"{p}.mixer.slstm_proj"] = layer.mixer.slstm_proj
            for name, t in layer.mixer.mlstm.tensors().items():
                params[f"{p}.mixer.mlstm.{name}"] = t
            params[f"{p}.mixer.mlstm_norm"] = layer.mixer.mlstm_norm
            params[f"{p}.mixer.mlstm_proj"] = layer.mixer.mlstm_proj
            params[f"{p}.norm"] = layer.norm
            for name, t in layer.router.tensors().items():
                params[f"{p}.router.{name}"] = t
            for ei, expert in enumerate(layer.experts):
                for name, t in expert.cell.tensors().items():
                    params[f"{p}.experts.{ei}.{name}"] = t
                params[f"{p}.experts.{ei}.proj"] = expert.out_proj
        params["final_norm"] = self.final_norm
        if self.head_w is not None:
            params["head_w"] = self.head_w
        params["head_b"] = self.head_b
        return params

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def num_params(self) -> int:
        return sum(p.size for p in self._params.values())

    # -- forward passes --

    def forward(self, token_ids) -> tuple[Tensor, list[LayerOutput]]:
        """Run one sequence; returns [S, vocab] logits and per-layer outputs."""
        ids = np.asarray(token_ids, dtype=np.intp)
        if ids.ndim != 1 or ids.size < 1:
            raise InputError("forward expects a non-empty 1D token id sequence")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise InputError("token id out of range for the configured vocabulary")
        h = T.take(self.embed, ids)
        outputs = []
        for layer in self.layers:
            out = layer_forward(layer, h, self.cfg)
            outputs.append(out)
            h = out.hidden
        logits = self._head(rmsnorm(h, self.final_norm))
        return logits, outputs

    def _head(self, hn: Tensor) -> Tensor:
        w = T.transpose(self.embed) if self.head_w is None else self.head_w
        return T.add(T.matmul(hn, w), self.head_b)

    def forward_batch(self, batch_ids) -> tuple[Tensor, list[RoutingStats], np.ndarray]:
        """Run B sequences; returns concatenated [B*S, vocab] logits, merged
        per-layer routing stats, and the [L, E] dispatch-fraction table."""
        batch_ids = np.asarray(batch_ids, dtype=np.intp)
        if batch_ids.ndim != 2:
            raise InputError("forward_batch expects [B, S] token ids")
        b, s = batch_ids.shape
        cfg = self.cfg
        all_logits = []
        per_layer: list[list[LayerOutput]] = [[] for _ in self.layers]
        for seq in batch_ids:
            logits, outs = self.forward(seq)
            all_logits.append(logits)
            for li, out in enumerate(outs):
                per_layer[li].append(out)
        merged: list[RoutingStats] = []
        usage = np.zeros((cfg.num_layers, cfg.num_experts))
        for li, outs in enumerate(per_layer):
            counts = np.zeros(cfg.num_experts)
            for out in outs:
                counts += np.asarray(out.expert_counts, dtype=float)
            fractions = counts / (b * s * cfg.top_k)
            usage[li] = fractions
            merged.append(RoutingStats(
                raw_logits=T.concat([o.stats.raw_logits for o in outs]),
                probs=T.concat([o.stats.probs for o in outs]),
                unbiased_probs=T.concat([o.stats.unbiased_probs for o in outs]),
                difficulty=T.concat([o.stats.difficulty for o in outs]),
                entropy_target=np.concatenate([o.stats.entropy_target for o in outs]),
                dispatch_fractions=fractions,
                batch_size=b,
                seq_len=s,
            ))
        return T.concat(all_logits), merged, usage

    # -- incremental decoding --

    def init_decode_state(self) -> list[dict]:
        d = self.cfg.embed_dim
        state = []
        for layer in self.layers:
            state.append({
                "slstm": cells.init_slstm_state(d),
                "mlstm": cells.init_mlstm_state(d),
                "experts": [cells.init_cell_state(e.kind, d) for e in layer.experts],
            })
        return state

    def step(self, state: list[dict], token_id: int) -> tuple[Tensor, list[dict]]:
        """Decode one token with cached recurrent states (capacity unlimited).

        Expert state advances only for the experts the token is routed to,
        matching the sub-stream semantics of the full-sequence forward.
        """
        tid = int(token_id)
        if not (0 <= tid < self.cfg.vocab_size):
            raise InputError("token id out of range for the configured vocabulary")
        x = T.row(self.embed, tid)
        for layer, lstate in zip(self.layers, state):
            mixer = layer.mixer
            blocks = _mixer_sequence(mixer)
            for kind, params, norm, proj, skey in blocks:
                normed = rmsnorm(x, norm)
                out, new_state = cells.cell_step(kind, params, normed, lstate[skey])
                lstate[skey] = new_state
                x = T.add(x, T.matmul(out, proj))
            g = rmsnorm(x, layer.norm)
            dec = R.route(layer.router, g, self.cfg.top_k)
            selected = sorted(i for i, _ in dec.topk)
            if layer.router.renormalize_topk:
                denom = sum(w for _, w in dec.topk)
            y = x
            for e in selected:
                expert = layer.experts[e]
                out, new_state = cells.cell_step(expert.kind, expert.cell, g,
                                                 lstate["experts"][e])
                lstate["experts"][e] = new_state
                w = T.row(dec.probs, e)
                if layer.router.renormalize_topk:
                    w = T.div(w, denom)
                y = T.add(y, T.mul(T.matmul(out, expert.out_proj), w))
            x = y
        logits = self._head(rmsnorm(x, self.final_norm))
        return logits, state


def _mixer_sequence(mixer: MixerBlock):
    slstm = ("slstm", mixer.slstm, mixer.slstm_norm, mixer.slstm_proj, "slstm")
    mlstm = ("mlstm", mixer.mlstm, mixer.mlstm_norm, mixer.mlstm_proj, "mlstm")
    return (slstm, mlstm) if mixer.order == "slstm-first" else (mlstm, slstm)


def sequence_mix(mixer: MixerBlock, h: Tensor) -> Tensor:
    """Pre-norm residual sLSTM and mLSTM sub-blocks over the sequence."""
    for kind, params, norm, proj, _ in _mixer_sequence(mixer):
        out, _ = cells.sequence_forward(kind, params, rmsnorm(h, norm))
        h = T.add(h, T.matmul(out, proj))
    return h


def layer_forward(layer: Layer, h: Tensor, cfg: ModelConfig) -> LayerOutput:
    """Mix the sequence, route each token, and apply the dispatched experts."""
    s = h.shape[0]
    h1 = sequence_mix(layer.mixer, h)
    g = rmsnorm(h1, layer.norm)
    batch = R.route_tokens(layer.router, g, cfg.top_k)
    plan = dispatch(batch.topk_indices, batch.probs.data, s, cfg.num_experts,
                    cfg.capacity_factor)

    renorm_sums = None
    if layer.router.renormalize_topk:
        rows = np.repeat(np.arange(s), cfg.top_k)
        cols = batch.topk_indices.reshape(-1)
        renorm_sums = T.take_elems(batch.probs, rows, cols).reshape(s, cfg.top_k).sum(axis=1)

    y = h1
    counts: list[int] = []
    for e, expert in enumerate(layer.experts):
        positions = [p for p, _ in plan.assignments[e]]
        counts.append(len(positions))
        if not positions:
            continue
        sub = T.take(g, positions)
        out, _ = cells.sequence_forward(expert.kind, expert.cell, sub)
        proj = T.matmul(out, expert.out_proj)
        w = T.take_elems(batch.probs, positions, np.full(len(positions), e))
        if renorm_sums is not None:
            w = T.div(w, T.take(renorm_sums, positions))
        weighted = T.mul(proj, w.reshape(len(positions), 1))
        y = T.add(y, T.scatter(weighted, positions, s))

    fractions = np.asarray(counts, dtype=float) / (s * cfg.top_k)
    stats = RoutingStats(
        raw_logits=batch.raw_logits,
        probs=batch.probs,
        unbiased_probs=batch.unbiased_probs,
        difficulty=batch.difficulty,
        entropy_target=batch.entropy,
        dispatch_fractions=fractions,
        batch_size=1,
        seq_len=s,
    )
    return LayerOutput(hidden=y, stats=stats, expert_counts=counts, plan=plan)


# --- cost accounting -----------------------------------------------------------


@dataclass
class CostReport:
    total_params: int
    active_params_per_token: int
    macs_per_token: int
    active_macs_per_token: int
    expert_compute_ratio: float
    breakdown: dict[str, int] = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [
            f"total parameters:            {self.total_params}",
            f"active parameters per token: {self.active_params_per_token}",
            f"dense MACs per token:        {self.macs_per_token}",
            f"active MACs per token:       {self.active_macs_per_token}",
            f"expert compute ratio (k/E):  {self.expert_compute_ratio:g}",
        ]
        for name, value in self.breakdown.items():
            out.append(f"  {name}: {value}")
        return out


def _cell_param_count(kind: str, d: int, heads: int) -> int:
    if kind == "slstm":
        return 4 * (d * d) + 4 * (d * d) + 4 * d
    if kind == "mlstm":
        return 4 * (d * d) + d + 2 * (d + 1)
    return 2 * (4 * d * d) + 4 * d + d


def _cell_macs(kind: str, d: int, heads: int) -> int:
    if kind == "slstm":
        # input projections are dense, recurrent ones block-diagonal
        return 4 * d * d + 4 * d * (d // heads) + 6 * d
    if kind == "mlstm":
        # qkv + output gate projections, memory decay/update, read-out
        return 4 * d * d + 2 * d + 4 * d * d + 2 * d
    return 8 * d * d


def active_param_and_flop_report(cfg: ModelConfig) -> CostReport:
    """Parameter and per-token multiply-accumulate estimates.

    Active counts cover what one token touches: the mixer, the router, its
    k experts (expert sizes averaged over kinds), and the head. The
    activated over total expert-compute ratio is k/E.
    """
    d, v, e, k = cfg.embed_dim, cfg.vocab_size, cfg.num_experts, cfg.top_k
    heads = cfg.num_heads
    kinds = cfg.expert_kinds()

    mixer_params = (_cell_param_count("slstm", d, heads)
                    + _cell_param_count("mlstm", d, heads) + 2 * d * d + 2 * d)
    router_params = d * e + e + d + 1
    expert_params = [_cell_param_count(kn, d, heads) + d * d for kn in kinds]
    layer_params = mixer_params + router_params + sum(expert_params) + d
    head_params = (0 if cfg.tie_embeddings else d * v) + v
    total = v * d + cfg.num_layers * layer_params + d + head_params

    mean_expert = sum(expert_params) / e
    active_layer = mixer_params + router_params + d + int(round(k * mean_expert))
    active = d + cfg.num_layers * active_layer + d + head_params

    mixer_macs = (_cell_macs("slstm", d, heads) + _cell_macs("mlstm", d, heads)
                  + 2 * d * d + 4 * d)
    router_macs = d * e + d
    expert_macs = [_cell_macs(kn, d, heads) + d * d for kn in kinds]
    mean_expert_macs = sum(expert_macs) / e
    head_macs = d * v
    dense_layer = mixer_macs + router_macs + int(sum(expert_macs))
    active_layer_macs = mixer_macs + router_macs + int(round(k * mean_expert_macs))
    macs = cfg.num_layers * dense_layer + head_macs
    active_macs = cfg.num_layers * active_layer_macs + head_macs

    return CostReport(
        total_params=total,
        active_params_per_token=active,
        macs_per_token=macs,
        active_macs_per_token=active_macs,
        expert_compute_ratio=k / e,
        breakdown={
            "embedding_params": v * d,
            "mixer_params_per_layer": mixer_params,
            "router_params_per_layer": router_params,
            "expert_params_per_layer": sum(expert_params),
            "head_params": head_params,
            "active_expert_macs_per_layer": int(round(k * mean_expert_macs)),
            "dense_expert_macs_per_layer": int(sum(expert_macs)),
        },
    )
