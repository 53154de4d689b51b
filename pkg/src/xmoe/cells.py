"""Recurrent expert/mixer cells: sLSTM, mLSTM, and the FFN ablation expert.

Both LSTM variants use an exponential input gate with a log-domain
stabilizer m and a normalizer state n, so the activations stay bounded for
arbitrary gate pre-activations:

    sLSTM:  m_t = max(log f_t + m_{t-1}, log i_t)            (per component)
            c_t = f' c_{t-1} + i' tanh(z_t),  n_t = f' n_{t-1} + i'
            h_t = sigmoid(o_t) * c_t / max(n_t, 1e-6)
    mLSTM:  scalar gates, matrix memory C and key accumulator n
            C_t = f' C_{t-1} + i' v k^T,      n_t = f' n_{t-1} + i' k
            h_t = sigmoid(o_t) * C_t q / max(|n_t . q|, 1)

with i' = exp(log i - m_t) and f' = exp(log f + m_{t-1} - m_t). The forget
gate is sigmoid by default and switchable to exponential. sLSTM mixes memory
through block-diagonal recurrent weights, one block per head; the mLSTM
gates depend on the input only (no hidden recurrence), which is what makes
it parallelizable in principle -- here both run as sequential scans.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

CELL_KINDS = ("slstm", "mlstm", "ffn")
FFN_EXPANSION = 4


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def head_block_mask(hidden: int, heads: int) -> np.ndarray:
    """Binary mask selecting the block-diagonal entries for `heads` heads."""
    if hidden % heads != 0:
        raise ValueError(f"hidden size {hidden} not divisible by {heads} heads")
    mask = np.zeros((hidden, hidden))
    step = hidden // heads
    for h in range(heads):
        mask[h * step : (h + 1) * step, h * step : (h + 1) * step] = 1.0
    return mask


# --- sLSTM ------------------------------------------------------------------


@dataclass
class SLstmParams:
    wi: Tensor
    wf: Tensor
    wz: Tensor
    wo: Tensor
    ri: Tensor
    rf: Tensor
    rz: Tensor
    ro: Tensor
    bi: Tensor
    bf: Tensor
    bz: Tensor
    bo: Tensor
    head_mask: np.ndarray
    forget_act: str = "sigmoid"
    seed: int = 0
    scheme: str = "uniform-fan-in"

    def tensors(self) -> dict[str, Tensor]:
        return {
            name: getattr(self, name)
            for name in ("wi", "wf", "wz", "wo", "ri", "rf", "rz", "ro",
                         "bi", "bf", "bz", "bo")
        }


@dataclass
class SLstmState:
    c: Tensor
    n: Tensor
    h: Tensor
    m: Tensor


def init_slstm(d: int, heads: int, rng: np.random.Generator,
               forget_act: str = "sigmoid", seed: int = 0) -> SLstmParams:
    mask = head_block_mask(d, heads)
    head_dim = d // heads

    def w():
        return Tensor(_uniform(rng, (d, d), d), requires_grad=True)

    def r():
        return Tensor(_uniform(rng, (d, d), head_dim) * mask, requires_grad=True)

    def b(value=0.0):
        return Tensor(np.full(d, value), requires_grad=True)

    return SLstmParams(
        wi=w(), wf=w(), wz=w(), wo=w(),
        ri=r(), rf=r(), rz=r(), ro=r(),
        bi=b(), bf=b(1.0), bz=b(), bo=b(),
        head_mask=mask, forget_act=forget_act, seed=seed,
    )


def init_slstm_state(d: int) -> SLstmState:
    return SLstmState(
        c=Tensor(np.zeros(d)), n=Tensor(np.zeros(d)),
        h=Tensor(np.zeros(d)), m=Tensor(np.zeros(d)),
    )


def _stabilized_gates(log_i: Tensor, log_f: Tensor, m_prev: Tensor):
    m_new = T.maximum(T.add(log_f, m_prev), log_i)
    i_eff = T.exp(T.sub(log_i, m_new))
    f_eff = T.exp(T.sub(T.add(log_f, m_prev), m_new))
    return m_new, i_eff, f_eff


def _slstm_core(pre_i: Tensor, pre_f: Tensor, pre_z: Tensor, pre_o: Tensor,
                state: SLstmState, forget_act: str) -> tuple[Tensor, SLstmState]:
    log_i = pre_i
    log_f = T.logsigmoid(pre_f) if forget_act == "sigmoid" else pre_f
    m_new, i_eff, f_eff = _stabilized_gates(log_i, log_f, state.m)
    c_new = T.add(T.mul(f_eff, state.c), T.mul(i_eff, T.tanh(pre_z)))
    n_new = T.add(T.mul(f_eff, state.n), i_eff)
    h_tilde = T.div(c_new, T.maximum(n_new, 1e-6))
    h_new = T.mul(T.sigmoid(pre_o), h_tilde)
    return h_new, SLstmState(c=c_new, n=n_new, h=h_new, m=m_new)


def slstm_step(params: SLstmParams, x: Tensor,
               state: SLstmState) -> tuple[Tensor, SLstmState]:
    """One sLSTM recurrence step on a single input vector."""
    mask = Tensor(params.head_mask)
    h_prev = state.h
    pre = {}
    for gate, w, r, b in (
        ("i", params.wi, params.ri, params.bi),
        ("f", params.wf, params.rf, params.bf),
        ("z", params.wz, params.rz, params.bz),
        ("o", params.wo, params.ro, params.bo),
    ):
        pre[gate] = T.add(T.add(T.matmul(x, w), T.matmul(h_prev, T.mul(r, mask))), b)
    h, new_state = _slstm_core(pre["i"], pre["f"], pre["z"], pre["o"],
                               state, params.forget_act)
    _check_finite(h, "slstm_step")
    return h, new_state


def slstm_sequence(params: SLstmParams, xs: Tensor,
                   state: SLstmState | None = None) -> tuple[Tensor, SLstmState]:
    """Left-to-right sLSTM scan; input projections are batched across time."""
    steps = xs.shape[0]
    d = xs.shape[1]
    if state is None:
        state = init_slstm_state(d)
    mask = Tensor(params.head_mask)
    rm = {g: T.mul(r, mask) for g, r in
          (("i", params.ri), ("f", params.rf), ("z", params.rz), ("o", params.ro))}
    pre_x = {
        "i": T.add(T.matmul(xs, params.wi), params.bi),
        "f": T.add(T.matmul(xs, params.wf), params.bf),
        "z": T.add(T.matmul(xs, params.wz), params.bz),
        "o": T.add(T.matmul(xs, params.wo), params.bo),
    }
    outputs = []
    for t in range(steps):
        pre = {g: T.add(T.row(pre_x[g], t), T.matmul(state.h, rm[g]))
               for g in ("i", "f", "z", "o")}
        h, state = _slstm_core(pre["i"], pre["f"], pre["z"], pre["o"],
                               state, params.forget_act)
        outputs.append(h)
    ys = T.stack(outputs)
    _check_finite_sequence(ys, "slstm_sequence")
    return ys, state


# --- mLSTM ------------------------------------------------------------------


@dataclass
class MLstmParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor
    wi: Tensor
    bi: Tensor
    wf: Tensor
    bf: Tensor
    forget_act: str = "sigmoid"
    seed: int = 0
    scheme: str = "uniform-fan-in"

    def tensors(self) -> dict[str, Tensor]:
        return {
            name: getattr(self, name)
            for name in ("wq", "wk", "wv", "wo", "bo", "wi", "bi", "wf", "bf")
        }


@dataclass
class MLstmState:
    C: Tensor
    n: Tensor
    m: Tensor


def init_mlstm(d: int, rng: np.random.Generator,
               forget_act: str = "sigmoid", seed: int = 0) -> MLstmParams:
    def w():
        return Tensor(_uniform(rng, (d, d), d), requires_grad=True)

    return MLstmParams(
        wq=w(), wk=w(), wv=w(), wo=w(),
        bo=Tensor(np.zeros(d), requires_grad=True),
        wi=Tensor(_uniform(rng, (d,), d), requires_grad=True),
        bi=Tensor(np.zeros(()), requires_grad=True),
        wf=Tensor(_uniform(rng, (d,), d), requires_grad=True),
        bf=Tensor(np.asarray(2.0), requires_grad=True),
        forget_act=forget_act, seed=seed,
    )


def init_mlstm_state(d: int) -> MLstmState:
    return MLstmState(C=Tensor(np.zeros((d, d))), n=Tensor(np.zeros(d)),
                      m=Tensor(np.zeros(())))


def mlstm_recurrence(q: Tensor, k: Tensor, v: Tensor, log_i: Tensor,
                     log_f: Tensor, state: MLstmState) -> tuple[Tensor, MLstmState]:
    """Matrix-memory update and read-out given effective log gates.

    Storing with log_i = log_f = 0 gives plain accumulation C += v k^T,
    which is the exact-recall regime for orthonormal keys.
    """
    m_new, i_eff, f_eff = _stabilized_gates(log_i, log_f, state.m)
    c_new = T.add(T.mul(f_eff, state.C), T.mul(i_eff, T.outer(v, k)))
    n_new = T.add(T.mul(f_eff, state.n), T.mul(i_eff, k))
    dot = T.matmul(n_new, q)
    h_tilde = T.div(T.matmul(c_new, q), T.maximum(T.absval(dot), 1.0))
    return h_tilde, MLstmState(C=c_new, n=n_new, m=m_new)


def mlstm_step(params: MLstmParams, x: Tensor,
               state: MLstmState) -> tuple[Tensor, MLstmState]:
    """One mLSTM recurrence step; all gates are functions of x only."""
    d = x.shape[-1]
    q = T.matmul(x, params.wq)
    k = T.mul(T.matmul(x, params.wk), 1.0 / math.sqrt(d))
    v = T.matmul(x, params.wv)
    log_i = T.add(T.matmul(x, params.wi), params.bi)
    pre_f = T.add(T.matmul(x, params.wf), params.bf)
    log_f = T.logsigmoid(pre_f) if params.forget_act == "sigmoid" else pre_f
    h_tilde, new_state = mlstm_recurrence(q, k, v, log_i, log_f, state)
    o = T.sigmoid(T.add(T.matmul(x, params.wo), params.bo))
    h = T.mul(o, h_tilde)
    _check_finite(h, "mlstm_step")
    return h, new_state


def mlstm_sequence(params: MLstmParams, xs: Tensor,
                   state: MLstmState | None = None) -> tuple[Tensor, MLstmState]:
    """Left-to-right mLSTM scan with batched input projections."""
    steps, d = xs.shape
    if state is None:
        state = init_mlstm_state(d)
    qs = T.matmul(xs, params.wq)
    ks = T.mul(T.matmul(xs, params.wk), 1.0 / math.sqrt(d))
    vs = T.matmul(xs, params.wv)
    log_is = T.add(T.matmul(xs, params.wi), params.bi)
    pre_fs = T.add(T.matmul(xs, params.wf), params.bf)
    log_fs = T.logsigmoid(pre_fs) if params.forget_act == "sigmoid" else pre_fs
    os = T.sigmoid(T.add(T.matmul(xs, params.wo), params.bo))
    outputs = []
    for t in range(steps):
        h_tilde, state = mlstm_recurrence(
            T.row(qs, t), T.row(ks, t), T.row(vs, t),
            T.row(log_is, t), T.row(log_fs, t), state,
        )
        outputs.append(T.mul(T.row(os, t), h_tilde))
    ys = T.stack(outputs)
    _check_finite_sequence(ys, "mlstm_sequence")
    return ys, state


# --- FFN ablation expert ------------------------------------------------------


@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    seed: int = 0
    scheme: str = "uniform-fan-in"

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def init_ffn(d: int, rng: np.random.Generator, seed: int = 0) -> FfnParams:
    hidden = FFN_EXPANSION * d
    return FfnParams(
        w1=Tensor(_uniform(rng, (d, hidden), d), requires_grad=True),
        b1=Tensor(np.zeros(hidden), requires_grad=True),
        w2=Tensor(_uniform(rng, (hidden, d), hidden), requires_grad=True),
        b2=Tensor(np.zeros(d), requires_grad=True),
        seed=seed,
    )


def ffn_forward(params: FfnParams, x: Tensor) -> Tensor:
    """Two-layer net with 4x expansion and SiLU between layers; stateless."""
    pre = T.add(T.matmul(x, params.w1), params.b1)
    hidden = T.mul(pre, T.sigmoid(pre))
    return T.add(T.matmul(hidden, params.w2), params.b2)


# --- generic dispatch over cell kinds -----------------------------------------


def init_cell_params(kind: str, d: int, heads: int, rng: np.random.Generator,
                     forget_act: str = "sigmoid", seed: int = 0):
    if kind == "slstm":
        return init_slstm(d, heads, rng, forget_act, seed)
    if kind == "mlstm":
        return init_mlstm(d, rng, forget_act, seed)
    if kind == "ffn":
        return init_ffn(d, rng, seed)
    raise ValueError(f"unknown cell kind {kind!r}")


def init_cell_state(kind: str, d: int):
    if kind == "slstm":
        return init_slstm_state(d)
    if kind == "mlstm":
        return init_mlstm_state(d)
    return None


def cell_step(kind: str, params, x: Tensor, state):
    if kind == "slstm":
        return slstm_step(params, x, state)
    if kind == "mlstm":
        return mlstm_step(params, x, state)
    return ffn_forward(params, x), None


def sequence_forward(kind: str, params, xs: Tensor, state=None):
    """Unroll a cell over a sequence; output t depends only on inputs 1..t."""
    if xs.shape[0] < 1:
        raise ValueError("sequence_forward requires at least one step")
    if kind == "slstm":
        return slstm_sequence(params, xs, state)
    if kind == "mlstm":
        return mlstm_sequence(params, xs, state)
    return ffn_forward(params, xs), None


def _check_finite(t: Tensor, where: str) -> None:
    if not np.all(np.isfinite(t.data)):
        from .errors import NumericError

        raise NumericError(f"non-finite value produced in {where}")


def _check_finite_sequence(ys: Tensor, where: str) -> None:
    finite = np.isfinite(ys.data)
    if not finite.all():
        from .errors import NumericError

        step = int(np.argwhere(~finite.all(axis=-1)).min())
        raise NumericError(f"non-finite value produced in {where} at step {step}")
