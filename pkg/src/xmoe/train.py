"""Data ingestion, optimization loop, checkpointing, and evaluation.

The corpus is byte-level (vocab 256, no tokenizer assets); training samples
uniformly-placed windows whose targets are the inputs shifted by one. Batch
offsets are drawn from a per-step generator seeded with (seed, step), so a
resumed run replays exactly the batches an uninterrupted run would see.

Checkpoints are a little-endian binary format: magic, format version, a
length-prefixed key=value text block (model config, optimizer scalars, step,
data seed), then per-tensor records (name, rank, dims, raw float64 values).
Round trips are bit-exact.

Metrics are an append-only CSV with the fixed column order
step,ce,l_d,l_group,l_z,l_aux,total,lr,tok_per_s,usage_L{layer}_E{expert}...
With `timing_enabled=false` the throughput column is written as 0.0, which
makes fixed-seed reruns byte-identical.
"""

from __future__ import annotations

import math
import os
import struct
import time
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, InputError, NumericError
from .losses import cross_entropy, total_loss
from .model import Model, ModelConfig
from .tensor import Tape, Tensor, backward

CHECKPOINT_MAGIC = b"XMOECKPT"
CHECKPOINT_VERSION = 1


# --- corpus -----------------------------------------------------------------


@dataclass
class Corpus:
    data: np.ndarray          # uint8 token stream
    split_index: int
    seed: int

    @property
    def train_region(self) -> np.ndarray:
        return self.data[: self.split_index]

    @property
    def val_region(self) -> np.ndarray:
        return self.data[self.split_index :]


def load_corpus(path: str, split_fraction: float = 0.9, seed: int = 0) -> Corpus:
    """Read a file as a byte stream with a deterministic contiguous split."""
    if not os.path.exists(path):
        raise InputError(f"corpus file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw:
        raise InputError(f"corpus file is empty: {path}")
    if not (0.0 < split_fraction <= 1.0):
        raise InputError("split_fraction must lie in (0, 1]")
    data = np.frombuffer(raw, dtype=np.uint8)
    return Corpus(data=data, split_index=int(len(data) * split_fraction), seed=seed)


def sample_batch(corpus: Corpus, batch: int, seq: int, seed: int, step: int,
                 region: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """One batch of windows; the generator is re-seeded from (seed, step)."""
    data = corpus.train_region if region == "train" else corpus.val_region
    if len(data) < seq + 2:
        raise InputError(
            f"{region} region has {len(data)} bytes; needs more than {seq + 1}"
        )
    rng = np.random.default_rng([seed, step])
    offsets = rng.integers(0, len(data) - seq, size=batch)
    inputs = np.stack([data[o : o + seq] for o in offsets]).astype(np.intp)
    targets = np.stack([data[o + 1 : o + seq + 1] for o in offsets]).astype(np.intp)
    return inputs, targets


def make_batches(corpus: Corpus, batch: int, seq: int, seed: int,
                 steps: int | None = None, region: str = "train"):
    """Iterator over (inputs, targets) batches; infinite when steps is None."""
    step = 0
    while steps is None or step < steps:
        yield sample_batch(corpus, batch, seq, seed, step, region)
        step += 1


# --- optimizer ----------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step_count: int
    lr: float
    beta1: float
    beta2: float
    eps: float
    clip_norm: float


def init_optimizer(params: dict[str, Tensor], lr: float = 3e-4,
                   beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8,
                   clip_norm: float = 1.0) -> OptimizerState:
    return OptimizerState(
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
        step_count=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        clip_norm=clip_norm,
    )


def optimizer_step(params: dict[str, Tensor], state: OptimizerState,
                   lr: float | None = None) -> None:
    """Global-norm clip, then a bias-corrected adaptive-moment update."""
    lr = state.lr if lr is None else lr
    grads: dict[str, np.ndarray] = {}
    sq_norm = 0.0
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        grads[name] = g
        sq_norm += float((g * g).sum())
    norm = math.sqrt(sq_norm)
    scale = state.clip_norm / norm if (state.clip_norm > 0 and norm > state.clip_norm) else 1.0

    t = state.step_count + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name] * scale
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    state.step_count = t


# --- training configuration -----------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 4
    seq_len: int = 32
    steps: int = 200
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    clip_norm: float = 1.0
    warmup_steps: int = 0
    checkpoint_interval: int = 500
    eval_interval: int = 200
    eval_windows: int = 16
    split_fraction: float = 0.9
    timing_enabled: bool = True

    def to_flat(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = ("true" if value else "false") if isinstance(value, bool) else str(value)
        return out


_TRAIN_INTS = {"batch_size", "seq_len", "steps", "warmup_steps",
               "checkpoint_interval", "eval_interval", "eval_windows"}
_TRAIN_FLOATS = {"lr", "beta1", "beta2", "eps", "clip_norm", "split_fraction"}
_TRAIN_BOOLS = {"timing_enabled"}


def parse_config_text(text: str) -> tuple[ModelConfig, TrainConfig]:
    """Parse flat key=value lines into model and training configs.

    Blank lines and '#' comments are ignored; unknown keys are errors.
    """
    model_entries: dict[str, str] = {}
    train_kwargs: dict[str, object] = {}
    model_keys = {f.name for f in fields(ModelConfig)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key in model_keys:
            if key in model_entries:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            model_entries[key] = raw
        elif key in _TRAIN_INTS or key in _TRAIN_FLOATS or key in _TRAIN_BOOLS:
            if key in train_kwargs:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            try:
                if key in _TRAIN_INTS:
                    train_kwargs[key] = int(raw)
                elif key in _TRAIN_FLOATS:
                    train_kwargs[key] = float(raw)
                else:
                    if raw.lower() not in ("true", "false"):
                        raise ValueError(raw)
                    train_kwargs[key] = raw.lower() == "true"
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key!r}") from exc
        else:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
    return ModelConfig.from_flat(model_entries), TrainConfig(**train_kwargs)


def parse_config_file(path: str) -> tuple[ModelConfig, TrainConfig]:
    if not os.path.exists(path):
        raise InputError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


# --- checkpointing ----------------------------------------------------------------


def save_checkpoint(path: str, model: Model, opt: OptimizerState, step: int,
                    data_seed: int) -> None:
    meta_lines = [f"model.{k}={v}" for k, v in model.cfg.to_flat().items()]
    for key in ("lr", "beta1", "beta2", "eps", "clip_norm"):
        meta_lines.append(f"opt.{key}={getattr(opt, key)!r}")
    meta_lines.append(f"opt.step_count={opt.step_count}")
    meta_lines.append(f"step={step}")
    meta_lines.append(f"data_seed={data_seed}")
    meta = "\n".join(meta_lines).encode("utf-8")

    records: list[tuple[str, np.ndarray]] = []
    for name, p in model.parameters().items():
        records.append((name, p.data))
    for name in model.parameters():
        records.append((f"opt.m.{name}", opt.m[name]))
        records.append((f"opt.v.{name}", opt.v[name]))

    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


@dataclass
class LoadedCheckpoint:
    config: ModelConfig
    model: Model
    optimizer: OptimizerState
    step: int
    data_seed: int


def load_checkpoint(path: str) -> LoadedCheckpoint:
    if not os.path.exists(path):
        raise InputError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise InputError(f"not a checkpoint file: {path}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise InputError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<Q", fh.read(8))
        meta = fh.read(meta_len).decode("utf-8")
        (count,) = struct.unpack("<I", fh.read(4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = [struct.unpack("<Q", fh.read(8))[0] for _ in range(rank)]
            size = int(np.prod(dims)) if dims else 1
            arrays[name] = np.frombuffer(
                fh.read(size * 8), dtype="<f8"
            ).reshape(dims).astype(np.float64)

    entries = dict(line.split("=", 1) for line in meta.splitlines() if line)
    model_entries = {k[len("model."):]: v for k, v in entries.items()
                     if k.startswith("model.")}
    cfg = ModelConfig.from_flat(model_entries)
    mdl = Model(cfg)
    opt = init_optimizer(
        mdl.parameters(),
        lr=float(entries["opt.lr"]), beta1=float(entries["opt.beta1"]),
        beta2=float(entries["opt.beta2"]), eps=float(entries["opt.eps"]),
        clip_norm=float(entries["opt.clip_norm"]),
    )
    opt.step_count = int(entries["opt.step_count"])
    for name, p in mdl.parameters().items():
        if name not in arrays:
            raise InputError(f"checkpoint missing tensor {name!r}")
        if arrays[name].shape != p.data.shape:
            raise InputError(f"checkpoint tensor {name!r} has wrong shape")
        p.data[...] = arrays[name]
        opt.m[name][...] = arrays[f"opt.m.{name}"]
        opt.v[name][...] = arrays[f"opt.v.{name}"]
    return LoadedCheckpoint(
        config=cfg, model=mdl, optimizer=opt,
        step=int(entries["step"]), data_seed=int(entries["data_seed"]),
    )


# --- metrics -------------------------------------------------------------------


def metrics_header(num_layers: int, num_experts: int) -> str:
    cols = ["step", "ce", "l_d", "l_group", "l_z", "l_aux", "total", "lr",
            "tok_per_s"]
    cols += [f"usage_L{l}_E{e}" for l in range(num_layers)
             for e in range(num_experts)]
    return ",".join(cols)


def _fmt(x: float) -> str:
    return repr(float(x))


# --- training loop -----------------------------------------------------------------


def train_loop(cfg: ModelConfig, tcfg: TrainConfig, corpus: Corpus,
               out_dir: str, resume_from: str | None = None,
               log=print) -> dict:
    """Optimize the total objective, logging one metrics row per step.

    Returns a summary dict with final losses, validation CE, and file paths.
    On a non-finite loss or gradient the last good checkpoint is kept and
    NumericError propagates.
    """
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    val_path = os.path.join(out_dir, "val.csv")
    last_ckpt = os.path.join(out_dir, "ckpt_last.bin")

    if resume_from is not None:
        loaded = load_checkpoint(resume_from)
        if loaded.config != cfg:
            raise ConfigError("checkpoint config does not match requested config")
        mdl, opt, start_step = loaded.model, loaded.optimizer, loaded.step
        append = os.path.exists(metrics_path)
    else:
        mdl = Model(cfg)
        opt = init_optimizer(mdl.parameters(), lr=tcfg.lr, beta1=tcfg.beta1,
                             beta2=tcfg.beta2, eps=tcfg.eps,
                             clip_norm=tcfg.clip_norm)
        start_step = 0
        append = False

    if not append:
        with open(metrics_path, "w", encoding="utf-8") as fh:
            fh.write(metrics_header(cfg.num_layers, cfg.num_experts) + "\n")
        with open(val_path, "w", encoding="utf-8") as fh:
            fh.write("step,val_ce\n")

    has_val = len(corpus.val_region) >= tcfg.seq_len + 2
    summary: dict = {"steps": tcfg.steps, "out_dir": out_dir}
    save_checkpoint(last_ckpt, mdl, opt, start_step, corpus.seed)

    bundle = None
    tokens_per_step = tcfg.batch_size * tcfg.seq_len
    for step in range(start_step, tcfg.steps):
        inputs, targets = sample_batch(corpus, tcfg.batch_size, tcfg.seq_len,
                                       corpus.seed, step)
        t0 = time.perf_counter()
        try:
            with Tape():
                logits, stats, usage = mdl.forward_batch(inputs)
                ce = cross_entropy(logits, targets.reshape(-1))
                bundle = total_loss(ce, stats, cfg.lambdas,
                                    group_loss_enabled=cfg.group_loss_enabled,
                                    aux_scale=cfg.aux_scale)
                backward(bundle.total)
            lr_t = tcfg.lr
            if tcfg.warmup_steps > 0:
                lr_t *= min(1.0, (step + 1) / tcfg.warmup_steps)
            # the gradient-finiteness check runs before any mutation, so on
            # failure the parameters still hold the last good step
            optimizer_step(mdl.parameters(), opt, lr=lr_t)
        except NumericError:
            mdl.zero_grads()
            save_checkpoint(last_ckpt, mdl, opt, step, corpus.seed)
            raise
        mdl.zero_grads()
        elapsed = time.perf_counter() - t0
        tok_per_s = tokens_per_step / elapsed if tcfg.timing_enabled else 0.0

        scalars = bundle.scalars()
        row = [str(step + 1), _fmt(scalars["ce"]), _fmt(scalars["l_d"]),
               _fmt(scalars["l_group"]), _fmt(scalars["l_z"]),
               _fmt(scalars["l_aux"]), _fmt(scalars["total"]), _fmt(lr_t),
               _fmt(tok_per_s)]
        row += [_fmt(f) for f in usage.reshape(-1)]
        with open(metrics_path, "a", encoding="utf-8") as fh:
            fh.write(",".join(row) + "\n")

        done = step + 1
        if has_val and tcfg.eval_interval > 0 and done % tcfg.eval_interval == 0:
            val_ce, _ = evaluate(mdl, corpus.val_region, tcfg.seq_len,
                                 max_windows=tcfg.eval_windows)
            with open(val_path, "a", encoding="utf-8") as fh:
                fh.write(f"{done},{_fmt(val_ce)}\n")
            summary["val_ce"] = val_ce
            log(f"step {done}: total {scalars['total']:.4f} "
                f"ce {scalars['ce']:.4f} val_ce {val_ce:.4f}")
        if tcfg.checkpoint_interval > 0 and done % tcfg.checkpoint_interval == 0:
            save_checkpoint(os.path.join(out_dir, f"ckpt_step{done}.bin"),
                            mdl, opt, done, corpus.seed)
            save_checkpoint(last_ckpt, mdl, opt, done, corpus.seed)

    final_path = os.path.join(out_dir, "ckpt_final.bin")
    save_checkpoint(final_path, mdl, opt, tcfg.steps, corpus.seed)
    if has_val:
        val_ce, val_ppl = evaluate(mdl, corpus.val_region, tcfg.seq_len,
                                   max_windows=tcfg.eval_windows)
        summary["val_ce"] = val_ce
        summary["val_ppl"] = val_ppl
    summary["final"] = bundle.scalars() if bundle is not None else {}
    summary["checkpoint_path"] = final_path
    summary["metrics_path"] = metrics_path
    return summary


# --- evaluation -------------------------------------------------------------------


def evaluate(mdl: Model, stream: np.ndarray, context_len: int,
             max_windows: int | None = None) -> tuple[float, float]:
    """Mean next-token CE (nats) over non-overlapping windows, and exp(CE)."""
    stream = np.asarray(stream)
    if stream.size < context_len + 1:
        raise InputError("evaluation stream shorter than one context window")
    if stream.max() >= mdl.cfg.vocab_size:
        raise ConfigError("evaluation stream has token ids outside model vocab")
    n_windows = (stream.size - 1) // context_len
    if max_windows is not None:
        n_windows = min(n_windows, max_windows)
    total_ce = 0.0
    total_tokens = 0
    for w in range(n_windows):
        chunk = stream[w * context_len : w * context_len + context_len + 1].astype(np.intp)
        logits, _ = mdl.forward(chunk[:-1])
        ce = cross_entropy(logits, chunk[1:])
        total_ce += ce.item() * context_len
        total_tokens += context_len
    mean_ce = total_ce / total_tokens
    return mean_ce, math.exp(mean_ce)


def evaluate_checkpoint(ckpt_path: str, data_path: str,
                        context_len: int) -> tuple[float, float]:
    loaded = load_checkpoint(ckpt_path)
    if not os.path.exists(data_path):
        raise InputError(f"data file not found: {data_path}")
    with open(data_path, "rb") as fh:
        raw = fh.read()
    if not raw:
        raise InputError(f"data file is empty: {data_path}")
    stream = np.frombuffer(raw, dtype=np.uint8)
    return evaluate(loaded.model, stream, context_len)
