"""Quantization-aware training on byte corpora."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import autograd as ag
from .autograd import CVar
from .errors import ConfigurationError
from .model import MODES, Model, ModelConfig, forward_graph, init_model, parameter_vars
from .tensor import ComplexTensor

log = logging.getLogger(__name__)

DTYPES = {"float64": np.float64, "float32": np.float32}
LOSS_COLUMNS = ("step", "lr", "loss", "mode")


@dataclass
class TrainConfig:
    total_steps: int = 500
    # None means 2% of total_steps
    warmup_steps: int | None = None
    peak_lr_stage1: float = 3e-3
    peak_lr_stage2: float = 2e-3
    weight_decay_stage1: float = 0.1
    weight_decay_stage2: float = 0.0
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    batch_size: int = 8
    seq_len: int = 128
    mode: str = "qat"
    dtype: str = "float64"
    seed: int = 0
    eval_batches: int = 4

    def __post_init__(self):
        if self.warmup_steps is None:
            self.warmup_steps = max(1, round(0.02 * self.total_steps))
        if self.total_steps <= 0 or self.batch_size <= 0 or self.seq_len <= 0:
            raise ConfigurationError("total_steps, batch_size and seq_len must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps // 2:
            raise ConfigurationError("warmup_steps must lie within the first stage")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dtype not in DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in [0, 1)")
        if self.clip_norm <= 0:
            raise ConfigurationError("clip_norm must be positive")

    @property
    def betas(self) -> tuple[float, float]:
        return self.beta1, self.beta2

    @property
    def stage_boundary(self) -> float:
        return self.total_steps / 2

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class TrainState:
    config: TrainConfig
    step: int = 0
    moments: dict = field(default_factory=dict)

    @property
    def rng_seed(self) -> int:
        return self.config.seed

    @property
    def stage(self) -> int:
        return 1 if self.step < self.config.stage_boundary else 2


@dataclass
class LossRecord:
    step: int
    lr: float
    loss: float
    mode: str


@dataclass
class TrainResult:
    model: Model
    trace: list[LossRecord]
    initial_eval_loss: float
    final_eval_loss: float


def lr_at(step: float, state: TrainState | TrainConfig) -> float:
    """Two-stage linear schedule.

    Stage 1 warms up linearly to ``peak_lr_stage1`` then decays to 0 at the
    halfway mark; stage 2 restarts at ``peak_lr_stage2`` and decays to 0 at
    ``total_steps``.
    """
    c = state.config if isinstance(state, TrainState) else state
    half = c.stage_boundary
    if step < 0 or step > c.total_steps:
        raise ConfigurationError(f"step {step} outside [0, {c.total_steps}]")
    if step < c.warmup_steps:
        return c.peak_lr_stage1 * step / c.warmup_steps
    if step < half:
        return c.peak_lr_stage1 * (half - step) / (half - c.warmup_steps)
    return c.peak_lr_stage2 * (c.total_steps - step) / (c.total_steps - half)


def weight_decay_at(step: int, config: TrainConfig) -> float:
    return config.weight_decay_stage1 if step < config.stage_boundary else config.weight_decay_stage2


def clip_gradients(grads: dict, clip_norm: float) -> tuple[dict, float]:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total <= clip_norm or total == 0.0:
        return grads, total
    factor = clip_norm / total
    return {k: g * factor for k, g in grads.items()}, total


def adamw_step(params: dict, grads: dict, state: TrainState, lr: float) -> tuple[dict, TrainState]:
    """Clip by global norm, then one AdamW update in place.

    Decoupled weight decay uses the current stage's rate and skips 1-D
    tensors (norm gains).
    """
    c = state.config
    grads, _ = clip_gradients(grads, c.clip_norm)
    wd = weight_decay_at(state.step, c)
    state.step += 1
    t = state.step
    b1, b2 = c.betas
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(p), np.zeros_like(p))
        m, v = state.moments[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if wd and p.ndim > 1:
            p *= 1.0 - lr * wd
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
    return params, state


# --- forward pieces exposed for direct use -----------------------------------


def qat_linear_forward(x: ComplexTensor, w: ComplexTensor) -> ComplexTensor:
    with ag.no_grad():
        return ag.qat_linear(CVar.const(x), CVar.const(w)).tensor()


def cross_entropy(logits, targets) -> float:
    with ag.no_grad():
        return float(ag.cross_entropy(np.asarray(logits), targets).value)


def loss_graph(model: Model, params: dict, x_ids, y_ids, mode: str) -> ag.Var:
    return ag.cross_entropy(forward_graph(x_ids, model, mode, params), y_ids)


def loss_and_grads(model: Model, x_ids, y_ids, mode: str) -> tuple[float, dict]:
    params = parameter_vars(model)
    loss = loss_graph(model, params, x_ids, y_ids, mode)
    loss.backward()
    grads = {}
    for k, v in params.items():
        grads[k] = v.grad if v.grad is not None else np.zeros_like(v.value)
    return float(loss.value), grads


def evaluate(model: Model, batches, mode: str) -> float:
    with ag.no_grad():
        losses = [float(loss_graph(model, parameter_vars(model, False), x, y, mode).value) for x, y in batches]
    return float(np.mean(losses))


# --- data -------------------------------------------------------------------


def batch_sampler(tokens: np.ndarray, batch_size: int, seq_len: int, seed: int):
    tokens = np.asarray(tokens)
    span = tokens.size - seq_len - 1
    if span < 0:
        raise ConfigurationError(f"corpus of {tokens.size} tokens is shorter than one window of {seq_len + 1}")
    rng = np.random.default_rng(seed)
    idx = np.arange(seq_len)
    while True:
        starts = rng.integers(0, span + 1, size=batch_size)
        window = starts[:, None] + idx[None, :]
        yield tokens[window], tokens[window + 1]


def fixed_batches(tokens, batch_size: int, seq_len: int, seed: int, count: int) -> list:
    sampler = batch_sampler(tokens, batch_size, seq_len, seed)
    return [next(sampler) for _ in range(count)]


def train_loop(
    tokens,
    model_config: ModelConfig,
    train_config: TrainConfig,
    model: Model | None = None,
    progress=None,
) -> TrainResult:
    """Train from ``model`` (or a fresh seeded init) and return the loss trace.

    The eval loss is measured on fixed held-aside batches before and after
    training, in the training mode.
    """
    c = train_config
    if c.seq_len > model_config.max_seq:
        raise ConfigurationError(f"seq_len {c.seq_len} exceeds max_seq {model_config.max_seq}")
    tokens = np.asarray(tokens)
    if tokens.size and tokens.max() >= model_config.vocab_size:
        raise ConfigurationError("corpus contains token ids beyond vocab_size")
    dtype = DTYPES[c.dtype]
    model = init_model(model_config, seed=c.seed, dtype=dtype) if model is None else model.astype(dtype)
    eval_set = fixed_batches(tokens, c.batch_size, c.seq_len, c.seed + 1, c.eval_batches)
    sampler = batch_sampler(tokens, c.batch_size, c.seq_len, c.seed)
    state = TrainState(c)
    params = dict(model.named_parameters())
    initial = evaluate(model, eval_set, c.mode)
    trace = []
    for step in range(c.total_steps):
        x, y = next(sampler)
        lr = lr_at(step, state)
        loss, grads = loss_and_grads(model, x, y, c.mode)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        adamw_step(params, grads, state, lr)
        trace.append(LossRecord(step, lr, loss, c.mode))
        if progress is not None:
            progress(trace[-1])
    final = evaluate(model, eval_set, c.mode)
    log.info("trained %d steps in %s mode: eval loss %.4f -> %.4f", c.total_steps, c.mode, initial, final)
    model.meta["train_mode"] = c.mode
    return TrainResult(model, trace, initial, final)


def loss_csv(trace: list[LossRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_COLUMNS)
    for r in trace:
        w.writerow([r.step, repr(r.lr), repr(r.loss), r.mode])
    return buf.getvalue()


# --- finite-difference verification -------------------------------------------


def gradient_check(
    model: Model, x_ids, y_ids, n_samples: int = 50, h: float = 1e-5, seed: int = 0, mode: str = "full_precision"
) -> list[dict]:
    """Compare analytic gradients with central differences on sampled entries.

    Every parameter array contributes at least one entry; the rest are drawn
    uniformly. Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    rng = np.random.default_rng(seed)
    _, grads = loss_and_grads(model, x_ids, y_ids, mode)
    named = model.named_parameters()
    picks = [(name, int(rng.integers(arr.size))) for name, arr in named]
    while len(picks) < n_samples:
        name, arr = named[int(rng.integers(len(named)))]
        picks.append((name, int(rng.integers(arr.size))))
    arrays = dict(named)
    results = []
    for name, flat in picks:
        arr = arrays[name]
        idx = np.unravel_index(flat, arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        lp = evaluate(model, [(x_ids, y_ids)], mode)
        arr[idx] = orig - h
        lm = evaluate(model, [(x_ids, y_ids)], mode)
        arr[idx] = orig
        numeric = (lp - lm) / (2 * h)
        analytic = float(grads[name][idx])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        results.append({"name": name, "index": idx, "analytic": analytic, "numeric": numeric, "rel_err": rel})
    return results
