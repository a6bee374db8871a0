"""Complex-valued pre-norm decoder.

Layout per layer: RMSNorm -> attention (complex RoPE on Q/K, real softmax over
``Re(conj(Q) K^T)``) -> residual -> RMSNorm -> gated FFN with squared ReLU ->
residual. Token embeddings come from two real tables (real and imaginary
planes); the LM head is a real linear map of ``[H_re | H_im]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import autograd as ag
from .autograd import CVar, Var
from .errors import ConfigurationError, DimensionError
from .kernel import float_reference_gemm, lut_gemm, multfree_gemm
from .quantize import PackedQuantTensor, dequantize_weights, quantize_activation, quantize_weights
from .tensor import ComplexTensor

PROJECTIONS = ("wq", "wk", "wv", "wo", "wup", "wgate", "wdown")
MODES = ("full_precision", "qat")
KERNELS = ("float", "multfree", "lut")


@dataclass
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_heads: int = 4
    d_head: int = 16
    d_ffn: int = 128
    n_layers: int = 2
    max_seq: int = 128
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    # 0 means the concatenated per-head width, 2 * d_head
    attn_scale_dim: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "d_head", "d_ffn", "n_layers", "max_seq"):
            if int(getattr(self, name)) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigurationError(
                f"d_model ({self.d_model}) must equal n_heads * d_head ({self.n_heads} * {self.d_head})"
            )
        if self.attn_scale_dim < 0:
            raise ConfigurationError("attn_scale_dim must be non-negative")
        if self.rope_base <= 0 or self.norm_eps < 0:
            raise ConfigurationError("rope_base must be positive and norm_eps non-negative")

    @property
    def scale_dim(self) -> int:
        return self.attn_scale_dim or 2 * self.d_head

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


Weight = ComplexTensor | PackedQuantTensor


@dataclass
class LayerWeights:
    wq: Weight
    wk: Weight
    wv: Weight
    wo: Weight
    wup: Weight
    wgate: Weight
    wdown: Weight
    attn_norm_re: np.ndarray
    attn_norm_im: np.ndarray
    ffn_norm_re: np.ndarray
    ffn_norm_im: np.ndarray


@dataclass
class Model:
    config: ModelConfig
    embed_re: np.ndarray
    embed_im: np.ndarray
    layers: list[LayerWeights]
    norm_re: np.ndarray
    norm_im: np.ndarray
    w_out: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.embed_re.dtype

    @property
    def is_packed(self) -> bool:
        return any(isinstance(getattr(l, p), PackedQuantTensor) for l in self.layers for p in PROJECTIONS)

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        """Trainable real arrays in a fixed order. Packed projections are skipped."""
        out = [("embed_re", self.embed_re), ("embed_im", self.embed_im)]
        for i, layer in enumerate(self.layers):
            for p in PROJECTIONS:
                w = getattr(layer, p)
                if isinstance(w, ComplexTensor):
                    out.append((f"layers.{i}.{p}.re", w.re))
                    out.append((f"layers.{i}.{p}.im", w.im))
            for g in ("attn_norm_re", "attn_norm_im", "ffn_norm_re", "ffn_norm_im"):
                out.append((f"layers.{i}.{g}", getattr(layer, g)))
        out += [("norm_re", self.norm_re), ("norm_im", self.norm_im), ("w_out", self.w_out)]
        return out

    def projections(self):
        for i, layer in enumerate(self.layers):
            for p in PROJECTIONS:
                yield i, p, getattr(layer, p)

    def map_projections(self, fn) -> "Model":
        """Copy of the model with ``fn(weight)`` applied to every projection."""
        layers = [
            LayerWeights(
                **{p: fn(getattr(l, p)) for p in PROJECTIONS},
                attn_norm_re=l.attn_norm_re.copy(),
                attn_norm_im=l.attn_norm_im.copy(),
                ffn_norm_re=l.ffn_norm_re.copy(),
                ffn_norm_im=l.ffn_norm_im.copy(),
            )
            for l in self.layers
        ]
        return Model(
            self.config,
            self.embed_re.copy(),
            self.embed_im.copy(),
            layers,
            self.norm_re.copy(),
            self.norm_im.copy(),
            self.w_out.copy(),
            dict(self.meta),
        )

    def quantized(self) -> "Model":
        return self.map_projections(lambda w: w if isinstance(w, PackedQuantTensor) else quantize_weights(w))

    def dequantized(self) -> "Model":
        dt = self.dtype
        return self.map_projections(
            lambda w: dequantize_weights(w, dtype=dt) if isinstance(w, PackedQuantTensor) else w.astype(dt)
        )

    def copy(self) -> "Model":
        return self.map_projections(lambda w: w if isinstance(w, PackedQuantTensor) else w.astype(w.dtype))

    def astype(self, dtype) -> "Model":
        m = self.map_projections(lambda w: w if isinstance(w, PackedQuantTensor) else w.astype(dtype))
        for l in m.layers:
            for g in ("attn_norm_re", "attn_norm_im", "ffn_norm_re", "ffn_norm_im"):
                setattr(l, g, getattr(l, g).astype(dtype))
        for name in ("embed_re", "embed_im", "norm_re", "norm_im", "w_out"):
            setattr(m, name, getattr(m, name).astype(dtype))
        return m


def _complex_normal(rng, shape, std, dtype) -> ComplexTensor:
    return ComplexTensor(
        (rng.standard_normal(shape) * std).astype(dtype), (rng.standard_normal(shape) * std).astype(dtype)
    )


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float64) -> Model:
    """Random model. Projection planes are N(0, 1/(2*fan_in)) so E|w|^2 = 1/fan_in."""
    rng = np.random.default_rng(seed)
    d, f, v = config.d_model, config.d_ffn, config.vocab_size

    def proj(fan_in, fan_out):
        return _complex_normal(rng, (fan_in, fan_out), 1.0 / math.sqrt(2 * fan_in), dtype)

    ones = lambda: np.ones(d, dtype=dtype)
    embed = _complex_normal(rng, (v, d), 1.0, dtype)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                wq=proj(d, d),
                wk=proj(d, d),
                wv=proj(d, d),
                wo=proj(d, d),
                wup=proj(d, f),
                wgate=proj(d, f),
                wdown=proj(f, d),
                attn_norm_re=ones(),
                attn_norm_im=ones(),
                ffn_norm_re=ones(),
                ffn_norm_im=ones(),
            )
        )
    w_out = (rng.standard_normal((v, 2 * d)) * 0.02).astype(dtype)
    return Model(config, embed.re, embed.im, layers, ones(), ones(), w_out)


# --- pure building blocks --------------------------------------------------


def embed_tokens(ids, model: Model) -> ComplexTensor:
    ids = _check_ids(ids, model.config.vocab_size)
    return ComplexTensor(model.embed_re[ids], model.embed_im[ids])


def rope_frequencies(d_head: int, base: float) -> np.ndarray:
    return base ** (-np.arange(d_head) / d_head)


def rope_tables(positions, d_head: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin of ``m * theta_j``, shaped ``[seq, 1, d_head]`` to broadcast over heads."""
    angles = np.asarray(positions, dtype=np.float64)[:, None] * rope_frequencies(d_head, base)[None, :]
    return np.cos(angles)[:, None, :], np.sin(angles)[:, None, :]


def apply_rope(x: ComplexTensor, positions, base: float = 10000.0) -> ComplexTensor:
    """Rotate feature ``j`` at position ``m`` by ``exp(i m theta_j)``; ``x`` is ``[seq, heads, d_head]``."""
    positions = np.asarray(positions)
    if x.re.ndim != 3 or positions.shape != (x.shape[0],):
        raise DimensionError(f"expected [seq, heads, d_head] with {len(positions)} positions, got {x.shape}")
    cos, sin = rope_tables(positions, x.shape[-1], base)
    with ag.no_grad():
        return ag.c_rotate(CVar.const(x), cos, sin).tensor()


def attention_scores(q: ComplexTensor, k: ComplexTensor) -> np.ndarray:
    """``Re(conj(Q) K^T)`` for ``[..., seq, d]`` operands."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"head widths differ: {q.shape} vs {k.shape}")
    return q.re @ np.swapaxes(k.re, -1, -2) + q.im @ np.swapaxes(k.im, -1, -2)


def _attention(q: CVar, k: CVar, v: CVar, causal: bool, scale_dim: int) -> CVar:
    """Concatenate planes, run real attention, split the result.

    Inputs are ``[..., seq, d_head]``.
    """
    d = q.shape[-1]
    qc = ag.concat_last(q.re, q.im)
    kc = ag.concat_last(k.re, k.im)
    vc = ag.concat_last(v.re, v.im)
    out = ag.attention(qc, kc, vc, causal, 1.0 / math.sqrt(scale_dim))
    return CVar(ag.slice_last(out, 0, d), ag.slice_last(out, d, 2 * d))


def attention_forward(
    q: ComplexTensor, k: ComplexTensor, v: ComplexTensor, causal: bool = True, scale_dim: int | None = None
) -> ComplexTensor:
    """Attention over ``[seq, heads, d_head]`` inputs via the concatenated real form."""
    if not (q.shape == k.shape == v.shape) or q.re.ndim != 3:
        raise DimensionError(f"Q/K/V must share a [seq, heads, d_head] shape: {q.shape}, {k.shape}, {v.shape}")
    scale_dim = scale_dim or 2 * q.shape[-1]
    with ag.no_grad():
        heads_first = [CVar.const(t).transpose((1, 0, 2)) for t in (q, k, v)]
        out = _attention(*heads_first, causal, scale_dim)
        return out.transpose((1, 0, 2)).tensor()


def lm_head_forward(h: ComplexTensor, w_out: np.ndarray) -> np.ndarray:
    if w_out.ndim != 2 or w_out.shape[1] != 2 * h.shape[-1]:
        raise DimensionError(f"LM head {w_out.shape} does not match hidden width {h.shape[-1]}")
    return np.concatenate([h.re, h.im], axis=-1) @ w_out.T


def _lm_head(h: CVar, w_out: Var) -> Var:
    return ag.matmul(ag.concat_last(h.re, h.im), ag.transpose(w_out, (1, 0)))


# --- projection strategies -------------------------------------------------


def _as_weight_var(w: Weight, params: dict | None, name: str, dtype) -> CVar:
    if params is not None and f"{name}.re" in params:
        return CVar(params[f"{name}.re"], params[f"{name}.im"])
    if isinstance(w, PackedQuantTensor):
        w = dequantize_weights(w, dtype=dtype)
    return CVar.const(w)


def _kernel_project(x: CVar, w: Weight, kernel: str, threads: int) -> CVar:
    packed = w if isinstance(w, PackedQuantTensor) else quantize_weights(w)
    a = quantize_activation(x.tensor())
    if kernel == "float":
        y = float_reference_gemm(a, packed)
    elif kernel == "multfree":
        y = multfree_gemm(a, packed, threads)
    elif kernel == "lut":
        y = lut_gemm(a, packed, threads)
    else:
        raise ConfigurationError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")
    dt = x.re.value.dtype
    return CVar.const(y.astype(dt))


class _Projector:
    """Applies one projection under the chosen arithmetic."""

    def __init__(self, model: Model, mode: str, params: dict | None, threads: int = 1):
        if mode not in MODES + KERNELS:
            raise ConfigurationError(f"unknown mode {mode!r}")
        self.model = model
        self.mode = mode
        self.params = params
        self.threads = threads

    def __call__(self, x: CVar, layer: int, proj: str) -> CVar:
        w = getattr(self.model.layers[layer], proj)
        if self.mode in KERNELS:
            return _kernel_project(x, w, self.mode, self.threads)
        wv = _as_weight_var(w, self.params, f"layers.{layer}.{proj}", self.model.dtype)
        if self.mode == "qat":
            return ag.qat_linear(x, wv)
        return ag.c_hermitian_matmul(x, wv)


# --- forward graph ---------------------------------------------------------


def _ffn(x: CVar, project, layer: int) -> CVar:
    gate = ag.c_relu2(project(x, layer, "wgate"))
    up = project(x, layer, "wup")
    return project(ag.c_mul(gate, up), layer, "wdown")


def _block(x: CVar, lw, project, layer: int, cfg: ModelConfig, cos, sin) -> CVar:
    b, s, _ = x.shape
    h = ag.c_rmsnorm(x, lw["attn_norm_re"], lw["attn_norm_im"], cfg.norm_eps)
    heads = (b, s, cfg.n_heads, cfg.d_head)
    q = ag.c_rotate(project(h, layer, "wq").reshape(heads), cos, sin).transpose((0, 2, 1, 3))
    k = ag.c_rotate(project(h, layer, "wk").reshape(heads), cos, sin).transpose((0, 2, 1, 3))
    v = project(h, layer, "wv").reshape(heads).transpose((0, 2, 1, 3))
    att = _attention(q, k, v, True, cfg.scale_dim).transpose((0, 2, 1, 3)).reshape((b, s, cfg.d_model))
    x = x + project(att, layer, "wo")
    h = ag.c_rmsnorm(x, lw["ffn_norm_re"], lw["ffn_norm_im"], cfg.norm_eps)
    return x + _ffn(h, project, layer)


def _check_ids(ids, vocab_size: int) -> np.ndarray:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise IndexError("token ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise IndexError(f"token id out of range [0, {vocab_size})")
    return ids


def parameter_vars(model: Model, requires_grad: bool = True) -> dict[str, Var]:
    return {name: Var(arr, requires_grad=requires_grad) for name, arr in model.named_parameters()}


def forward_graph(ids, model: Model, mode: str = "full_precision", params: dict | None = None, threads: int = 1) -> Var:
    """Logits ``[batch, seq, vocab]`` as a tape node.

    ``params`` maps parameter names to leaf ``Var`` nodes; when omitted the
    model's arrays enter as constants.
    """
    cfg = model.config
    ids = _check_ids(ids, cfg.vocab_size)
    if ids.ndim != 2:
        raise DimensionError("forward_graph expects [batch, seq] ids")
    if ids.shape[1] > cfg.max_seq:
        raise ConfigurationError(f"sequence length {ids.shape[1]} exceeds max_seq {cfg.max_seq}")
    if params is None:
        params = parameter_vars(model, requires_grad=False)
    project = _Projector(model, mode, params, threads)
    cos, sin = rope_tables(np.arange(ids.shape[1]), cfg.d_head, cfg.rope_base)
    x = CVar(ag.embedding(params["embed_re"], ids), ag.embedding(params["embed_im"], ids))
    for i in range(cfg.n_layers):
        lw = {g: params[f"layers.{i}.{g}"] for g in ("attn_norm_re", "attn_norm_im", "ffn_norm_re", "ffn_norm_im")}
        x = _block(x, lw, project, i, cfg, cos, sin)
    x = ag.c_rmsnorm(x, params["norm_re"], params["norm_im"], cfg.norm_eps)
    return _lm_head(x, params["w_out"])


def model_forward(ids, model: Model, mode: str = "full_precision") -> np.ndarray:
    """Logits for ``[seq]`` or ``[batch, seq]`` token ids.

    ``mode`` is ``full_precision`` or ``qat``; the kernel names ``float``,
    ``multfree`` and ``lut`` select the integer inference paths instead.
    """
    ids = np.asarray(ids)
    single = ids.ndim == 1
    with ag.no_grad():
        logits = forward_graph(ids[None] if single else ids, model, mode).value
    return logits[0] if single else logits


def infer_logits(ids, model: Model, kernel: str = "lut", threads: int = 1) -> np.ndarray:
    if kernel not in KERNELS:
        raise ConfigurationError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")
    ids = np.asarray(ids)
    single = ids.ndim == 1
    with ag.no_grad():
        logits = forward_graph(ids[None] if single else ids, model, kernel, threads=threads).value
    return logits[0] if single else logits


def ffn_forward(x: ComplexTensor, layer: LayerWeights, mode: str = "full_precision") -> ComplexTensor:
    """Gated FFN of one layer: ``down(relu2(gate(x)) * up(x))``."""
    shim = Model(ModelConfig(), np.zeros((1, 1)), np.zeros((1, 1)), [layer], np.ones(1), np.ones(1), np.zeros((1, 2)))
    project = _Projector(shim, mode, None)
    with ag.no_grad():
        return _ffn(CVar.const(x), project, 0).tensor()
