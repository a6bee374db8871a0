"""Single-file checkpoint container.

Layout (all integers little-endian)::

    magic       4 bytes  b"IFRY"
    version     u32
    config_len  u32, followed by config_len bytes of UTF-8 JSON
    n_tensors   u32
    directory   n_tensors entries:
                  u16 name_len, name (UTF-8), u8 kind, u8 ndim, u32 * ndim shape,
                  u64 offset (absolute), u64 length
    payload     tensor blobs in directory order

Kinds: 0 ``real_fp`` (float32), 1 ``complex_fp`` (float32 real plane then
float32 imaginary plane), 2 ``packed_q2`` (float32 dequant_re, float32
dequant_im, then the packed code bytes; shape is the logical ``(k, n)``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedVersionError
from .model import PROJECTIONS, LayerWeights, Model, ModelConfig
from .quantize import PackedQuantTensor, dequantize_weights, packed_row_bytes, quantize_weights
from .tensor import ComplexTensor

MAGIC = b"IFRY"
VERSION = 1
REAL_FP, COMPLEX_FP, PACKED_Q2 = 0, 1, 2
KIND_NAMES = {REAL_FP: "real_fp", COMPLEX_FP: "complex_fp", PACKED_Q2: "packed_q2"}
F32 = np.dtype("<f4")


@dataclass(frozen=True)
class DirEntry:
    name: str
    kind: int
    shape: tuple[int, ...]
    offset: int
    length: int

    @property
    def kind_name(self) -> str:
        return KIND_NAMES[self.kind]


def payload_size(kind: int, shape) -> int:
    count = int(np.prod(shape, dtype=np.int64))
    if kind == REAL_FP:
        return 4 * count
    if kind == COMPLEX_FP:
        return 8 * count
    if kind == PACKED_Q2:
        if len(shape) != 2:
            raise FormatError(f"packed_q2 tensors are 2-D, got shape {shape}")
        k, n = shape
        return 8 + n * packed_row_bytes(k)
    raise FormatError(f"unknown tensor kind {kind}")


def _encode(kind: int, value) -> bytes:
    if kind == REAL_FP:
        return np.ascontiguousarray(value, dtype=F32).tobytes()
    if kind == COMPLEX_FP:
        return np.ascontiguousarray(value.re, dtype=F32).tobytes() + np.ascontiguousarray(value.im, dtype=F32).tobytes()
    return struct.pack("<ff", value.dequant_re, value.dequant_im) + value.codes.tobytes()


def _decode(entry: DirEntry, blob: bytes):
    if entry.kind == REAL_FP:
        return np.frombuffer(blob, dtype=F32).reshape(entry.shape).astype(np.float32)
    if entry.kind == COMPLEX_FP:
        half = len(blob) // 2
        re = np.frombuffer(blob[:half], dtype=F32).reshape(entry.shape).astype(np.float32)
        im = np.frombuffer(blob[half:], dtype=F32).reshape(entry.shape).astype(np.float32)
        return ComplexTensor(re, im)
    dq_re, dq_im = struct.unpack("<ff", blob[:8])
    k, n = entry.shape
    try:
        return PackedQuantTensor(n, k, np.frombuffer(blob[8:], dtype=np.uint8).copy(), dq_re, dq_im)
    except FormatError as e:
        raise FormatError(f"tensor {entry.name!r}: {e}") from e


def model_tensors(model: Model, mode: str = "full") -> list[tuple[str, int, object]]:
    """``(name, kind, value)`` triples in file order."""
    if mode not in ("full", "quantized"):
        raise ValueError(f"mode must be 'full' or 'quantized', got {mode!r}")
    out = [("embed", COMPLEX_FP, ComplexTensor(model.embed_re, model.embed_im))]
    for i, layer in enumerate(model.layers):
        for p in PROJECTIONS:
            w = getattr(layer, p)
            if mode == "quantized":
                out.append((f"layers.{i}.{p}", PACKED_Q2, w if isinstance(w, PackedQuantTensor) else quantize_weights(w)))
            else:
                out.append((f"layers.{i}.{p}", COMPLEX_FP, dequantize_weights(w) if isinstance(w, PackedQuantTensor) else w))
        out.append((f"layers.{i}.attn_norm", COMPLEX_FP, ComplexTensor(layer.attn_norm_re, layer.attn_norm_im)))
        out.append((f"layers.{i}.ffn_norm", COMPLEX_FP, ComplexTensor(layer.ffn_norm_re, layer.ffn_norm_im)))
    out.append(("norm", COMPLEX_FP, ComplexTensor(model.norm_re, model.norm_im)))
    out.append(("w_out", REAL_FP, model.w_out))
    return out


def _shape_of(kind: int, value) -> tuple[int, ...]:
    if kind == PACKED_Q2:
        return value.shape
    return tuple(value.shape)


def serialize(model: Model, mode: str = "full") -> bytes:
    header = {"model": model.config.to_dict(), "meta": model.meta}
    config_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = model_tensors(model, mode)
    blobs = [_encode(kind, value) for _, kind, value in tensors]

    dir_size = 0
    for name, kind, value in tensors:
        dir_size += 2 + len(name.encode("utf-8")) + 2 + 4 * len(_shape_of(kind, value)) + 16
    offset = 4 + 4 + 4 + len(config_bytes) + 4 + dir_size

    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(config_bytes)), config_bytes]
    parts.append(struct.pack("<I", len(tensors)))
    for (name, kind, value), blob in zip(tensors, blobs):
        shape = _shape_of(kind, value)
        if len(blob) != payload_size(kind, shape):
            raise AssertionError(f"{name}: encoded {len(blob)} bytes, layout says {payload_size(kind, shape)}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", kind, len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
        parts.append(struct.pack("<QQ", offset, len(blob)))
        offset += len(blob)
    parts.extend(blobs)
    return b"".join(parts)


def save_checkpoint(model: Model, path, mode: str = "full") -> Path:
    """Write ``model``; ``mode='quantized'`` stores the seven projections per layer as packed codes."""
    path = Path(path)
    data = serialize(model, mode)
    try:
        path.write_bytes(data)
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what} at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse(data: bytes) -> tuple[dict, list[DirEntry]]:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version} (this reader handles {VERSION})")
    (config_len,) = r.unpack("<I", "config length")
    try:
        header = json.loads(r.take(config_len, "config record").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"config record is not valid JSON: {e}") from e
    (count,) = r.unpack("<I", "tensor count")
    entries = []
    for i in range(count):
        (name_len,) = r.unpack("<H", f"directory entry {i} name length")
        name = r.take(name_len, f"directory entry {i} name").decode("utf-8")
        kind, ndim = r.unpack("<BB", f"directory entry {name!r} kind")
        if kind not in KIND_NAMES:
            raise FormatError(f"tensor {name!r}: unknown kind {kind}")
        shape = r.unpack(f"<{ndim}I", f"directory entry {name!r} shape")
        offset, length = r.unpack("<QQ", f"directory entry {name!r} offset")
        if length != payload_size(kind, shape):
            raise FormatError(f"tensor {name!r}: length {length} does not match its shape {shape}")
        entries.append(DirEntry(name, kind, tuple(shape), offset, length))
    payload_start = r.pos
    prev_end = payload_start
    for e in sorted(entries, key=lambda e: e.offset):
        if e.offset < prev_end:
            raise FormatError(f"tensor {e.name!r}: offset {e.offset} overlaps preceding data")
        if e.offset + e.length > len(data):
            raise FormatError(f"truncated file: tensor {e.name!r} ends at {e.offset + e.length} > {len(data)}")
        prev_end = e.offset + e.length
    return header, entries


def read_directory(path) -> list[DirEntry]:
    return parse(Path(path).read_bytes())[1]


def deserialize(data: bytes, dequantize: bool = False) -> Model:
    header, entries = parse(data)
    try:
        config = ModelConfig.from_dict(header["model"])
    except (KeyError, TypeError) as e:
        raise FormatError(f"config record missing model configuration: {e}") from e
    tensors = {e.name: _decode(e, data[e.offset : e.offset + e.length]) for e in entries}

    def need(name):
        if name not in tensors:
            raise FormatError(f"missing tensor {name!r}")
        return tensors[name]

    layers = []
    for i in range(config.n_layers):
        projs = {p: need(f"layers.{i}.{p}") for p in PROJECTIONS}
        if dequantize:
            projs = {
                p: dequantize_weights(w, dtype=np.float32) if isinstance(w, PackedQuantTensor) else w
                for p, w in projs.items()
            }
        attn, ffn = need(f"layers.{i}.attn_norm"), need(f"layers.{i}.ffn_norm")
        layers.append(LayerWeights(**projs, attn_norm_re=attn.re, attn_norm_im=attn.im, ffn_norm_re=ffn.re, ffn_norm_im=ffn.im))
    embed, norm = need("embed"), need("norm")
    model = Model(config, embed.re, embed.im, layers, norm.re, norm.im, need("w_out"), dict(header.get("meta", {})))
    _check_shapes(model)
    return model


def _check_shapes(model: Model) -> None:
    c = model.config
    d, f, v = c.d_model, c.d_ffn, c.vocab_size
    expected = {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d), "wup": (d, f), "wgate": (d, f), "wdown": (f, d)}
    if model.embed_re.shape != (v, d):
        raise FormatError(f"embed has shape {model.embed_re.shape}, config implies {(v, d)}")
    if model.w_out.shape != (v, 2 * d):
        raise FormatError(f"w_out has shape {model.w_out.shape}, config implies {(v, 2 * d)}")
    for i, p, w in model.projections():
        if tuple(w.shape) != expected[p]:
            raise FormatError(f"layers.{i}.{p} has shape {tuple(w.shape)}, config implies {expected[p]}")


def load_checkpoint(path, dequantize: bool = False) -> Model:
    """Read a checkpoint. Packed projections stay ``PackedQuantTensor`` unless ``dequantize``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e}") from e
    try:
        return deserialize(data, dequantize)
    except FormatError as e:
        raise type(e)(f"{path}: {e}") from e
