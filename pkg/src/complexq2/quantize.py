"""Phase quantization of complex weights onto {+1, +i, -1, -i} and INT8 activations.

Codes follow ``value = i**code``: 0 -> +1, 1 -> +i, 2 -> -1, 3 -> -i.

Packed weights are stored output-major: a ``k x n`` projection (``k`` inputs,
``n`` outputs) becomes a ``PackedQuantTensor`` with ``rows = n`` and
``cols = k``, so each packed byte covers four consecutive input positions of a
single output column. That byte is the index the LUT kernel looks up directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError
from .tensor import ComplexTensor

CODE_PLUS_ONE = 0
CODE_PLUS_I = 1
CODE_MINUS_ONE = 2
CODE_MINUS_I = 3

# value of each codeword as (re, im)
CODEBOOK = np.array([[1, 0], [0, 1], [-1, 0], [0, -1]], dtype=np.int8)

SCALE_CLASS_FLOOR = 1e-8
ACT_MAX_FLOOR = 1e-5
INT8_MIN, INT8_MAX = -128, 127

_PI = np.pi
# floor(2*theta/pi + 1/2) changes value at these angles
_SECTOR_EDGES = np.array([-3 * _PI / 4, -_PI / 4, _PI / 4, 3 * _PI / 4])


def phase_codes(re, im) -> np.ndarray:
    """Vectorized phase projection. Returns uint8 codes with the shape of ``re``."""
    re = np.asarray(re, dtype=np.float64)
    im = np.asarray(im, dtype=np.float64)
    if re.shape != im.shape:
        raise DimensionError(f"planes {re.shape} and {im.shape} differ")
    # +0.0 folds -0.0 so Arg stays in (-pi, pi]
    theta = np.arctan2(im + 0.0, re + 0.0)
    exponent = np.searchsorted(_SECTOR_EDGES, theta, side="right") - 2
    codes = np.mod(exponent, 4).astype(np.uint8)
    codes[(re == 0) & (im == 0)] = CODE_PLUS_ONE
    return codes


def phase_project(w: complex) -> int:
    """Code of the fourth root of unity nearest to ``w`` in phase."""
    w = complex(w)
    return int(phase_codes(np.array([w.real]), np.array([w.imag]))[0])


def compute_scales(w: ComplexTensor, codes: np.ndarray | None = None) -> tuple[float, float]:
    """Return ``(gamma_re, gamma_im)`` for a whole weight matrix.

    Each gamma is the reciprocal mean magnitude of its component, taken only
    over the entries projected onto that component's codewords. Empty or
    vanishing classes fall back to 1.
    """
    if w.re.size == 0:
        raise DimensionError("cannot compute scales of an empty tensor")
    if codes is None:
        codes = phase_codes(w.re, w.im)
    real_class = (codes & 1) == 0
    gammas = []
    for plane, mask in ((w.re, real_class), (w.im, ~real_class)):
        if not mask.any():
            gammas.append(1.0)
            continue
        mean = float(np.mean(np.abs(plane[mask]), dtype=np.float64))
        gammas.append(1.0 / mean if mean >= SCALE_CLASS_FLOOR else 1.0)
    return gammas[0], gammas[1]


def pack_codes(codes: np.ndarray) -> np.ndarray:
    """Pack a ``rows x cols`` code matrix four codes per byte, lowest bits first."""
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.ndim != 2:
        raise DimensionError(f"expected a 2-D code matrix, got shape {codes.shape}")
    if codes.size and codes.max() > 3:
        raise ValueError("codes must lie in {0, 1, 2, 3}")
    rows, cols = codes.shape
    padded = np.zeros((rows, packed_row_bytes(cols) * 4), dtype=np.uint8)
    padded[:, :cols] = codes
    quads = padded.reshape(rows, -1, 4)
    packed = quads[..., 0] | (quads[..., 1] << 2) | (quads[..., 2] << 4) | (quads[..., 3] << 6)
    return packed.reshape(-1).astype(np.uint8)


def unpack_codes(packed: np.ndarray, rows: int, cols: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    per_row = packed_row_bytes(cols)
    if packed.size != rows * per_row:
        raise FormatError(f"expected {rows * per_row} code bytes for {rows}x{cols}, got {packed.size}")
    b = packed.reshape(rows, per_row)
    quads = np.stack([(b >> s) & 3 for s in (0, 2, 4, 6)], axis=-1)
    return quads.reshape(rows, per_row * 4)[:, :cols].astype(np.uint8)


def packed_row_bytes(cols: int) -> int:
    return (cols + 3) // 4


@dataclass(frozen=True, eq=False)
class PackedQuantTensor:
    """2-bit code matrix plus the two per-tensor dequantization scales.

    ``rows`` indexes output features and ``cols`` input features (see module
    docstring). ``dequant_re`` and ``dequant_im`` are ``1/gamma_re`` and
    ``1/gamma_im`` rounded to float32 so they survive checkpointing unchanged.
    """

    rows: int
    cols: int
    codes: np.ndarray
    dequant_re: float
    dequant_im: float

    def __post_init__(self):
        codes = np.ascontiguousarray(self.codes, dtype=np.uint8).reshape(-1)
        object.__setattr__(self, "codes", codes)
        if self.rows < 0 or self.cols < 0:
            raise FormatError(f"negative dimensions {self.rows}x{self.cols}")
        expected = self.rows * packed_row_bytes(self.cols)
        if codes.size != expected:
            raise FormatError(f"code buffer holds {codes.size} bytes, layout needs {expected}")
        if not (self.dequant_re > 0 and self.dequant_im > 0):
            raise FormatError("dequantization scales must be positive")
        if self.cols % 4:
            pad_shift = 2 * (self.cols % 4)
            tail = codes.reshape(self.rows, -1)[:, -1] if self.rows else codes[:0]
            if np.any(tail >> pad_shift):
                raise FormatError("padding codes in trailing byte must be zero")

    @property
    def shape(self) -> tuple[int, int]:
        """Logical weight shape ``(k, n)``."""
        return self.cols, self.rows

    @property
    def nbytes(self) -> int:
        return int(self.codes.size)

    def row_codes(self) -> np.ndarray:
        """Codes as ``rows x cols`` (output-major)."""
        return unpack_codes(self.codes, self.rows, self.cols)

    def weight_codes(self) -> np.ndarray:
        """Codes laid out like the logical ``k x n`` weight."""
        return self.row_codes().T

    def packed_bytes(self) -> np.ndarray:
        """Byte matrix ``rows x ceil(cols/4)``."""
        return self.codes.reshape(self.rows, packed_row_bytes(self.cols))

    def __eq__(self, other):
        if not isinstance(other, PackedQuantTensor):
            return NotImplemented
        return (
            self.rows == other.rows
            and self.cols == other.cols
            and np.array_equal(self.codes, other.codes)
            and self.dequant_re == other.dequant_re
            and self.dequant_im == other.dequant_im
        )


def _f32(x: float) -> float:
    return float(np.float32(x))


def quantize_weights(w: ComplexTensor) -> PackedQuantTensor:
    if w.re.ndim != 2:
        raise DimensionError(f"weight must be 2-D, got {w.shape}")
    k, n = w.shape
    codes = phase_codes(w.re, w.im)
    gamma_re, gamma_im = compute_scales(w, codes)
    return PackedQuantTensor(
        rows=n,
        cols=k,
        codes=pack_codes(codes.T),
        dequant_re=_f32(1.0 / gamma_re),
        dequant_im=_f32(1.0 / gamma_im),
    )


def dequantize_codes(codes: np.ndarray, dequant_re: float, dequant_im: float, dtype=np.float64) -> ComplexTensor:
    codes = np.asarray(codes)
    re = CODEBOOK[codes, 0].astype(dtype) * np.asarray(dequant_re, dtype=dtype)
    im = CODEBOOK[codes, 1].astype(dtype) * np.asarray(dequant_im, dtype=dtype)
    return ComplexTensor(re, im)


def dequantize_weights(p: PackedQuantTensor, dtype=np.float64) -> ComplexTensor:
    """Expand packed codes to a ``k x n`` complex tensor in {+-dequant_re, +-i dequant_im}."""
    return dequantize_codes(p.weight_codes(), p.dequant_re, p.dequant_im, dtype)


def quantize_dequantize_weights(w: ComplexTensor) -> ComplexTensor:
    return dequantize_weights(quantize_weights(w), dtype=w.dtype)


@dataclass(frozen=True, eq=False)
class QuantActivation:
    """Per-token INT8 planes with one scale per token and component."""

    q_re: np.ndarray
    q_im: np.ndarray
    scale_re: np.ndarray
    scale_im: np.ndarray

    def __post_init__(self):
        if self.q_re.shape != self.q_im.shape:
            raise DimensionError("integer planes differ in shape")
        if self.scale_re.shape != self.q_re.shape[:-1] or self.scale_im.shape != self.q_re.shape[:-1]:
            raise DimensionError("scales must have one entry per token")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.q_re.shape


def round_half_away(v: np.ndarray) -> np.ndarray:
    t = np.trunc(v)
    frac = v - t
    return t + np.sign(v) * (np.abs(frac) >= 0.5)


def _quantize_plane(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    peak = np.max(np.abs(x), axis=-1) if x.shape[-1] else np.zeros(x.shape[:-1])
    scale = INT8_MAX / np.maximum(peak, ACT_MAX_FLOOR)
    v = np.clip(x * scale[..., None], INT8_MIN, INT8_MAX)
    return round_half_away(v).astype(np.int8), scale


def quantize_activation(x: ComplexTensor) -> QuantActivation:
    q_re, s_re = _quantize_plane(x.re)
    q_im, s_im = _quantize_plane(x.im)
    return QuantActivation(q_re, q_im, s_re, s_im)


def dequantize_activation(a: QuantActivation, dtype=np.float64) -> ComplexTensor:
    re = a.q_re.astype(np.float64) / a.scale_re[..., None]
    im = a.q_im.astype(np.float64) / a.scale_im[..., None]
    return ComplexTensor(re.astype(dtype, copy=False), im.astype(dtype, copy=False))


def quantize_dequantize_activation(x: ComplexTensor) -> ComplexTensor:
    return dequantize_activation(quantize_activation(x), dtype=x.dtype)


def codebook_entropy_bits(n_symbols: int = 4) -> float:
    """Entropy of a uniform distribution over the codebook, in bits."""
    return math.log2(n_symbols)
