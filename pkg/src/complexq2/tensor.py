"""Split-plane complex tensors and the complex primitives built on them.

Every complex quantity is stored as two real arrays of identical shape, one for
the real plane and one for the imaginary plane. Feature axes trail, batch and
sequence axes lead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

DEFAULT_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class ComplexTensor:
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        re = np.asarray(self.re)
        im = np.asarray(self.im)
        if re.shape != im.shape:
            raise DimensionError(f"real plane {re.shape} and imaginary plane {im.shape} differ")
        object.__setattr__(self, "re", re)
        object.__setattr__(self, "im", im)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.re.shape

    @property
    def dtype(self):
        return self.re.dtype

    @classmethod
    def from_complex(cls, z, dtype=np.float64) -> "ComplexTensor":
        z = np.asarray(z)
        return cls(np.ascontiguousarray(z.real, dtype=dtype), np.ascontiguousarray(z.imag, dtype=dtype))

    @classmethod
    def zeros(cls, shape, dtype=np.float64) -> "ComplexTensor":
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def conj(self) -> "ComplexTensor":
        return ComplexTensor(self.re, -self.im)

    def astype(self, dtype) -> "ComplexTensor":
        return ComplexTensor(self.re.astype(dtype), self.im.astype(dtype))

    def reshape(self, *shape) -> "ComplexTensor":
        return ComplexTensor(self.re.reshape(*shape), self.im.reshape(*shape))

    def __getitem__(self, idx) -> "ComplexTensor":
        return ComplexTensor(self.re[idx], self.im[idx])

    def __repr__(self) -> str:
        return f"ComplexTensor(shape={self.shape}, dtype={self.dtype})"


def hermitian_matmul(x: ComplexTensor, w: ComplexTensor) -> ComplexTensor:
    """Compute ``conj(x) @ w`` from four real matmuls.

    ``x`` may carry any number of leading axes; ``w`` must be 2-D.
    """
    if w.re.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"cannot contract {x.shape} with {w.shape}")
    y_re = x.re @ w.re + x.im @ w.im
    y_im = x.re @ w.im - x.im @ w.re
    return ComplexTensor(y_re, y_im)


def complex_elementwise_mul(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    if a.shape != b.shape:
        raise DimensionError(f"elementwise product of {a.shape} and {b.shape}")
    return ComplexTensor(a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re)


def relu2(z: ComplexTensor) -> ComplexTensor:
    """Squared ReLU applied to each plane independently."""
    r = np.maximum(z.re, 0)
    i = np.maximum(z.im, 0)
    return ComplexTensor(r * r, i * i)


def rms_normalize(x: np.ndarray, gain: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    denom = np.sqrt(ms + eps)
    # eps == 0 on an all-zero row would divide by zero; such rows stay zero
    out = np.divide(x, denom, out=np.zeros_like(x), where=denom > 0)
    return out * gain


def rmsnorm_componentwise(x: ComplexTensor, gain_re, gain_im, eps: float = DEFAULT_EPS) -> ComplexTensor:
    """RMS-normalize the real and imaginary planes separately over the last axis."""
    gain_re = np.asarray(gain_re)
    gain_im = np.asarray(gain_im)
    d = x.shape[-1]
    if gain_re.shape not in ((d,), ()) or gain_im.shape not in ((d,), ()):
        raise DimensionError(f"gains {gain_re.shape}/{gain_im.shape} do not match feature size {d}")
    return ComplexTensor(rms_normalize(x.re, gain_re, eps), rms_normalize(x.im, gain_im, eps))
