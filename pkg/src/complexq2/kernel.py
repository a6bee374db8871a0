"""Integer inference kernels for 2-bit phase-quantized weights.

Each output element keeps four int32 accumulators, split by which codeword
class produced the term and which lane it lands in:

    rr  real-codeword terms landing in the real lane      (sums of +-x_re)
    ri  real-codeword terms landing in the imaginary lane (sums of -+x_im)
    ir  imag-codeword terms landing in the real lane      (sums of +-x_im)
    ii  imag-codeword terms landing in the imaginary lane (sums of +-x_re)

Each accumulator mixes exactly one activation scale and one weight scale, so
the float rescaling happens once per output, after all the integer work.
"""

from __future__ import annotations

import ast
import csv
import inspect
import io
import json
import textwrap
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .quantize import (
    PackedQuantTensor,
    QuantActivation,
    dequantize_activation,
    dequantize_weights,
    packed_row_bytes,
    quantize_activation,
    quantize_weights,
)
from .tensor import ComplexTensor, hermitian_matmul

MAX_INNER_DIM = 1 << 15
N_ACC = 4
RR, RI, IR, II = range(N_ACC)

BENCH_COLUMNS = ("path", "m", "k", "n", "reps", "ns_per_call", "weight_bytes")
PATHS = ("float_ref", "multfree", "lut")


def multfree_term(x_re: int, x_im: int, code: int) -> tuple[int, int]:
    """``conj(x) * i**code`` using only negation and component swaps."""
    if code == 0:
        return x_re, -x_im
    if code == 1:
        return x_im, x_re
    if code == 2:
        return -x_re, x_im
    if code == 3:
        return -x_im, -x_re
    raise ValueError(f"invalid code {code}")


def _split_term(x_re, x_im, code):
    """The four-accumulator contribution of one activation/weight pair."""
    zero = x_re - x_re
    if code == 0:
        return x_re, -x_im, zero, zero
    if code == 1:
        return zero, zero, x_im, x_re
    if code == 2:
        return -x_re, x_im, zero, zero
    return zero, zero, -x_im, -x_re


def _accumulate_multfree(q_re: np.ndarray, q_im: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Integer core of the multiplication-free GEMM.

    ``q_re``/``q_im`` are int32 ``m x k``; ``codes`` is ``k x n``. Only adds,
    negations and selections run in the loop.
    """
    m, k = q_re.shape
    n = codes.shape[1]
    acc = np.zeros((N_ACC, m, n), dtype=np.int32)
    zero = np.zeros((), dtype=np.int32)
    for j in range(k):
        xr = q_re[:, j : j + 1]
        xi = q_im[:, j : j + 1]
        c = codes[j]
        real_pos = c == 0
        real_neg = c == 2
        imag_pos = c == 1
        imag_neg = c == 3
        acc[RR] += np.where(real_pos, xr, np.where(real_neg, -xr, zero))
        acc[RI] += np.where(real_pos, -xi, np.where(real_neg, xi, zero))
        acc[IR] += np.where(imag_pos, xi, np.where(imag_neg, -xi, zero))
        acc[II] += np.where(imag_pos, xr, np.where(imag_neg, -xr, zero))
    return acc


def _check_operands(a: QuantActivation, w: PackedQuantTensor) -> None:
    k = a.shape[-1]
    if w.cols != k:
        raise DimensionError(f"activation width {k} does not match weight input size {w.cols}")
    if k > MAX_INNER_DIM:
        raise ConfigurationError(f"inner dimension {k} exceeds int32 accumulator bound {MAX_INNER_DIM}")


def _flatten(a: QuantActivation):
    k = a.shape[-1]
    q_re = a.q_re.reshape(-1, k).astype(np.int32)
    q_im = a.q_im.reshape(-1, k).astype(np.int32)
    return q_re, q_im, a.scale_re.reshape(-1), a.scale_im.reshape(-1)


def scale_accumulators(acc, scale_re, scale_im, dequant_re: float, dequant_im: float) -> ComplexTensor:
    """Apply activation and weight scales to the four accumulators (float epilogue)."""
    acc = acc.astype(np.float64)
    sr = scale_re[:, None]
    si = scale_im[:, None]
    out_re = acc[RR] * (dequant_re / sr) + acc[IR] * (dequant_im / si)
    out_im = acc[RI] * (dequant_re / si) + acc[II] * (dequant_im / sr)
    return ComplexTensor(out_re, out_im)


def _row_chunks(m: int, threads: int, max_rows: int | None = None) -> list[slice]:
    n_chunks = max(1, min(m, threads))
    if max_rows:
        n_chunks = max(n_chunks, -(-m // max_rows))
    bounds = np.linspace(0, m, n_chunks + 1).astype(int)
    return [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def _run_rows(fn, m: int, n: int, threads: int, max_rows: int | None = None) -> np.ndarray:
    acc = np.zeros((N_ACC, m, n), dtype=np.int32)
    chunks = _row_chunks(m, threads, max_rows)
    if threads <= 1 or len(chunks) == 1:
        for sl in chunks:
            acc[:, sl] = fn(sl)
        return acc
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for sl, part in zip(chunks, pool.map(fn, chunks)):
            acc[:, sl] = part
    return acc


def multfree_accumulators(a: QuantActivation, w: PackedQuantTensor, threads: int = 1) -> np.ndarray:
    """Integer accumulators ``[4, m, n]`` (rows of ``a`` flattened)."""
    _check_operands(a, w)
    q_re, q_im, _, _ = _flatten(a)
    codes = w.weight_codes()
    return _run_rows(lambda sl: _accumulate_multfree(q_re[sl], q_im[sl], codes), q_re.shape[0], w.rows, threads)


def _finish(acc, a: QuantActivation, w: PackedQuantTensor) -> ComplexTensor:
    _, _, s_re, s_im = _flatten(a)
    out = scale_accumulators(acc, s_re, s_im, w.dequant_re, w.dequant_im)
    return out.reshape(*a.shape[:-1], w.rows)


def multfree_gemm(a: QuantActivation, w: PackedQuantTensor, threads: int = 1) -> ComplexTensor:
    """``conj(A) @ W`` for INT8 activations and packed 2-bit weights, without multiplies."""
    return _finish(multfree_accumulators(a, w, threads), a, w)


# --- lookup tables --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Lut256:
    """Partial sums for every byte of four packed codes against four activations.

    ``entries`` is ``256 x 4`` int32 in (rr, ri, ir, ii) accumulator order.
    """

    entries: np.ndarray

    def pairs(self) -> np.ndarray:
        """Combined ``(re, im)`` per byte: the plain 4-term sum of ``conj(x) * w``."""
        e = self.entries
        return np.stack([e[:, RR] + e[:, IR], e[:, RI] + e[:, II]], axis=-1)


def _term_table(x_re: np.ndarray, x_im: np.ndarray) -> np.ndarray:
    """``[..., 4 codes, 4 accumulators]`` contributions of one activation position."""
    return np.stack([np.stack(_split_term(x_re, x_im, c), axis=-1) for c in range(4)], axis=-2)


def _build_tables(q_re: np.ndarray, q_im: np.ndarray) -> np.ndarray:
    """Doubling construction over groups: ``q_*`` is ``[..., 4]`` -> ``[..., 256, 4]``.

    Position ``j`` of the group occupies bits ``2j..2j+1`` of the index, so
    stage ``j`` appends four shifted copies of the table built so far.
    """
    lead = q_re.shape[:-1]
    table = np.zeros(lead + (1, N_ACC), dtype=np.int32)
    for j in range(4):
        terms = _term_table(q_re[..., j], q_im[..., j])
        table = np.concatenate([table + terms[..., c : c + 1, :] for c in range(4)], axis=-2)
    return table


def build_lut(x_re, x_im) -> Lut256:
    x_re = np.asarray(x_re, dtype=np.int32)
    x_im = np.asarray(x_im, dtype=np.int32)
    if x_re.shape != (4,) or x_im.shape != (4,):
        raise DimensionError("a LUT is built from exactly four complex activations")
    return Lut256(_build_tables(x_re, x_im))


def _pad_groups(q: np.ndarray) -> np.ndarray:
    k = q.shape[-1]
    k4 = packed_row_bytes(k) * 4
    if k4 == k:
        return q
    out = np.zeros(q.shape[:-1] + (k4,), dtype=q.dtype)
    out[..., :k] = q
    return out


def _accumulate_lut(q_re: np.ndarray, q_im: np.ndarray, wbytes: np.ndarray) -> np.ndarray:
    m = q_re.shape[0]
    n, groups = wbytes.shape
    luts = _build_tables(q_re.reshape(m, groups, 4), q_im.reshape(m, groups, 4))
    picked = luts[:, np.arange(groups)[None, :], wbytes]  # [m, n, groups, 4]
    acc = picked.sum(axis=2, dtype=np.int32)
    return np.moveaxis(acc, -1, 0)


def lut_accumulators(a: QuantActivation, w: PackedQuantTensor, threads: int = 1) -> np.ndarray:
    _check_operands(a, w)
    q_re, q_im, _, _ = _flatten(a)
    q_re, q_im = _pad_groups(q_re), _pad_groups(q_im)
    wbytes = w.packed_bytes()
    # bound the gather buffer [rows, n, groups, 4] to roughly 64 MiB
    per_row = max(1, wbytes.size * N_ACC * 4)
    max_rows = max(1, (64 << 20) // per_row)
    return _run_rows(
        lambda sl: _accumulate_lut(q_re[sl], q_im[sl], wbytes), q_re.shape[0], w.rows, threads, max_rows
    )


def lut_gemm(a: QuantActivation, w: PackedQuantTensor, threads: int = 1) -> ComplexTensor:
    """Same result as ``multfree_gemm``, with four-weight groups served from 256-entry tables."""
    return _finish(lut_accumulators(a, w, threads), a, w)


def float_reference_gemm(a: QuantActivation, w: PackedQuantTensor) -> ComplexTensor:
    return hermitian_matmul(dequantize_activation(a), dequantize_weights(w))


# --- audit and benchmark --------------------------------------------------


def count_multiplications(fn) -> int:
    """Count multiply-like operations in a function's source.

    Covers the ``*``, ``@`` and ``**`` operators plus calls to numpy's
    multiply/dot/matmul/einsum/prod.
    """
    tree = ast.parse(textwrap.dedent(inspect.getsource(fn)))
    banned_calls = {"multiply", "dot", "matmul", "einsum", "prod", "inner", "outer", "tensordot"}
    count = 0
    for node in ast.walk(tree):
        if isinstance(node, (ast.BinOp, ast.AugAssign)) and isinstance(node.op, (ast.Mult, ast.MatMult, ast.Pow)):
            count += 1
        elif isinstance(node, ast.Call):
            f = node.func
            name = f.attr if isinstance(f, ast.Attribute) else getattr(f, "id", "")
            count += name in banned_calls
    return count


INNER_LOOPS = {
    "multfree": (_accumulate_multfree, _split_term, multfree_term),
    "lut": (_accumulate_lut, _build_tables, _term_table, _split_term),
}


def inner_loop_multiplications(path: str) -> int | None:
    fns = INNER_LOOPS.get(path)
    if fns is None:
        return None
    return sum(count_multiplications(f) for f in fns)


def addition_estimate(path: str, m: int, k: int, n: int) -> int:
    """Rough count of integer additions per call (float_ref counts multiply-adds)."""
    groups = packed_row_bytes(k)
    if path == "multfree":
        return 2 * m * k * n
    if path == "lut":
        build = m * groups * (4 + 16 + 64 + 256) * 2
        return build + 2 * m * n * groups
    return 4 * m * k * n


def weight_bytes(k: int, n: int) -> int:
    return n * packed_row_bytes(k)


def bench(sizes, reps: int = 3, paths=PATHS, seed: int = 0, threads: int = 1) -> list[dict]:
    """Time each kernel path on random operands, one row per (path, size)."""
    if reps < 1:
        raise ConfigurationError("reps must be positive")
    rows = []
    rng = np.random.default_rng(seed)
    for m, k, n in sizes:
        if min(m, k, n) <= 0:
            raise ConfigurationError(f"sizes must be positive, got {(m, k, n)}")
        x = ComplexTensor(rng.standard_normal((m, k)), rng.standard_normal((m, k)))
        w = ComplexTensor(rng.standard_normal((k, n)), rng.standard_normal((k, n)))
        a = quantize_activation(x)
        p = quantize_weights(w)
        expected_bytes = weight_bytes(k, n)
        if p.nbytes != expected_bytes:
            raise AssertionError(f"packed size {p.nbytes} != {expected_bytes}")
        run = {
            "float_ref": lambda: float_reference_gemm(a, p),
            "multfree": lambda: multfree_gemm(a, p, threads),
            "lut": lambda: lut_gemm(a, p, threads),
        }
        for path in paths:
            if path not in run:
                raise ConfigurationError(f"unknown path {path!r}")
            fn = run[path]
            fn()
            t0 = time.perf_counter_ns()
            for _ in range(reps):
                fn()
            elapsed = time.perf_counter_ns() - t0
            rows.append(
                {
                    "path": path,
                    "m": m,
                    "k": k,
                    "n": n,
                    "reps": reps,
                    "ns_per_call": elapsed // reps,
                    "weight_bytes": expected_bytes,
                    "scale_bytes": 8,
                    "additions": addition_estimate(path, m, k, n),
                    "inner_loop_multiplications": inner_loop_multiplications(path),
                }
            )
    return rows


def bench_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def bench_json(rows: list[dict]) -> str:
    return json.dumps(rows, indent=2)
