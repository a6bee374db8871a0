"""Codebook utilization, layer-wise weight norms and embedding export.

CSV schemas (column names are fixed):

    histograms.csv   layer, matrix, count_p1, count_pi, count_m1, count_mi,
                     freq_p1, freq_pi, freq_m1, freq_mi, total, entropy_bits
    norms.csv        layer, matrix, l2_norm
    embeddings.csv   token, feature, re, im    (mean-centered over tokens)
"""

from __future__ import annotations

import csv
import io
import math

import numpy as np

from .errors import ConfigurationError
from .model import Model
from .quantize import PackedQuantTensor, dequantize_weights

HIST_COLUMNS = (
    "layer", "matrix", "count_p1", "count_pi", "count_m1", "count_mi",
    "freq_p1", "freq_pi", "freq_m1", "freq_mi", "total", "entropy_bits",
)
NORM_COLUMNS = ("layer", "matrix", "l2_norm")
EMBED_COLUMNS = ("token", "feature", "re", "im")


def code_counts(p: PackedQuantTensor) -> np.ndarray:
    return np.bincount(p.row_codes().reshape(-1), minlength=4)[:4]


def codebook_histogram(p: PackedQuantTensor) -> np.ndarray:
    """Frequencies of codes 0..3 (+1, +i, -1, -i)."""
    counts = code_counts(p)
    return counts / counts.sum()


def entropy_bits(freqs) -> float:
    return float(-sum(f * math.log2(f) for f in freqs if f > 0))


def dequantized_l2_norm(p: PackedQuantTensor) -> float:
    w = dequantize_weights(p)
    return float(np.sqrt(np.sum(w.re * w.re + w.im * w.im)))


def _require_packed(model: Model) -> None:
    if not model.is_packed:
        raise ConfigurationError(
            "checkpoint holds full-precision projections; codebook histograms need a quantized "
            "checkpoint (run the quantize command first)"
        )


def histogram_rows(model: Model) -> list[dict]:
    _require_packed(model)
    rows = []
    for i, name, w in model.projections():
        if not isinstance(w, PackedQuantTensor):
            continue
        counts = code_counts(w)
        total = int(counts.sum())
        freqs = counts / total
        row = {"layer": i, "matrix": name, "total": total, "entropy_bits": entropy_bits(freqs)}
        for suffix, c, f in zip(("p1", "pi", "m1", "mi"), counts, freqs):
            row[f"count_{suffix}"] = int(c)
            row[f"freq_{suffix}"] = float(f)
        rows.append(row)
    return rows


def norm_rows(model: Model) -> list[dict]:
    _require_packed(model)
    return [
        {"layer": i, "matrix": name, "l2_norm": dequantized_l2_norm(w)}
        for i, name, w in model.projections()
        if isinstance(w, PackedQuantTensor)
    ]


def centered_embeddings(model: Model) -> tuple[np.ndarray, np.ndarray]:
    re = model.embed_re.astype(np.float64)
    im = model.embed_im.astype(np.float64)
    return re - re.mean(axis=0), im - im.mean(axis=0)


def embedding_rows(model: Model):
    re, im = centered_embeddings(model)
    for t in range(re.shape[0]):
        for j in range(re.shape[1]):
            yield {"token": t, "feature": j, "re": float(re[t, j]), "im": float(im[t, j])}


def to_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def summary(model: Model) -> dict:
    """Aggregate statistics suitable for JSON output."""
    hist = histogram_rows(model)
    counts = np.zeros(4, dtype=np.int64)
    for r in hist:
        counts += [r["count_p1"], r["count_pi"], r["count_m1"], r["count_mi"]]
    freqs = counts / counts.sum()
    return {
        "matrices": len(hist),
        "overall_counts": counts.tolist(),
        "overall_freqs": freqs.tolist(),
        "overall_entropy_bits": entropy_bits(freqs),
        "max_deviation_from_uniform": float(np.max(np.abs(freqs - 0.25))),
        "all_codewords_used": bool(all(min(r["count_p1"], r["count_pi"], r["count_m1"], r["count_mi"]) > 0 for r in hist)),
        "norms": norm_rows(model),
    }
