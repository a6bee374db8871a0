"""Command-line entry point: train, quantize, infer, bench, analyze."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import analysis, kernel
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import Corpus, decode_bytes, encode_bytes, synthetic_text
from .errors import ConfigurationError, DimensionError, FormatError
from .model import KERNELS, Model, ModelConfig, infer_logits, model_forward
from .training import TrainConfig, loss_csv, train_loop

log = logging.getLogger("complexq2")


# --- config files -------------------------------------------------------------


def _coerce(raw: str, typ, key: str):
    typ = str(typ)
    try:
        if "int" in typ and "None" in typ and raw.lower() == "none":
            return None
        if typ.startswith("int"):
            return int(raw)
        if typ.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: cannot parse {raw!r} as {typ}") from None
    return raw


def parse_config_text(text: str) -> tuple[ModelConfig, TrainConfig]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    model_types = {f.name: f.type for f in fields(ModelConfig)}
    train_types = {f.name: f.type for f in fields(TrainConfig)}
    model_kw, train_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in model_types:
            model_kw[key] = _coerce(raw, model_types[key], key)
        elif key in train_types:
            train_kw[key] = _coerce(raw, train_types[key], key)
        else:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def format_config(model_config: ModelConfig, train_config: TrainConfig) -> str:
    lines = ["# model"]
    lines += [f"{k} = {v}" for k, v in model_config.to_dict().items()]
    lines.append("# training")
    lines += [f"{k} = {v}" for k, v in train_config.to_dict().items()]
    return "\n".join(lines) + "\n"


# --- decoding ------------------------------------------------------------------


def generate(model: Model, prompt_ids, n_tokens: int, kernel_name: str = "lut", threads: int = 1):
    """Greedy decoding. Returns ``(ids, per-step logits [n_tokens, vocab])``."""
    if kernel_name not in KERNELS:
        raise ConfigurationError(f"unknown kernel {kernel_name!r}; expected one of {KERNELS}")
    ids = [int(i) for i in prompt_ids]
    if not ids:
        raise ConfigurationError("prompt must contain at least one token")
    vocab = model.config.vocab_size
    bad = [i for i in ids if not 0 <= i < vocab]
    if bad:
        raise IndexError(f"prompt token {bad[0]} is outside the vocabulary of size {vocab}")
    use_fp = kernel_name == "float" and not model.is_packed
    dumps = []
    for _ in range(n_tokens):
        window = np.array(ids[-model.config.max_seq :])
        if use_fp:
            logits = model_forward(window, model, "full_precision")
        else:
            logits = infer_logits(window, model, kernel_name, threads)
        last = logits[-1]
        dumps.append(last)
        ids.append(int(np.argmax(last)))
    return ids, np.array(dumps).reshape(n_tokens, vocab)


# --- commands ------------------------------------------------------------------


def cmd_train(args) -> int:
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise ConfigurationError(f"config file not found: {cfg_path}")
        model_config, train_config = parse_config_text(cfg_path.read_text())
    else:
        model_config, train_config = ModelConfig(), TrainConfig()
    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
    if args.steps:
        overrides["total_steps"] = args.steps
        if train_config.warmup_steps == max(1, round(0.02 * train_config.total_steps)):
            overrides["warmup_steps"] = None
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        train_config = TrainConfig(**{**train_config.to_dict(), **overrides})

    if args.corpus:
        corpus = Corpus.from_file(args.corpus, train_config.seq_len)
    else:
        corpus = Corpus(synthetic_text(args.synthetic_bytes, seed=train_config.seed), train_config.seq_len)

    def progress(rec):
        if rec.step % max(1, train_config.total_steps // 20) == 0:
            log.info("step %d lr %.3g loss %.4f", rec.step, rec.lr, rec.loss)

    result = train_loop(corpus.tokens, model_config, train_config, progress=progress)
    out = save_checkpoint(result.model, args.out, mode=args.save_mode)
    loss_path = Path(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv")
    loss_path.write_text(loss_csv(result.trace))
    print(
        json.dumps(
            {
                "checkpoint": str(out),
                "loss_csv": str(loss_path),
                "mode": train_config.mode,
                "initial_eval_loss": result.initial_eval_loss,
                "final_eval_loss": result.final_eval_loss,
            }
        )
    )
    return 0


def cmd_quantize(args) -> int:
    model = load_checkpoint(args.checkpoint)
    out = save_checkpoint(model, args.out, mode="quantized")
    print(json.dumps({"checkpoint": str(out), "bytes": out.stat().st_size}))
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint).astype(np.float64)
    prompt = args.prompt.encode("utf-8")
    ids, logits = generate(model, encode_bytes(prompt), args.tokens, args.kernel, args.threads)
    if args.dump_logits:
        np.save(args.dump_logits, logits)
    sys.stdout.write(decode_bytes(ids) + "\n")
    return 0


def _parse_sizes(spec: str) -> list[tuple[int, int, int]]:
    sizes = []
    for part in spec.split(","):
        try:
            m, k, n = (int(v) for v in part.lower().split("x"))
        except ValueError:
            raise ConfigurationError(f"size {part!r} is not of the form MxKxN") from None
        sizes.append((m, k, n))
    return sizes


def cmd_bench(args) -> int:
    paths = tuple(args.paths.split(","))
    rows = kernel.bench(_parse_sizes(args.sizes), reps=args.reps, paths=paths, seed=args.seed or 0, threads=args.threads)
    text = kernel.bench_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    if args.json:
        Path(args.json).write_text(kernel.bench_json(rows))
    sys.stdout.write(text)
    return 0


def cmd_analyze(args) -> int:
    model = load_checkpoint(args.checkpoint)
    summary = analysis.summary(model)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "histograms.csv").write_text(analysis.to_csv(analysis.histogram_rows(model), analysis.HIST_COLUMNS))
        (out / "norms.csv").write_text(analysis.to_csv(analysis.norm_rows(model), analysis.NORM_COLUMNS))
        (out / "embeddings.csv").write_text(analysis.to_csv(analysis.embedding_rows(model), analysis.EMBED_COLUMNS))
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="complexq2", description=__doc__)
    parser.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
    parser.add_argument("--threads", type=int, default=1, help="kernel worker threads")
    parser.add_argument("--deterministic", action="store_true", help="single-threaded kernels and BLAS")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a byte corpus")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--corpus", help="path to a text/byte corpus")
    src.add_argument("--synthetic-bytes", type=int, help="generate a synthetic corpus of this many bytes")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--mode", choices=("qat", "full_precision"))
    p.add_argument("--steps", type=int, help="override total_steps")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--loss-csv", help="loss trace CSV path (default: <out>.loss.csv)")
    p.add_argument("--save-mode", choices=("full", "quantized"), default="full")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantize", help="pack a full-precision checkpoint to 2-bit projections")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("infer", help="greedy generation")
    p.add_argument("checkpoint")
    p.add_argument("--prompt", required=True)
    p.add_argument("--tokens", type=int, default=64)
    p.add_argument("--kernel", choices=KERNELS, default="lut")
    p.add_argument("--dump-logits", help="write per-step logits to this .npy path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="time the GEMM kernels")
    p.add_argument("--sizes", default="16x256x256,16x1024x1024", help="comma-separated MxKxN")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--paths", default=",".join(kernel.PATHS))
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--json", help="JSON output path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("analyze", help="codebook histograms, norms, embedding export")
    p.add_argument("checkpoint")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_analyze)
    return parser


def _limit_blas_threads():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(limits=1)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    if args.deterministic:
        args.threads = 1
        _limit_blas_threads()
    try:
        return args.func(args)
    except (ConfigurationError, FormatError, DimensionError, IndexError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
