import numpy as np
import pytest

from complexq2.model import ModelConfig, init_model

ACCEPTANCE_RESULTS: dict[str, str] = {}


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=16, d_model=8, n_heads=2, d_head=4, d_ffn=16, n_layers=2, max_seq=16)


@pytest.fixture
def tiny_model(tiny_config):
    return init_model(tiny_config, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    criterion = dict(report.user_properties).get("criterion")
    if criterion is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        ACCEPTANCE_RESULTS[criterion] = report.outcome.upper()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[0])):
        verdict = "PASS" if ACCEPTANCE_RESULTS[name] == "PASSED" else "FAIL"
        terminalreporter.write_line(f"{verdict}  criterion {name}")


TOY_CONFIG = """\
# small model for command-line tests
d_model = 32
n_heads = 2
d_head = 16
d_ffn = 64
n_layers = 2
max_seq = 96
seq_len = 48
batch_size = 4
"""


@pytest.fixture(scope="session")
def toy_checkpoints(tmp_path_factory):
    """A briefly trained full checkpoint and its quantized copy, built through the CLI."""
    from complexq2.cli import main

    root = tmp_path_factory.mktemp("toy")
    cfg = root / "toy.cfg"
    cfg.write_text(TOY_CONFIG)
    full, packed = root / "toy.ifry", root / "toy.q2.ifry"
    args = ["--seed", "0", "--deterministic", "train", "--synthetic-bytes", "20000", "--config", str(cfg)]
    assert main(args + ["--steps", "60", "--out", str(full)]) == 0
    assert main(["quantize", str(full), "--out", str(packed)]) == 0
    return {"config": cfg, "full": full, "quantized": packed, "loss_csv": full.with_suffix(".loss.csv")}
