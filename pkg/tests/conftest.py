import numpy as np
import pytest

from fishermerge.model import Checkpoint, Example, ModelConfig, init_checkpoint


def tiny_config(L=1, H=1, d_head=4, D=2, vocab=11, seq=5, tasks=None):
    tasks = tasks or {"a": 3, "b": 2}
    return ModelConfig(L, H, H * d_head, d_head, D, vocab, seq, dict(tasks))


def random_checkpoint(cfg, seed=0, jitter=0.3, task=None):
    """Random model with biases, gains and heads all moved off their init values."""
    rng = np.random.default_rng(seed)
    ckpt = init_checkpoint(cfg, rng)
    for name in ckpt.params:
        ckpt.params[name] = ckpt.params[name] + rng.normal(0.0, jitter, ckpt.params[name].shape)
    ckpt.task = task
    return ckpt


def random_example(cfg, rng, task="a", length=None):
    length = length or cfg.max_seq_len
    return Example(tuple(int(t) for t in rng.integers(0, cfg.vocab_size, length)), int(rng.integers(cfg.n_classes[task])), task)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_log():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def log(cid, title, ok, detail=""):
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {cid}: {title}" + (f" -- {detail}" if detail else ""))
        assert ok, f"criterion {cid} failed: {detail}"

    return log


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
