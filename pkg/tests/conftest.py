import json

import numpy as np
import pytest

from gloie.synth import SynthConfig, generate_synthetic


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    return path


def skewness(x):
    x = np.asarray(x, dtype=float).ravel()
    d = x - x.mean()
    return float(np.mean(d ** 3) / np.mean(d ** 2) ** 1.5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A few hundred synthetic users over a catalogue of 80 items, cheap enough for CLI tests."""
    path = tmp_path_factory.mktemp("data") / "small.jsonl"
    generate_synthetic(SynthConfig(n_users=300, n_items=80, n_clusters=4, seed=3), path)
    return path


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: list[str] = []


def record(num, title, ok, detail=""):
    status = "SKIP" if ok is None else ("PASS" if bool(ok) else "FAIL")
    line = f"[{status}] criterion {num}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
