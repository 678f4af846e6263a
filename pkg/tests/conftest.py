from __future__ import annotations

import numpy as np
import pytest

from scriptloc.textalign import Token, TokenSequence

ACCEPTANCE_LINES: list[str] = []


def tok(name: str) -> Token:
    return Token(f"v{name}", f"o{name}")


def seq(item_id: str, names, spans=()) -> TokenSequence:
    return TokenSequence(item_id, tuple(tok(str(x)) for x in names), spans)


def random_corpus(rng, num_items, max_len, vocab, min_len=1):
    out = []
    for n in range(num_items):
        S = int(rng.integers(min_len, max_len + 1))
        out.append(seq(f"i{n}", rng.integers(vocab, size=S)))
    return out


@pytest.fixture
def record_acceptance():
    """Collect one pass/fail line per acceptance criterion for the terminal summary."""

    def _record(number: int, name: str, passed: bool, detail: str):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return _record


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
