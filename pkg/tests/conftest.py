"""Shared corpora. Generating the desk corpus takes ~15 s, so it is built once per session."""

import pytest

from cldino.corpus import generate_corpus, make_trials


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """4 speakers x 6 utterances of 2.0-2.5 s."""
    return generate_corpus(4, 6, (2.0, 2.5), seed=3, out_dir=tmp_path_factory.mktemp("tiny"))


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory):
    """The 20 x 40 training corpus used by the desk-scale experiments."""
    return generate_corpus(20, 40, (2.0, 4.0), seed=7, out_dir=tmp_path_factory.mktemp("desk"))


@pytest.fixture(scope="session")
def heldout(tmp_path_factory):
    """Unseen speakers for verification trials: 20 x 10 utterances, 500 + 500 trials."""
    m = generate_corpus(20, 10, (2.0, 4.0), seed=1007, out_dir=tmp_path_factory.mktemp("heldout"),
                        prefix="ev")
    return m, make_trials(m, 500, 500, seed=1)


# -- acceptance verdicts ---------------------------------------------------

VERDICTS: dict = {}


@pytest.fixture(scope="session")
def verdict():
    """``verdict(n, ok, detail)`` records one line for the end-of-run acceptance summary."""
    def record(n, ok, detail):
        VERDICTS[n] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
