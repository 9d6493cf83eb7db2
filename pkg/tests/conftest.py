import pytest

from ctxlm.corpus import Conversation, Turn, split, synth_generate
from ctxlm.presets import default_synth_spec

_CRITERIA = {}


@pytest.fixture(scope="session")
def record_criterion():
    """Store one PASS/FAIL line per acceptance criterion and echo it."""
    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])


MOV, SPO = "Entertainment_Movies", "Sports"


def _turn(i, sys, user, topic, tags=None, bot="b1"):
    return Turn(i, tuple(sys.split()), tuple(user.split()),
                {"topic": topic, "bot_id": bot}, tags)


@pytest.fixture
def tiny_corpus():
    """Two short hand-written conversations over a small vocabulary."""
    c1 = Conversation("c1", (
        _turn(0, "do you like movies", "i like the matrix", MOV, (None, None, None, MOV)),
        _turn(1, "who is your favorite actor", "keanu reeves", MOV, (MOV, MOV), bot="b2"),
        _turn(2, "let us talk about sports", "i like football", SPO, (None, None, SPO)),
    ))
    c2 = Conversation("c2", (
        _turn(0, "do you like sports", "i watch football", SPO, (None, None, SPO)),
        _turn(1, "what team", "the lakers", SPO, (None, SPO)),
    ))
    return [c1, c2]


@pytest.fixture(scope="session")
def small_parts():
    """A few hundred synthetic conversations split into train/dev/test."""
    corpus = synth_generate(default_synth_spec(n_conversations=240), 0)
    return split(corpus, (0.8, 0.1, 0.1), 0)
