from contextlib import contextmanager

import numpy as np
import pytest

from kdrank.data import SyntheticSpec, Vocab, choose_max_lens, generate_synthetic, tensorize, SPLITS


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus():
    spec = SyntheticSpec(vocab_size=30, n_topics=6, words_per_topic=4, tokens_per_turn=4,
                         turns_per_context=2, n_candidates=4, n_train=24, n_valid=8, n_test=8,
                         noise=0.1, seed=3)
    splits = generate_synthetic(spec)
    vocab = Vocab.from_examples(splits["train"])
    ctx_max, resp_max = choose_max_lens(splits["train"])
    sets = {s: tensorize(splits[s], vocab, ctx_max, resp_max) for s in SPLITS}
    return {"spec": spec, "splits": splits, "vocab": vocab, "ctx_max": ctx_max,
            "resp_max": resp_max, "sets": sets}


# ----------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary
# ----------------------------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[dict]()


class _Criteria:
    def __init__(self, lines: dict):
        self.lines = lines

    @contextmanager
    def criterion(self, number: int, title: str):
        state = {"detail": ""}
        try:
            yield state
        except BaseException as exc:
            reason = state["detail"] or f"{type(exc).__name__}: {exc}".splitlines()[0]
            self._emit(number, f"FAIL  criterion {number:>2} {title}: {reason}")
            raise
        self._emit(number, f"PASS  criterion {number:>2} {title}: {state['detail']}")

    def _emit(self, number, line):
        self.lines[number] = line
        print(line)


@pytest.fixture
def acceptance(request):
    return _Criteria(request.config.stash.setdefault(_ACCEPTANCE, {}))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
