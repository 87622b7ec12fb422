import numpy as np
import pytest

from san.data import AnnotatedExample, AnnotatedToken, SyntheticConfig, Vocab, generate_synthetic
from san.model import ModelConfig, SANModel

TINY = ModelConfig(d=3, word_dim=4, pos_dim=2, ner_dim=2, align_dim=3)


def toks(words, pos=1, ner=0):
    return [AnnotatedToken(w, w.lower(), pos, ner) for w in words]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic(SyntheticConfig(num_examples=12, seed=5, passage_len_range=(6, 9),
                                              question_len_range=(4, 5)))


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return Vocab.build(small_corpus)


@pytest.fixture
def tiny_model(small_vocab):
    return SANModel(TINY, small_vocab, seed=7)


@pytest.fixture
def six_token_example():
    return AnnotatedExample(id="six", passage=toks(["the", "cat", "sat", "on", "the", "mat"]),
                            question=toks(["where", "cat", "sat"]), answer_start=3, answer_end=5,
                            answer_texts=["on the mat"])


# --------------------------------------------------------------------------
# acceptance report: one pass/fail line per criterion at the end of the run

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] = entry["ok"] and report.passed
    entry["details"].extend(str(v) for k, v in item.user_properties if k == "detail")
    if report.failed:
        entry["details"].append(f"{item.name} failed")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["ok"] else "FAIL"
        detail = "; ".join(dict.fromkeys(entry["details"]))
        terminalreporter.write_line(f"criterion {number:2d} {status}  {entry['title']}" + (f"  [{detail}]" if detail else ""))
