import numpy as np
import pytest

from docmem.corpus import entity_vocab, generate_entity_carry_corpus
from docmem.transformer import ModelConfig

_CRITERIA: dict[int, dict] = {}


def tiny_config(vocab_size: int, **kw) -> ModelConfig:
    base = dict(n_layers=1, d_model=16, n_heads=2, d_ffn=32, vocab_size=vocab_size,
                max_sentence_len=24, dropout_rate=0.0, mem_size=4, seed=3)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def vocab():
    return entity_vocab(10)


@pytest.fixture(scope="session")
def small_docs(vocab):
    return generate_entity_carry_corpus(
        6, sents_per_doc=(3, 5), antecedent_distance=(1, 2), sent_len=(3, 5), n_words=10, vocab=vocab, seed=7,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance summary ------------------------------------------------------------

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.skipped:
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "ran": False, "detail": []})
    if rep.when == "call" or rep.failed:
        entry["ran"] = True
        entry["ok"] &= rep.passed
        entry["detail"] += [v for k, v in rep.user_properties if k == "detail" and v not in entry["detail"]]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ran"] and e["ok"] else ("SKIP" if not e["ran"] else "FAIL")
        detail = f" ({'; '.join(e['detail'])})" if e["detail"] else ""
        terminalreporter.write_line(f"criterion {number} {status}: {e['title']}{detail}")
