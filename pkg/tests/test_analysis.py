import csv
import json
import math

import numpy as np
import pytest

from docmem.analysis import (
    ComplexityRow,
    _entropy,
    collect_attention,
    complexity_benchmark,
    export_attention_maps,
    gradient_attribution,
    information_gain,
    trace_dependencies,
    write_complexity_csv,
    write_scores_csv,
)
from docmem.corpus import generate_entity_carry_corpus, wrap
from docmem.tensor import UsageError
from docmem.transformer import MemoryTransformer, ModelConfig
from conftest import tiny_config


def _model(vocab, **kw):
    kw.setdefault("zero_init_output", False)
    return MemoryTransformer(tiny_config(len(vocab), **kw))


@pytest.fixture(scope="module")
def long_doc():
    return generate_entity_carry_corpus(1, (25, 25), (1, 3), sent_len=(3, 5), n_words=10, seed=1)


class TestInformationGain:
    def test_same_model_is_zero(self, vocab, small_docs):
        m = _model(vocab)
        assert information_gain(m, m, small_docs[:2]) == {"output": 0.0, "update": 0.0}

    def test_entropy_extremes(self):
        for k in (2, 5, 17):
            one_hot = np.eye(k)[:1]
            uniform = np.full((1, k), 1 / k)
            assert (_entropy(uniform) - _entropy(one_hot))[0] == pytest.approx(math.log(k))

    def test_fresh_seed_gives_finite_gain(self, vocab, small_docs):
        ig = information_gain(_model(vocab, seed=1), _model(vocab, seed=2), small_docs[:2])
        assert set(ig) == {"update", "output"} and all(np.isfinite(v) for v in ig.values())

    def test_config_mismatch(self, vocab, small_docs):
        with pytest.raises(UsageError, match="mem_size"):
            information_gain(_model(vocab), _model(vocab, mem_size=6), small_docs[:1])


class TestAttribution:
    def test_memory_free_model_is_isolated(self, vocab, long_doc):
        scores = gradient_attribution(_model(vocab, mem_side="none"), long_doc, bucket=5)
        assert scores[0] > 0
        assert all(v == 0.0 for k, v in scores.items() if k >= 1)

    def test_memory_model_reaches_back(self, vocab, long_doc):
        scores = gradient_attribution(_model(vocab), long_doc, bucket=5, anchors=[24])
        assert sorted(scores) == [0, 5, 10, 15, 20]
        assert all(v > 0 for v in scores.values())

    def test_unreachable_ranges_are_omitted(self, vocab, long_doc):
        scores = gradient_attribution(_model(vocab), long_doc, bucket=10, anchors=[4])
        assert list(scores) == [0]

    def test_restores_mode(self, vocab, long_doc):
        m = _model(vocab)
        m.train()
        gradient_attribution(m, long_doc, bucket=10, anchors=[1])
        assert m.training and m.lookup_log is None


class TestAttentionExport:
    def test_records_are_distributions(self, vocab, small_docs):
        doc = small_docs[0]
        recs = collect_attention(_model(vocab), doc)
        assert len(recs) == 4 * len(doc)    # two sides, update and output
        for r in recs:
            np.testing.assert_allclose(r.weights.sum(-1), 1.0, atol=1e-5)
            assert (r.weights >= 0).all()
        upd = [r for r in recs if r.kind == "update" and r.side == "encoder"]
        for t, r in enumerate(upd):
            assert r.weights.shape[1:] == (4, len(wrap(doc.src[t])))

    def test_files(self, vocab, small_docs, tmp_path):
        doc = small_docs[1]
        paths = export_attention_maps(_model(vocab), doc, tmp_path, vocab)
        assert len(paths) == 4 * len(doc)
        recs = [json.loads(p.read_text()) for p in paths]
        assert all(r["shape"] == list(np.asarray(r["weights"]).shape) for r in recs)
        upd = next(r for r in recs if r["kind"] == "update")
        assert upd["query_labels"][0] == "m0" and upd["key_labels"][0] == "<bos>"

    def test_trace_dependencies(self, vocab, small_docs):
        markers = [vocab.stoi[w] for w in vocab.itos if w.startswith("MARK_")]
        share = trace_dependencies(_model(vocab), small_docs, markers)
        assert 0.0 <= share <= 1.0

    def test_trace_needs_memory(self, vocab, small_docs):
        with pytest.raises(UsageError):
            trace_dependencies(_model(vocab, mem_side="target"), small_docs[:1], [4], side="encoder")


@pytest.fixture(scope="module")
def rows():
    cfg = ModelConfig(vocab_size=16, n_layers=1, d_model=16, n_heads=2, d_ffn=32, mem_size=4)
    return complexity_benchmark([40, 80], chunk=20, config=cfg)


class TestComplexity:
    def test_memory_space_is_flat(self, rows):
        peak = {(r.variant, r.n_tokens): r.peak_values for r in rows}
        assert peak["memory", 40] == peak["memory", 80]
        assert peak["sentence", 80] == pytest.approx(peak["sentence", 40], rel=0.1)
        assert peak["concat", 80] > 2 * peak["concat", 40]

    def test_csv(self, rows, tmp_path):
        write_complexity_csv(rows, tmp_path / "c.csv")
        out = list(csv.DictReader(open(tmp_path / "c.csv")))
        assert len(out) == 6 and out[0]["variant"] == "sentence"

    def test_chunk_must_divide(self):
        with pytest.raises(ValueError):
            complexity_benchmark([50], chunk=20)

    def test_row_invariant(self):
        with pytest.raises(ValueError):
            ComplexityRow(0, "memory", 1, 0.0, 0.0)


def test_scores_csv(tmp_path):
    write_scores_csv({0: 1.5, 10: 0.25}, tmp_path / "s.csv")
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows == [["k_start", "k_end", "score"], ["0", "10", "1.5"], ["10", "20", "0.25"]]
