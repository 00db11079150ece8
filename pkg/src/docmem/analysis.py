"""Diagnostics: attention entropy gain, gradient attribution by distance,
attention-map export, dependency tracing and the decoding complexity benchmark."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import Document, collate_step, wrap
from .decoding import advance_memory
from .tensor import UsageError
from .transformer import ModelConfig, MemoryTransformer


@dataclass
class AttentionRecord:
    side: str
    layer: int
    kind: str                 # "update" | "output"
    step: int
    weights: np.ndarray       # [heads, queries, keys]
    query_labels: list
    key_labels: list

    def to_json(self) -> dict:
        return {
            "side": self.side, "layer": self.layer, "kind": self.kind, "step": self.step,
            "query_labels": self.query_labels, "key_labels": self.key_labels,
            "shape": list(self.weights.shape), "weights": self.weights.tolist(),
        }


@dataclass
class ComplexityRow:
    n_tokens: int
    variant: str              # "sentence" | "concat" | "memory"
    peak_values: int
    seconds: float
    decode_seconds_per_token: float

    def __post_init__(self):
        if self.n_tokens <= 0:
            raise ValueError("token count must be positive")


def _labels(ids, vocab) -> list:
    return [vocab.itos[i] for i in ids] if vocab is not None else [int(i) for i in ids]


def collect_attention(model: MemoryTransformer, doc: Document, vocab=None) -> list[AttentionRecord]:
    """Teacher-forced pass over one document, recording every memory attention."""
    was = model.training
    model.eval()
    model.attention_log = log = []
    records = []
    try:
        with T.no_grad():
            mem = model.reset_memory(1)
            for t in range(len(doc)):
                b = collate_step([doc], t)
                src, tgt_in = b.src[0], b.tgt_in[0]
                enc = model.encode(b.src, mem)
                dec = model.decode(b.tgt_in, enc, mem)
                mem = model.step_memory(mem, enc, dec, truncation=0)
                d_m = model.config.mem_size
                rows = [f"m{i}" for i in range(d_m)]
                for r in log:
                    tokens = _labels(src if r["side"] == "encoder" else tgt_in, vocab)
                    q, k = (rows, tokens) if r["kind"] == "update" else (tokens, rows)
                    records.append(AttentionRecord(r["side"], r["layer"], r["kind"], r["step"], r["weights"][0], q, k))
                log.clear()
    finally:
        model.attention_log = None
        model.train(was)
    return records


# -- information gain ------------------------------------------------------------

def _entropy(w: np.ndarray) -> np.ndarray:
    w = w.astype(np.float64)
    return -(np.where(w > 0, w * np.log(np.where(w > 0, w, 1.0)), 0.0)).sum(axis=-1)


def information_gain(trained: MemoryTransformer, init: MemoryTransformer, docs: Sequence[Document]) -> dict[str, float]:
    """Mean entropy drop (nats) from the init model's memory attentions to the trained model's.

    Averaged over heads, steps and queries; one value per attention kind.
    """
    a, b = trained.config.to_dict(), init.config.to_dict()
    a.pop("seed"), b.pop("seed")
    if a != b:
        diff = sorted(k for k in a if a[k] != b[k])
        raise UsageError(f"models differ in config fields {diff}")
    sums: dict[str, list[float]] = {}
    for doc in docs:
        for ra, rb in zip(collect_attention(trained, doc), collect_attention(init, doc)):
            gain = _entropy(rb.weights) - _entropy(ra.weights)
            sums.setdefault(ra.kind, []).extend(gain.ravel().tolist())
    return {k: float(np.mean(v)) for k, v in sorted(sums.items())}


# -- gradient attribution ----------------------------------------------------------

def gradient_attribution(
    model: MemoryTransformer,
    docs: Sequence[Document],
    bucket: int = 10,
    anchors: Sequence[int] | None = None,
    dtype=np.float64,
) -> dict[int, float]:
    """Score(k): L1 mass of embedding-lookup gradients from sentence ``s``'s loss
    onto the distinct tokens of sentences at distance ``[k, k+bucket)`` before it.

    The whole document stays on one tape (no truncation). Dropout is off so the
    scores are deterministic. ``anchors`` picks which sentence losses are used
    (default: all); ranges a document cannot reach are left out of the average.
    The contribution of distant sentences shrinks geometrically, so the pass
    runs in ``dtype`` (float64 by default) to keep it from underflowing.
    """
    was, saved_log = model.training, model.lookup_log
    model.eval()
    scores: dict[int, list[float]] = {}
    try:
        with T.default_dtype(dtype):
            for doc in docs:
                for k, v in _document_scores(model, doc, bucket, anchors):
                    scores.setdefault(k, []).append(v)
    finally:
        model.lookup_log = saved_log
        model.train(was)
    return {k: float(np.mean(v)) for k, v in sorted(scores.items())}


def _document_scores(model, doc, bucket, anchors):
    model.lookup_log = []
    mem = model.reset_memory(1)
    losses, lookups = [], []
    for t in range(len(doc)):
        start = len(model.lookup_log)
        b = collate_step([doc], t)
        enc = model.encode(b.src, mem)
        dec = model.decode(b.tgt_in, enc, mem)
        losses.append(T.cross_entropy(dec.logits, b.labels))
        lookups.append(model.lookup_log[start:])
        mem = model.step_memory(mem, enc, dec, truncation="full")
    chosen = range(len(doc)) if anchors is None else [s for s in anchors if 0 <= s < len(doc)]
    V = model.config.vocab_size
    for s in chosen:
        flat = [(i, e, ids) for i in range(s + 1) for _tag, e, ids in lookups[i]]
        grads = T.grad(losses[s], [e for _, e, _ in flat])
        per_sent = {}
        for (i, _e, ids), g in zip(flat, grads):
            rows = per_sent.setdefault(i, np.zeros((V, g.shape[-1])))
            np.add.at(rows, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        for k in range(0, s + 1, bucket):
            in_range = [s - j for j in range(k, min(k + bucket, s + 1))]
            rows = sum(per_sent[i] for i in in_range)
            tokens = sorted({int(x) for i in in_range for _tag, _e, ids in lookups[i] for x in ids.reshape(-1)})
            yield k, float(np.abs(rows[tokens]).sum())


# -- attention export and dependency tracing -------------------------------------------

def export_attention_maps(model: MemoryTransformer, doc: Document, out_dir, vocab=None) -> list[Path]:
    """One JSON file per (side, layer, kind, step)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in collect_attention(model, doc, vocab):
        p = out / f"{doc.id}_{r.side}_L{r.layer}_{r.kind}_t{r.step:03d}.json"
        p.write_text(json.dumps(r.to_json()))
        paths.append(p)
    return paths


def trace_dependencies(model: MemoryTransformer, docs: Sequence[Document], marker_ids: Sequence[int], side: str = "encoder", top: int | None = None) -> float:
    """Share of PRON instances whose most-read memory row is among the rows that
    most attended the antecedent marker when it was written.

    Weights are averaged over heads; ``top`` rows count as "most attended"
    (default: a quarter of the memory, at least one).
    """
    top = top or max(1, model.config.mem_size // 4)
    markers = set(int(m) for m in marker_ids)
    hits = total = 0
    for doc in docs:
        recs = [r for r in collect_attention(model, doc) if r.side == side]
        if not recs:
            raise UsageError(f"model has no {side} memory")
        layer = max(r.layer for r in recs)
        upd = {r.step: r.weights.mean(0) for r in recs if r.layer == layer and r.kind == "update"}
        out = {r.step: r.weights.mean(0) for r in recs if r.layer == layer and r.kind == "output"}
        for s, j, d in doc.ann:
            m = s - d
            if d < 1:
                continue
            src = wrap(doc.src[m])
            pos = [p for p, tok in enumerate(src) if tok in markers]
            if not pos:
                continue
            written = np.argsort(-upd[m][:, pos[-1]], kind="stable")[:top]
            read = int(np.argmax(out[s][j + 1]))
            hits += int(read in written)
            total += 1
    return hits / total if total else float("nan")


# -- complexity benchmark ----------------------------------------------------------

def _forced_decode(model, enc, memory, length: int, token: int) -> float:
    """Incremental decoding of ``length`` fixed tokens; returns seconds spent."""
    t0 = time.perf_counter()
    cache = model.init_cache(enc, memory)
    for _ in range(length):
        model.decode_step([token], cache)
    return time.perf_counter() - t0


def complexity_benchmark(
    token_counts: Sequence[int],
    chunk: int = 100,
    config: ModelConfig | None = None,
    token: int = 4,
) -> list[ComplexityRow]:
    """Peak live tensor values and wall time when translating ``N`` dummy tokens.

    sentence: N/chunk independent chunks; concat: one length-N sequence;
    memory: chunks in order with memory updates in between.
    """
    base = config or ModelConfig(vocab_size=16)
    rows = []
    for N in token_counts:
        if N % chunk:
            raise ValueError(f"token count {N} is not a multiple of chunk {chunk}")
        n_chunks = N // chunk
        variants = {
            "sentence": replace(base, mem_side="none", max_sentence_len=chunk + 2),
            "concat": replace(base, mem_side="none", max_sentence_len=N + 2),
            "memory": replace(base, mem_side=base.mem_side if base.mem_side != "none" else "both", max_sentence_len=chunk + 2),
        }
        for name, cfg in variants.items():
            model = MemoryTransformer(cfg)
            model.eval()
            length = N if name == "concat" else chunk
            src = np.array([[token] * length])
            with T.no_grad():
                T.reset_peak_values()
                floor = T.live_values()
                t0 = time.perf_counter()
                dec_time = 0.0
                memory = model.reset_memory(1) if name == "memory" else None
                for _ in range(1 if name == "concat" else n_chunks):
                    enc = model.encode(src, memory)
                    dec_time += _forced_decode(model, enc, memory, length, token)
                    if memory is not None:
                        memory = advance_memory(model, memory, enc, [token] * (length - 1))
                    del enc
                seconds = time.perf_counter() - t0
                peak = T.peak_values() - floor
            rows.append(ComplexityRow(N, name, int(peak), seconds, dec_time / N))
    return rows


# -- CSV ---------------------------------------------------------------------------

def write_complexity_csv(rows: Sequence[ComplexityRow], path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(asdict(rows[0]).keys()) if rows else ["n_tokens"])
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


def write_scores_csv(scores: dict[int, float], path, bucket: int = 10):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["k_start", "k_end", "score"])
        for k, v in sorted(scores.items()):
            w.writerow([k, k + bucket, v])
