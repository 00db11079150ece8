"""Sentence beam search and document translation with post-sentence memory updates."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import BOS, EOS, PAD, Document, Vocab, pad_batch, wrap
from .transformer import DocumentMemory, MemoryTransformer

LENGTH_PENALTY = 0.6


@dataclass
class BeamHypothesis:
    tokens: list = field(default_factory=list)   # generated ids, eos excluded
    logprob: float = 0.0
    finished: bool = False

    def score(self, alpha: float = LENGTH_PENALTY) -> float:
        n = len(self.tokens) + (1 if self.finished else 0)
        return self.logprob / max(n, 1) ** alpha


def default_max_len(src_len: int) -> int:
    return 2 * src_len + 8


def _log_probs(logits: T.Tensor) -> np.ndarray:
    z = logits.data.astype(np.float64)
    z[:, PAD] = -np.inf
    z[:, BOS] = -np.inf
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def beam_search_sentence(
    model: MemoryTransformer,
    src_tokens: Sequence[int],
    memory: DocumentMemory | None = None,
    beam: int = 5,
    max_len: int | None = None,
    length_penalty: float = LENGTH_PENALTY,
    return_hypothesis: bool = False,
    enc=None,
):
    """Highest ``logprob / len**alpha`` hypothesis; memories are read but never updated here.

    ``src_tokens`` is the bos/eos-wrapped source. Search stops once ``beam``
    hypotheses have finished or ``max_len`` tokens were generated.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    max_len = default_max_len(len(src_tokens)) if max_len is None else max_len
    max_len = min(max_len, model.config.max_sentence_len - 1)
    with T.no_grad():
        if enc is None:
            enc = model.encode(np.asarray(src_tokens)[None], memory)
        cache = model.init_cache(enc, memory)
        alive = [BeamHypothesis()]
        finished: list[BeamHypothesis] = []
        for _ in range(max_len):
            last = [h.tokens[-1] if h.tokens else BOS for h in alive]
            logp = _log_probs(model.decode_step(last, cache))
            cand = np.array([h.logprob for h in alive])[:, None] + logp
            flat = cand.ravel()
            order = np.argsort(-flat, kind="stable")[: 2 * beam]
            V = logp.shape[1]
            new_alive, rows = [], []
            for rank, idx in enumerate(order):
                b, tok = divmod(int(idx), V)
                if not np.isfinite(flat[idx]):
                    break
                if tok == EOS:
                    # only an EOS ranked inside the beam may close a hypothesis
                    if rank < beam:
                        finished.append(BeamHypothesis(list(alive[b].tokens), float(flat[idx]), True))
                else:
                    new_alive.append(BeamHypothesis(alive[b].tokens + [tok], float(flat[idx])))
                    rows.append(b)
                if len(new_alive) == beam:
                    break
            if not new_alive:
                break
            # extending only lowers log-probability, so a finished leader cannot be overtaken
            if len(finished) >= beam and max(h.logprob for h in finished) >= new_alive[0].logprob:
                break
            alive = new_alive
            cache = model.reorder_cache(cache, np.array(rows))
        else:
            # length limit reached: unfinished beams compete too
            finished.extend(alive)
        pool = finished if finished else alive
        best = max(pool, key=lambda h: h.score(length_penalty))
    return best if return_hypothesis else best.tokens


def greedy_decode(model: MemoryTransformer, src_tokens: Sequence[int], memory: DocumentMemory | None = None, max_len: int | None = None) -> list[int]:
    """Argmax decoding by full recomputation of the decoder at every step."""
    max_len = default_max_len(len(src_tokens)) if max_len is None else max_len
    max_len = min(max_len, model.config.max_sentence_len - 1)
    out: list[int] = []
    with T.no_grad():
        enc = model.encode(np.asarray(src_tokens)[None], memory)
        for _ in range(max_len):
            logits = model.decode(np.array([[BOS, *out]]), enc, memory).logits
            tok = int(np.argmax(_log_probs(T.Tensor(logits.data[:, -1]))[0]))
            if tok == EOS:
                break
            out.append(tok)
    return out


def advance_memory(model: MemoryTransformer, memory: DocumentMemory, enc, hyp: Sequence[int]) -> DocumentMemory:
    """Post-sentence update: encoder memory from ``enc``, decoder memory from a fresh pass over ``hyp``."""
    dec = None
    if memory.decoder:
        dec = model.decode(np.array([[BOS, *hyp]]), enc, memory)
    return model.step_memory(memory, enc, dec, truncation=0)


def translate_document(
    model: MemoryTransformer,
    doc: Document,
    beam: int = 5,
    length_penalty: float = LENGTH_PENALTY,
    max_len: int | None = None,
) -> list[list[int]]:
    """Translate sentence by sentence; memories change only after a sentence is complete."""
    was = model.training
    model.eval()
    hyps = []
    with T.no_grad():
        memory = model.reset_memory(1)
        for x in doc.src:
            src = wrap(x)
            enc = model.encode(np.asarray(src)[None], memory)
            hyp = beam_search_sentence(model, src, memory, beam, max_len, length_penalty, enc=enc)
            hyps.append(hyp)
            memory = advance_memory(model, memory, enc, hyp)
    model.train(was)
    return hyps


def translate_corpus(model: MemoryTransformer, docs: Sequence[Document], beam: int = 5, length_penalty: float = LENGTH_PENALTY, workers: int = 1) -> list[list[list[int]]]:
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        # forward passes on a frozen model share no mutable state besides the eval flag
        was = model.training
        model.eval()
        try:
            with ThreadPoolExecutor(workers) as pool:
                return list(pool.map(lambda d: translate_document(model, d, beam, length_penalty), docs))
        finally:
            model.train(was)
    return [translate_document(model, d, beam, length_penalty) for d in docs]


def write_translations(path, docs: Sequence[Document], hyps, vocab: Vocab):
    with open(path, "w", encoding="utf-8") as f:
        for doc, doc_hyps in zip(docs, hyps):
            rec = {
                "id": doc.id,
                "src": [" ".join(vocab.decode(s)) for s in doc.src],
                "tgt": [" ".join(vocab.decode(t)) for t in doc.tgt],
                "hyp": [" ".join(vocab.decode(h)) for h in doc_hyps],
                "ann": doc.ann,
            }
            f.write(json.dumps(rec) + "\n")


def read_translations(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
