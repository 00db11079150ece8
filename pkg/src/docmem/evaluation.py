"""Corpus BLEU over sentences and documents, per-index breakdown, PRON accuracy."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

MAX_ORDER = 4


class EvaluationError(ValueError):
    pass


@dataclass
class BleuReport:
    score: float
    precisions: list      # p_1..p_4 as fractions
    bp: float
    hyp_len: int
    ref_len: int

    def to_dict(self) -> dict:
        return asdict(self)


def _tokens(x) -> list:
    return x.split() if isinstance(x, str) else list(x)


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _stats(hyp: Sequence, ref: Sequence) -> list[int]:
    """[c, r, match_1, total_1, ..., match_4, total_4] for one segment."""
    out = [len(hyp), len(ref)]
    for n in range(1, MAX_ORDER + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        out += [sum(min(c, r[g]) for g, c in h.items()), max(len(hyp) - n + 1, 0)]
    return out


def _score(stats: Sequence[int], smooth: bool = False) -> BleuReport:
    c, r = stats[0], stats[1]
    precisions, logs = [], []
    for n in range(MAX_ORDER):
        m, t = stats[2 + 2 * n], stats[3 + 2 * n]
        if smooth and n > 0:
            m, t = m + 1, t + 1
        p = m / t if t else 0.0
        precisions.append(p)
        logs.append(math.log(p) if p > 0 else None)
    bp = 1.0 if c >= r else (math.exp(1 - r / c) if c else 0.0)
    if any(v is None for v in logs):
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(logs) / MAX_ORDER)
    return BleuReport(score, precisions, bp, c, r)


def corpus_bleu(hyps: Sequence, refs: Sequence) -> BleuReport:
    """Unsmoothed BLEU with clipped n-gram counts pooled over aligned segments."""
    if len(hyps) != len(refs):
        raise EvaluationError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not hyps:
        raise EvaluationError("cannot score an empty corpus")
    total = [0] * (2 + 2 * MAX_ORDER)
    for h, r in zip(hyps, refs):
        total = [a + b for a, b in zip(total, _stats(_tokens(h), _tokens(r)))]
    return _score(total)


def sentence_bleu(hyp, ref) -> float:
    """Add-one smoothing on orders 2-4 so short imperfect sentences stay above zero."""
    return _score(_stats(_tokens(hyp), _tokens(ref)), smooth=True).score


def _check_docs(hyp_docs, ref_docs):
    if len(hyp_docs) != len(ref_docs):
        raise EvaluationError(f"{len(hyp_docs)} hypothesis documents but {len(ref_docs)} references")
    for i, (h, r) in enumerate(zip(hyp_docs, ref_docs)):
        if len(h) != len(r):
            raise EvaluationError(f"document {i}: {len(h)} hypothesis sentences but {len(r)} references")


def s_bleu(hyps, refs) -> BleuReport:
    """Corpus BLEU over aligned sentences (strings or token lists)."""
    return corpus_bleu(hyps, refs)


def flatten(docs) -> list:
    return [s for d in docs for s in d]


def d_bleu(hyp_docs, ref_docs) -> BleuReport:
    """Each document's sentences are concatenated into one segment first."""
    _check_docs(hyp_docs, ref_docs)
    join = lambda d: [w for s in d for w in _tokens(s)]
    return corpus_bleu([join(d) for d in hyp_docs], [join(d) for d in ref_docs])


def bleu_by_index(hyp_docs, ref_docs, bucket: int = 10) -> list[tuple[tuple[int, int], float]]:
    """Mean smoothed sentence BLEU per sentence-index range ``[k, k+bucket)``.

    Ranges no document reaches are left out.
    """
    if bucket < 1:
        raise EvaluationError("bucket must be >= 1")
    _check_docs(hyp_docs, ref_docs)
    sums: dict[int, list[float]] = {}
    for h_doc, r_doc in zip(hyp_docs, ref_docs):
        for i, (h, r) in enumerate(zip(h_doc, r_doc)):
            sums.setdefault(i // bucket, []).append(sentence_bleu(h, r))
    return [((b * bucket, (b + 1) * bucket), sum(v) / len(v)) for b, v in sorted(sums.items())]


# -- PRON resolution on decoded output ------------------------------------------

@dataclass
class PronReport:
    pron_accuracy: float
    nonpron_accuracy: float
    by_distance: dict     # distance -> accuracy
    n_pron: int
    n_other: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["by_distance"] = {str(k): v for k, v in self.by_distance.items()}
        return d


def pron_accuracy(hyp_docs, ref_docs, anns, bucket_of=None) -> PronReport:
    """Position-wise token accuracy of decoded sentences against the references.

    ``anns`` holds ``[sentence, token, distance]`` triples per document marking
    the PRON positions. A missing hypothesis position counts as wrong.
    ``bucket_of`` maps a distance to its reporting key (identity by default).
    """
    bucket_of = bucket_of or (lambda d: d)
    _check_docs(hyp_docs, ref_docs)
    hit = {"pron": [0, 0], "other": [0, 0]}
    by_dist: dict = {}
    for doc_hyps, doc_refs, ann in zip(hyp_docs, ref_docs, anns):
        pron = {(s, j): d for s, j, d in ann}
        for s, (ref, hyp) in enumerate(zip(doc_refs, doc_hyps)):
            ref, hyp = _tokens(ref), _tokens(hyp)
            for j, tok in enumerate(ref):
                ok = int(j < len(hyp) and hyp[j] == tok)
                dist = pron.get((s, j))
                key = "other" if dist is None else "pron"
                hit[key][0] += ok
                hit[key][1] += 1
                if dist is not None:
                    cell = by_dist.setdefault(bucket_of(dist), [0, 0])
                    cell[0] += ok
                    cell[1] += 1
    acc = lambda h: h[0] / h[1] if h[1] else float("nan")
    return PronReport(
        acc(hit["pron"]), acc(hit["other"]),
        {k: acc(v) for k, v in sorted(by_dist.items())},
        hit["pron"][1], hit["other"][1],
    )


def distance_bucket(edges: Sequence[int] = (1, 3, 5, 10)):
    """Map a distance to the smallest edge not below it (distances past the last edge go to it)."""
    edges = sorted(edges)

    def f(d: int) -> int:
        for e in edges:
            if d <= e:
                return e
        return edges[-1]

    return f


# -- reports -------------------------------------------------------------------

def report_dict(s: BleuReport, d: BleuReport, by_index=None) -> dict:
    out = {"s_bleu": s.to_dict(), "d_bleu": d.to_dict()}
    if by_index is not None:
        out["by_index"] = [{"start": a, "end": b, "bleu": v} for (a, b), v in by_index]
    return out


def write_json(report: dict, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)
        f.write("\n")


def format_table(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    """Left-aligned columns padded to the widest cell."""
    cells = [[str(h) for h in header]] + [[_fmt(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells)


def _fmt(x) -> str:
    return f"{x:.2f}" if isinstance(x, float) else str(x)


def format_report(s: BleuReport, d: BleuReport, by_index=None) -> str:
    rows = []
    for name, r in (("s-BLEU", s), ("d-BLEU", d)):
        rows.append([name, r.score, *(100 * p for p in r.precisions), r.bp, r.hyp_len, r.ref_len])
    text = format_table(rows, ["metric", "score", "p1", "p2", "p3", "p4", "bp", "hyp_len", "ref_len"])
    if by_index:
        text += "\n\n" + format_table([[f"{a}-{b - 1}", v] for (a, b), v in by_index], ["index", "bleu"])
    return text
