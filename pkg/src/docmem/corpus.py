"""Synthetic entity-carry document corpora, vocabulary, JSONL I/O and batching.

Each source sentence translates word by word through a fixed dictionary,
except ``PRON``: its target is ``pron_a`` or ``pron_b`` depending on which
marker (``MARK_A``/``MARK_B``) was introduced most recently in the document.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN = "<pad>", "<bos>", "<eos>", "<unk>"
RESERVED = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)
PAD, BOS, EOS, UNK = range(4)

MARKERS = ("MARK_A", "MARK_B")
PRON = "PRON"
MARKER_TARGETS = {"MARK_A": "mark_a", "MARK_B": "mark_b"}
PRON_TARGETS = {"MARK_A": "pron_a", "MARK_B": "pron_b"}


class CorpusFormatError(ValueError):
    pass


class GenerationError(ValueError):
    pass


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.stoi.get(w, UNK) for w in words]

    def decode(self, ids: Sequence[int], strip: bool = True) -> list[str]:
        out = [self.itos[i] for i in ids]
        if strip:
            out = [w for w in out if w not in (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN)]
        return out

    def save(self, path):
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def entity_vocab(n_words: int = 40) -> Vocab:
    src = [f"s{i}" for i in range(n_words)]
    tgt = [f"t{i}" for i in range(n_words)]
    specials = [*MARKERS, PRON, *MARKER_TARGETS.values(), *PRON_TARGETS.values()]
    return Vocab(list(RESERVED) + src + tgt + specials)


@dataclass
class Document:
    id: str
    src: list          # list of token-id lists, one per sentence
    tgt: list
    ann: list = field(default_factory=list)   # [sent_idx, tok_idx, distance] per PRON

    def __post_init__(self):
        if len(self.src) != len(self.tgt) or not self.src:
            raise ValueError(f"document {self.id!r} needs equal, non-zero sentence counts")
        self.src = [list(map(int, s)) for s in self.src]
        self.tgt = [list(map(int, s)) for s in self.tgt]
        self.ann = [list(map(int, a)) for a in self.ann]

    def __len__(self):
        return len(self.src)


def _sampler(spec, name: str):
    """int -> constant; 2-tuple -> inclusive uniform range; list -> uniform choice."""
    if isinstance(spec, (int, np.integer)):
        values = [int(spec)]
    elif isinstance(spec, tuple) and len(spec) == 2:
        values = list(range(int(spec[0]), int(spec[1]) + 1))
    else:
        values = [int(v) for v in spec]
    if not values:
        raise GenerationError(f"{name} distribution is empty")
    return values


def generate_entity_carry_corpus(
    n_docs: int,
    sents_per_doc=(8, 120),
    antecedent_distance=(1, 10),
    seed: int = 0,
    sent_len=(5, 12),
    n_words: int = 40,
    vocab: Vocab | None = None,
    id_prefix: str = "doc",
    extra_pron_rate: float = 0.0,
) -> list[Document]:
    """Documents where each marker is followed by a PRON at a sampled distance.

    With ``extra_pron_rate`` > 0 each sentence strictly between a marker and
    its PRON also carries a PRON with that probability (same antecedent,
    shorter distance). Marker labels are assigned after layout so that A and B
    antecedents cover equally many PRON tokens: from a shuffled pool when every
    instance has one PRON, otherwise greedily in random order, which keeps the
    two totals within one instance of each other.
    """
    if not 0.0 <= extra_pron_rate <= 1.0:
        raise GenerationError("extra_pron_rate must lie in [0, 1]")
    vocab = vocab or entity_vocab(n_words)
    rng = np.random.default_rng(seed)
    lengths = _sampler(sents_per_doc, "sents_per_doc")
    distances = _sampler(antecedent_distance, "antecedent_distance")
    slens = _sampler(sent_len, "sent_len")
    if min(distances) < 0:
        raise GenerationError("antecedent distances must be non-negative")

    layouts = []
    for _ in range(n_docs):
        n = int(rng.choice(lengths))
        if min(distances) > n - 1:
            raise GenerationError(f"antecedent distance {min(distances)} does not fit a {n}-sentence document")
        instances = []
        i = int(rng.integers(0, min(3, n)))
        while True:
            d = int(rng.choice(distances))
            if i + d > n - 1:
                if instances:
                    break
                fitting = [x for x in distances if x <= n - 1]
                i, d = 0, int(rng.choice(fitting))
            extras = [s for s in range(i + 1, i + d) if extra_pron_rate and rng.random() < extra_pron_rate]
            instances.append((i, i + d, d, extras))
            i = i + d + 1 + int(rng.integers(0, 3))
            if i > n - 1:
                break
        sent_lens = [int(rng.choice(slens)) for _ in range(n)]
        layouts.append((n, instances, sent_lens))

    weights = [1 + len(inst[3]) for _, insts, _ in layouts for inst in insts]
    labels = _balanced_labels(weights, rng)

    words = [f"s{i}" for i in range(n_words)]
    docs = []
    k = 0
    for di, (n, instances, sent_lens) in enumerate(layouts):
        src = [list(rng.choice(words, size=sent_lens[s])) for s in range(n)]
        tgt_override = {}
        ann = []
        for mark_s, pron_s, d, extras in instances:
            marker = MARKERS[labels[k]]
            k += 1
            L = len(src[mark_s])
            if d == 0:
                a, b = sorted(rng.choice(L, size=2, replace=False))
                mark_pos, pron_pos = int(a), int(b)
            else:
                mark_pos = int(rng.integers(0, L))
                pron_pos = int(rng.integers(0, len(src[pron_s])))
            src[mark_s][mark_pos] = marker
            for s, pos in [(e, int(rng.integers(0, len(src[e])))) for e in extras] + [(pron_s, pron_pos)]:
                src[s][pos] = PRON
                tgt_override[(s, pos)] = PRON_TARGETS[marker]
                ann.append([s, pos, s - mark_s])
        tgt = []
        for s, sent in enumerate(src):
            out = []
            for j, w in enumerate(sent):
                if (s, j) in tgt_override:
                    out.append(tgt_override[(s, j)])
                elif w in MARKER_TARGETS:
                    out.append(MARKER_TARGETS[w])
                else:
                    out.append("t" + w[1:])
            tgt.append(out)
        docs.append(Document(f"{id_prefix}{di:05d}", [vocab.encode(s) for s in src], [vocab.encode(t) for t in tgt], ann))
    return docs


def _balanced_labels(weights: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    if all(w == 1 for w in weights):
        n = len(weights)
        labels = np.array([0] * (n // 2) + [1] * (n - n // 2))
        rng.shuffle(labels)
        return labels
    labels = np.zeros(len(weights), dtype=int)
    totals = [0, 0]
    for i in rng.permutation(len(weights)):
        lab = int(rng.integers(0, 2)) if totals[0] == totals[1] else int(totals[1] < totals[0])
        labels[i] = lab
        totals[lab] += weights[i]
    return labels


def dictionary_translate(vocab: Vocab, src_ids: Sequence[int], pron_guess: str = "pron_a") -> list[int]:
    """Memory-free per-sentence translation: dictionary lookup, fixed guess for PRON."""
    out = []
    for w in vocab.decode(src_ids):
        if w == PRON:
            out.append(pron_guess)
        elif w in MARKER_TARGETS:
            out.append(MARKER_TARGETS[w])
        else:
            out.append("t" + w[1:])
    return vocab.encode(out)


# -- I/O -----------------------------------------------------------------------

def save_corpus(docs: Sequence[Document], path, vocab: Vocab):
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            rec = {
                "id": doc.id,
                "src": [" ".join(vocab.decode(s, strip=False)) for s in doc.src],
                "tgt": [" ".join(vocab.decode(t, strip=False)) for t in doc.tgt],
                "ann": doc.ann,
            }
            f.write(json.dumps(rec) + "\n")


def load_corpus(path, vocab: Vocab) -> list[Document]:
    docs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            for key in ("id", "src", "tgt"):
                if key not in rec:
                    raise CorpusFormatError(f"line {lineno}: missing field {key!r}")
            try:
                docs.append(Document(
                    str(rec["id"]),
                    [vocab.encode(s.split()) for s in rec["src"]],
                    [vocab.encode(t.split()) for t in rec["tgt"]],
                    rec.get("ann", []),
                ))
            except (ValueError, TypeError, AttributeError) as exc:
                raise CorpusFormatError(f"line {lineno}: {exc}") from exc
    return docs


# -- iteration and batching ------------------------------------------------------

def wrap(ids: Sequence[int]) -> list[int]:
    return [BOS, *ids, EOS]


def iterate_document(doc: Document) -> Iterator[tuple[list[int], list[int]]]:
    """Sentence pairs in document order, each wrapped in bos/eos."""
    for x, y in zip(doc.src, doc.tgt):
        yield wrap(x), wrap(y)


def pad_batch(seqs: Sequence[Sequence[int]], min_len: int = 1) -> np.ndarray:
    L = max([len(s) for s in seqs] + [min_len])
    out = np.full((len(seqs), L), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


@dataclass
class Batch:
    src: np.ndarray        # [B, Ls]
    tgt_in: np.ndarray     # [B, Lt]
    labels: np.ndarray     # [B, Lt]
    valid: np.ndarray      # [B] row holds a real sentence

    @property
    def n_tokens(self) -> int:
        return int((self.labels != PAD).sum())


def collate_pairs(pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> Batch:
    srcs = [p[0] for p in pairs]
    tgts = [p[1] for p in pairs]
    tgt = pad_batch(tgts, 2)
    valid = np.array([len(s) > 0 for s in srcs])
    return Batch(pad_batch(srcs), tgt[:, :-1], tgt[:, 1:], valid)


def collate_step(docs: Sequence[Document], t: int) -> Batch:
    """Sentence ``t`` of every document; finished documents contribute an all-pad row."""
    pairs = [(wrap(d.src[t]), wrap(d.tgt[t])) if t < len(d) else ([], []) for d in docs]
    return collate_pairs(pairs)


def sentence_pairs(docs: Sequence[Document]) -> list[tuple[list[int], list[int]]]:
    return [pair for d in docs for pair in iterate_document(d)]


def document_batches(docs: Sequence[Document], batch_size: int, rng: np.random.Generator | None = None) -> list[list[Document]]:
    """Group documents of similar length; batch order shuffled when ``rng`` is given."""
    order = sorted(range(len(docs)), key=lambda i: (len(docs[i]), i))
    batches = [[docs[i] for i in order[k:k + batch_size]] for k in range(0, len(order), batch_size)]
    if rng is not None:
        rng.shuffle(batches)
    return batches
