"""Two-stage training: sentence-level pretraining, then document-level finetuning."""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import PAD, Document, collate_pairs, collate_step, document_batches, sentence_pairs
from .transformer import MemoryTransformer, ModelConfig

log = logging.getLogger(__name__)

MAGIC = b"DMTC"
VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "sentence"
    base_lr: float = 5e-4
    new_param_lr: float = 3e-4
    warmup_steps: int = 4000
    opt_window: object = 1          # int >= 1 or "full"
    patience: int = 5
    max_epochs: int = 20
    label_smoothing: float = 0.1
    seed: int = 0
    batch_size: int = 64            # sentence pairs (sentence stage) or documents (document stage)
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.98)
    adam_eps: float = 1e-8
    freeze_pretrained: bool = False
    max_steps: int | None = None
    truncation: object = None       # None -> model config

    def __post_init__(self):
        if self.stage not in ("sentence", "document"):
            raise ValueError(f"stage must be 'sentence' or 'document', got {self.stage!r}")
        if self.opt_window != "full" and int(self.opt_window) < 1:
            raise ValueError("optimization window must be >= 1")
        if self.base_lr <= 0 or self.new_param_lr <= 0:
            raise ValueError("learning rates must be positive")


def lr_at(step: int, warmup: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` at ``warmup`` then inverse-sqrt decay."""
    if step < 1:
        raise ValueError("step counts from 1")
    if warmup <= 0:
        return base_lr / math.sqrt(step)
    return base_lr * min(step / warmup, math.sqrt(warmup / step))


def sample_optimization_window(W, rng: np.random.Generator) -> int:
    """Uniform in [1, W]; ``"full"`` accumulates until the end of the document batch."""
    if W == "full":
        return np.iinfo(np.int64).max
    W = int(W)
    if W < 1:
        raise ValueError("optimization window must be >= 1")
    return int(rng.integers(1, W + 1))


class AdamW:
    """Adam with bias-corrected moments and decoupled weight decay, over parameter groups."""

    def __init__(self, groups: Sequence[dict], betas=(0.9, 0.98), eps: float = 1e-8, weight_decay: float = 0.01):
        self.groups = [dict(g) for g in groups]
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.state: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    def step(self, lr_factor: float = 1.0, grad_scale: float = 1.0):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for group in self.groups:
            lr = group["lr"] * lr_factor
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad * grad_scale
                m, v = self.state.get(id(p), (np.zeros_like(p.data), np.zeros_like(p.data)))
                m = self.b1 * m + (1 - self.b1) * g
                v = self.b2 * v + (1 - self.b2) * g * g
                self.state[id(p)] = (m, v)
                # new array, not in place: live tapes keep the values they were built with
                p.data = (p.data * (1 - lr * self.weight_decay) - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


# -- checkpoints -------------------------------------------------------------------

@dataclass
class Checkpoint:
    tensors: dict                    # name -> float32 array
    config: dict | None = None
    step: int = 0

    def model(self, **overrides) -> MemoryTransformer:
        if self.config is None:
            raise CheckpointError("checkpoint carries no config; build the model explicitly")
        cfg = ModelConfig.from_dict({**self.config, **overrides})
        m = MemoryTransformer(cfg)
        load_into(m, self)
        return m


def checkpoint_of(model: MemoryTransformer, step: int = 0) -> Checkpoint:
    tensors = {name: np.array(p.data, dtype=np.float32) for name, p in model.named_parameters()}
    return Checkpoint(tensors, model.config.to_dict(), step)


def save_checkpoint(model_or_ckpt, path, step: int | None = None) -> Checkpoint:
    ckpt = model_or_ckpt if isinstance(model_or_ckpt, Checkpoint) else checkpoint_of(model_or_ckpt)
    if step is not None:
        ckpt.step = step
    parts = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))
    Path(str(path) + ".json").write_text(json.dumps({"config": ckpt.config, "step": ckpt.step}, sort_keys=True, indent=1))
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated while reading {what}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"entry {i} name length"))
        name = take(nlen, f"entry {i} name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"entry {name!r} rank"))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, f"entry {name!r} extents"))
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(4 * n, f"entry {name!r} values"), dtype="<f4").reshape(shape)
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate entry {name!r}")
        tensors[name] = data.astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    meta_path = Path(str(path) + ".json")
    config, step = None, 0
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        config, step = meta.get("config"), int(meta.get("step", 0))
    return Checkpoint(tensors, config, step)


def load_into(model: MemoryTransformer, ckpt: Checkpoint, strict: bool = False) -> list[str]:
    """Copy matching entries into ``model``; returns names left at their initialisation.

    Shapes are validated for every entry before anything is assigned.
    """
    params = dict(model.named_parameters())
    for name, arr in ckpt.tensors.items():
        if name in params and params[name].shape != arr.shape:
            raise CheckpointError(f"entry {name!r}: checkpoint shape {arr.shape} != model shape {params[name].shape}")
        if name not in params and strict:
            raise CheckpointError(f"entry {name!r} has no matching model parameter")
    missing = [n for n in params if n not in ckpt.tensors]
    if strict and missing:
        raise CheckpointError(f"checkpoint lacks entries: {missing[:5]}")
    for name, arr in ckpt.tensors.items():
        if name in params:
            params[name].data = np.array(arr, dtype=params[name].data.dtype)
    return missing


def bootstrap_document_model(sentence_ckpt: Checkpoint, doc_config: ModelConfig) -> MemoryTransformer:
    """Memory-enabled model whose base weights come from a sentence-level checkpoint."""
    model = MemoryTransformer(doc_config)
    load_into(model, sentence_ckpt)
    return model


# -- evaluation helpers ------------------------------------------------------------

@dataclass
class TeacherForcedReport:
    loss: float
    token_accuracy: float
    pron_accuracy: float
    nonpron_accuracy: float
    pron_by_distance: dict = field(default_factory=dict)


def _pron_index(doc: Document) -> dict:
    return {(s, j): d for s, j, d in doc.ann}


def teacher_forced_eval(model: MemoryTransformer, docs: Sequence[Document], document_mode: bool = True, batch_size: int = 32) -> TeacherForcedReport:
    """Loss and argmax accuracies with gold decoder inputs (no label smoothing)."""
    was = model.training
    model.eval()
    tot_loss = tot_tok = 0.0
    hits = {"pron": [0, 0], "other": [0, 0]}
    by_dist: dict[int, list[int]] = {}
    with T.no_grad():
        for batch_docs in document_batches(docs, batch_size):
            pron = [_pron_index(d) for d in batch_docs]
            mem = model.reset_memory(len(batch_docs)) if document_mode else None
            for t in range(max(len(d) for d in batch_docs)):
                b = collate_step(batch_docs, t)
                enc = model.encode(b.src, mem)
                dec = model.decode(b.tgt_in, enc, mem)
                n = b.n_tokens
                tot_loss += T.cross_entropy(dec.logits, b.labels).item() * n
                tot_tok += n
                pred = dec.logits.data.argmax(-1)
                for i, d in enumerate(batch_docs):
                    if t >= len(d):
                        continue
                    for j in range(len(d.tgt[t])):
                        ok = int(pred[i, j] == b.labels[i, j])
                        dist = pron[i].get((t, j))
                        key = "other" if dist is None else "pron"
                        hits[key][0] += ok
                        hits[key][1] += 1
                        if dist is not None:
                            by_dist.setdefault(dist, [0, 0])
                            by_dist[dist][0] += ok
                            by_dist[dist][1] += 1
                if mem is not None:
                    mem = model.step_memory(mem, enc, dec)
    model.train(was)
    acc = lambda h: h[0] / h[1] if h[1] else float("nan")
    total = [hits["pron"][0] + hits["other"][0], hits["pron"][1] + hits["other"][1]]
    return TeacherForcedReport(
        tot_loss / max(tot_tok, 1), acc(total), acc(hits["pron"]), acc(hits["other"]),
        {d: acc(h) for d, h in sorted(by_dist.items())},
    )


# -- training loops ---------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list                    # per optimizer update: dict(step, lr, train_loss, valid_loss, pron_accuracy)
    best_valid_loss: float
    epochs: int


class _Logger:
    def __init__(self, path):
        self.rows: list[dict] = []
        self.path = path

    def add(self, **row):
        self.rows.append({"step": row["step"], "lr": row["lr"], "train_loss": row["train_loss"],
                          "valid_loss": row.get("valid_loss", ""), "pron_accuracy": row.get("pron_accuracy", "")})

    def annotate(self, **kw):
        if self.rows:
            self.rows[-1].update(kw)

    def write(self):
        if self.path is None:
            return
        with open(self.path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["step", "lr", "train_loss", "valid_loss", "pron_accuracy"])
            w.writeheader()
            w.writerows(self.rows)


def _check_finite(loss: float, step: int, lr: float):
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"loss became {loss} at update {step} (lr={lr:.3g}); lower the learning rate or check the data")


def _snapshot(model) -> list[np.ndarray]:
    return [p.data for p in model.parameters()]


def _restore(model, snap):
    for p, d in zip(model.parameters(), snap):
        p.data = d


def sentence_pretrain(
    model: MemoryTransformer,
    train_docs: Sequence[Document],
    valid_docs: Sequence[Document],
    cfg: TrainConfig,
    log_path=None,
) -> TrainResult:
    """Cross-entropy on shuffled sentence pairs, early-stopped on validation loss."""
    if cfg.stage != "sentence":
        raise ValueError("sentence_pretrain needs cfg.stage == 'sentence'")
    if model.config.mem_side != "none":
        raise ValueError("sentence pretraining runs on the memory-free model (mem_side='none')")
    rng = np.random.default_rng(cfg.seed)
    pairs = sentence_pairs(train_docs)
    opt = AdamW([{"params": model.parameters(), "lr": cfg.base_lr}], cfg.betas, cfg.adam_eps, cfg.weight_decay)
    logger = _Logger(log_path)
    best, best_snap, bad, epoch = math.inf, _snapshot(model), 0, 0
    model.train()
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(pairs))
        for k in range(0, len(order), cfg.batch_size):
            b = collate_pairs([pairs[i] for i in order[k:k + cfg.batch_size]])
            enc = model.encode(b.src)
            loss = T.cross_entropy(model.decode(b.tgt_in, enc).logits, b.labels, label_smoothing=cfg.label_smoothing)
            loss.backward()
            lr = lr_at(opt.t + 1, cfg.warmup_steps, cfg.base_lr)
            _check_finite(loss.item(), opt.t + 1, lr)
            opt.step(lr / cfg.base_lr)
            opt.zero_grad()
            logger.add(step=opt.t, lr=lr, train_loss=loss.item())
            if cfg.max_steps and opt.t >= cfg.max_steps:
                break
        rep = teacher_forced_eval(model, valid_docs, document_mode=False)
        logger.annotate(valid_loss=rep.loss, pron_accuracy=rep.pron_accuracy)
        log.info("sentence epoch %d: valid loss %.4f acc %.4f", epoch, rep.loss, rep.token_accuracy)
        if rep.loss < best:
            best, best_snap, bad = rep.loss, _snapshot(model), 0
        else:
            bad += 1
        if bad >= cfg.patience or (cfg.max_steps and opt.t >= cfg.max_steps):
            break
    _restore(model, best_snap)
    logger.write()
    return TrainResult(checkpoint_of(model, opt.t), logger.rows, best, epoch)


def document_pass(
    model: MemoryTransformer,
    docs: Sequence[Document],
    cfg: TrainConfig,
    opt: AdamW | None,
    rng: np.random.Generator,
    state: dict,
    logger: _Logger | None = None,
):
    """Run one batch of documents sentence by sentence, training as it goes.

    Each sentence loss is backpropagated before the memory advances. Updates
    fire after a sampled number of sentence steps; the accumulated gradient is
    averaged over that count.
    """
    truncation = model.config.truncation if cfg.truncation is None else cfg.truncation
    mem = model.reset_memory(len(docs))
    for t in range(max(len(d) for d in docs)):
        b = collate_step(docs, t)
        enc = model.encode(b.src, mem)
        dec = model.decode(b.tgt_in, enc, mem)
        loss = T.cross_entropy(dec.logits, b.labels, label_smoothing=cfg.label_smoothing)
        loss.backward()
        state["losses"].append(loss.item())
        state["count"] += 1
        if state["count"] >= state["target"]:
            _apply_update(model, cfg, opt, rng, state, logger)
        mem = model.step_memory(mem, enc, dec, truncation)
        if cfg.max_steps and opt is not None and opt.t >= cfg.max_steps:
            break
    if state["count"]:
        _apply_update(model, cfg, opt, rng, state, logger)


def _apply_update(model, cfg, opt, rng, state, logger):
    n = state["count"]
    mean_loss = float(np.mean(state["losses"]))
    step = opt.t + 1
    lr_new = lr_at(step, cfg.warmup_steps, cfg.new_param_lr)
    _check_finite(mean_loss, step, lr_new)
    opt.step(lr_new / cfg.new_param_lr, grad_scale=1.0 / n)
    opt.zero_grad()
    model.zero_grad()
    if logger is not None:
        logger.add(step=opt.t, lr=lr_new, train_loss=mean_loss)
    state.update(count=0, losses=[], target=sample_optimization_window(cfg.opt_window, rng))


def make_document_optimizer(model: MemoryTransformer, cfg: TrainConfig) -> AdamW:
    """Memory parameters at ``new_param_lr``; pretrained ones at ``base_lr`` (or frozen)."""
    groups = [{"params": model.memory_parameters(), "lr": cfg.new_param_lr}]
    if not cfg.freeze_pretrained:
        # both groups share the schedule shape; lr_factor is relative to new_param_lr
        groups.append({"params": model.base_parameters(), "lr": cfg.base_lr})
    return AdamW(groups, cfg.betas, cfg.adam_eps, cfg.weight_decay)


def document_finetune(
    model: MemoryTransformer,
    train_docs: Sequence[Document],
    valid_docs: Sequence[Document],
    cfg: TrainConfig,
    log_path=None,
) -> TrainResult:
    """Document-order training with memory carried across sentences.

    ``model`` is normally built by :func:`bootstrap_document_model`. Early
    stopping tracks the document-mode validation loss.
    """
    if cfg.stage != "document":
        raise ValueError("document_finetune needs cfg.stage == 'document'")
    rng = np.random.default_rng(cfg.seed)
    opt = make_document_optimizer(model, cfg)
    logger = _Logger(log_path)
    state = {"count": 0, "losses": [], "target": sample_optimization_window(cfg.opt_window, rng)}
    best, best_snap, bad, epoch = math.inf, _snapshot(model), 0, 0
    model.train()
    for epoch in range(1, cfg.max_epochs + 1):
        for batch_docs in document_batches(train_docs, cfg.batch_size, rng):
            document_pass(model, batch_docs, cfg, opt, rng, state, logger)
            if cfg.max_steps and opt.t >= cfg.max_steps:
                break
        rep = teacher_forced_eval(model, valid_docs, document_mode=True) if valid_docs else None
        if rep is not None:
            logger.annotate(valid_loss=rep.loss, pron_accuracy=rep.pron_accuracy)
            log.info("document epoch %d: valid loss %.4f pron acc %.4f", epoch, rep.loss, rep.pron_accuracy)
            if rep.loss < best:
                best, best_snap, bad = rep.loss, _snapshot(model), 0
            else:
                bad += 1
        else:
            best_snap = _snapshot(model)
        if bad >= cfg.patience or (cfg.max_steps and opt.t >= cfg.max_steps):
            break
    _restore(model, best_snap)
    logger.write()
    return TrainResult(checkpoint_of(model, opt.t), logger.rows, best, epoch)


def document_loss(model: MemoryTransformer, doc: Document, truncation=None, label_smoothing: float = 0.0) -> tuple[T.Tensor, list[T.Tensor]]:
    """Sum of per-sentence losses over one document's memory trajectory (forward only)."""
    mem = model.reset_memory(1)
    losses = []
    for t in range(len(doc)):
        b = collate_step([doc], t)
        enc = model.encode(b.src, mem)
        dec = model.decode(b.tgt_in, enc, mem)
        losses.append(T.cross_entropy(dec.logits, b.labels, label_smoothing=label_smoothing))
        mem = model.step_memory(mem, enc, dec, truncation if truncation is not None else "full")
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return total, losses


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    if "betas" in d:
        d["betas"] = list(d["betas"])
    return d
