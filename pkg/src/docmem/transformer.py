"""Encoder-decoder Transformer with optional contextual memory on chosen layers."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .layers import FeedForward, LayerNorm, Module, MultiHeadAttention, causal_mask, key_padding_mask, sinusoidal_pe
from .memory import (
    MemoryParams,
    MemoryState,
    SentenceStates,
    output_attention,
    reset_memory,
    step_memory,
)
from .tensor import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3

MEM_SIDES = ("source", "target", "both", "none")
_SIDE_ALIASES = {"src": "source", "tgt": "target"}


class VocabularyError(ValueError):
    pass


def parse_truncation(value):
    if value in (0, 1, "full"):
        return value
    text = str(value).strip().lower()
    if text in ("full", "inf", "none"):
        return "full"
    if text in ("0", "1"):
        return int(text)
    raise ValueError(f"truncation window must be 0, 1 or 'full', got {value!r}")


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    vocab_size: int = 128
    max_sentence_len: int = 64
    dropout_rate: float = 0.1
    mem_size: int = 8
    mem_side: str = "both"
    mem_layers: tuple = field(default=None)
    truncation: object = 1
    seed: int = 0
    strict_eq5: bool = False
    mem_pe: bool = True
    activation: str = "gelu"
    zero_init_output: bool = True

    def __post_init__(self):
        self.mem_side = _SIDE_ALIASES.get(self.mem_side, self.mem_side)
        if self.mem_side not in MEM_SIDES:
            raise ValueError(f"mem_side must be one of {MEM_SIDES}, got {self.mem_side!r}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal encodings")
        if self.mem_size < 1:
            raise ValueError(f"mem_size must be >= 1, got {self.mem_size}")
        if self.mem_layers is None:
            self.mem_layers = (self.n_layers - 1,)
        self.mem_layers = tuple(sorted({int(x) for x in self.mem_layers}))
        if any(not 0 <= x < self.n_layers for x in self.mem_layers):
            raise ValueError(f"mem_layers {self.mem_layers} outside [0, {self.n_layers})")
        self.truncation = parse_truncation(self.truncation)

    @property
    def encoder_memory(self) -> bool:
        return self.mem_side in ("source", "both")

    @property
    def decoder_memory(self) -> bool:
        return self.mem_side in ("target", "both")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mem_layers"] = list(self.mem_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class EncoderOutput:
    out: SentenceStates
    mem_inputs: dict      # layer -> SentenceStates fed to the memory update


@dataclass
class DecoderOutput:
    logits: Tensor
    mem_inputs: dict


@dataclass
class DocumentMemory:
    encoder: dict         # layer -> MemoryState
    decoder: dict
    step: int = 0

    def states(self):
        return list(self.encoder.values()) + list(self.decoder.values())


class _Dropout:
    def __init__(self, p: float, rng: np.random.Generator, training: bool):
        self.p, self.rng, self.training = p, rng, training

    def __call__(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.p, self.rng, self.training)


class EncoderLayer(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.self_attn = MultiHeadAttention(rng, cfg.d_model, cfg.n_heads)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(rng, cfg.d_model, cfg.d_ffn, cfg.activation)
        self.norm2 = LayerNorm(cfg.d_model)

    def __call__(self, x: Tensor, mask: np.ndarray, drop, mem=None, mem_params=None, step=None, record=None):
        a = self.self_attn(x, x, x, mask=key_padding_mask(mask), drop=drop)
        h = SentenceStates(self.norm1(x + drop(a)), mask, step)
        y = h
        if mem is not None and mem_params is not None:
            y = output_attention(mem_params, h, mem, drop=drop, record=record)
        z = y.states
        return self.norm2(z + drop(self.ffn(z, drop))), h


class DecoderLayer(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.self_attn = MultiHeadAttention(rng, cfg.d_model, cfg.n_heads)
        self.norm1 = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(rng, cfg.d_model, cfg.n_heads)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(rng, cfg.d_model, cfg.d_ffn, cfg.activation)
        self.norm3 = LayerNorm(cfg.d_model)

    def _rest(self, h: SentenceStates, enc_kv, enc_mask, drop, mem, mem_params, record, mem_kv=None):
        y = h
        if mem_params is not None and (mem is not None or mem_kv is not None):
            if mem_kv is None:
                y = output_attention(mem_params, h, mem, drop=drop, record=record)
            else:
                a = mem_params.output_attn.attend(h.states, *mem_kv, drop=drop, record=record)
                y = SentenceStates(a if mem_params.strict_eq5 else mem_params.output_norm(h.states + drop(a)), h.mask, h.step)
        z = y.states
        c = self.cross_attn.attend(z, *enc_kv, mask=key_padding_mask(enc_mask), drop=drop)
        z = self.norm2(z + drop(c))
        return self.norm3(z + drop(self.ffn(z, drop)))

    def __call__(self, y: Tensor, mask: np.ndarray, enc: SentenceStates, drop, mem=None, mem_params=None, step=None, record=None):
        L = y.shape[1]
        self_mask = causal_mask(L)[None, None] & key_padding_mask(mask)
        a = self.self_attn(y, y, y, mask=self_mask, drop=drop)
        h = SentenceStates(self.norm1(y + drop(a)), mask, step)
        enc_kv = self.cross_attn.project_kv(enc.states, enc.states)
        return self._rest(h, enc_kv, enc.mask, drop, mem, mem_params, record), h

    def step(self, y: Tensor, cache: dict, drop):
        """One-position incremental pass; ``cache`` holds projected keys/values."""
        k, v = self.self_attn.project_kv(y, y)
        if "k" in cache:
            k = T.concat([cache["k"], k], axis=2)
            v = T.concat([cache["v"], v], axis=2)
        cache["k"], cache["v"] = k, v
        a = self.self_attn.attend(y, k, v, drop=drop)
        h = SentenceStates(self.norm1(y + drop(a)), np.ones(y.shape[:2], dtype=bool))
        return self._rest(h, cache["enc_kv"], cache["enc_mask"], drop, None, cache.get("mem_params"), None, cache.get("mem_kv"))


class MemoryTransformer(Module):
    """Shared-embedding encoder-decoder; ``mem_side='none'`` is the sentence-level baseline.

    Base parameters and memory parameters draw from separate random streams, so
    configs that differ only in memory settings share identical base weights.
    """

    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        self.embedding = T.parameter(rng.normal(0.0, d ** -0.5, (cfg.vocab_size, d)))
        self.enc_layers = [EncoderLayer(rng, cfg) for _ in range(cfg.n_layers)]
        self.dec_layers = [DecoderLayer(rng, cfg) for _ in range(cfg.n_layers)]
        mem_rng = np.random.default_rng([cfg.seed, 1])

        def make():
            return MemoryParams(
                mem_rng, cfg.mem_size, d, cfg.n_heads, cfg.d_ffn, cfg.activation,
                zero_init_output=cfg.zero_init_output, strict_eq5=cfg.strict_eq5,
            )

        self.enc_memory = {l: make() for l in cfg.mem_layers} if cfg.encoder_memory else {}
        self.dec_memory = {l: make() for l in cfg.mem_layers} if cfg.decoder_memory else {}
        self.dropout_rng = np.random.default_rng([cfg.seed, 2])
        self.attention_log: list | None = None
        self.lookup_log: list | None = None

    # -- parameter groups ------------------------------------------------
    def memory_parameters(self) -> list[Tensor]:
        return [p for m in (*self.enc_memory.values(), *self.dec_memory.values()) for p in m.parameters()]

    def base_parameters(self) -> list[Tensor]:
        mem = {id(p) for p in self.memory_parameters()}
        return [p for p in self.parameters() if id(p) not in mem]

    # -- helpers -----------------------------------------------------------
    def _drop(self) -> _Dropout:
        return _Dropout(self.config.dropout_rate, self.dropout_rng, self.training)

    def _check_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            bad = ids[(ids < 0) | (ids >= self.config.vocab_size)][0]
            raise VocabularyError(f"token id {bad} outside vocabulary of size {self.config.vocab_size}")
        if ids.shape[1] > self.config.max_sentence_len:
            raise ValueError(f"sentence length {ids.shape[1]} exceeds max_sentence_len {self.config.max_sentence_len}")
        return ids

    def embed(self, ids: np.ndarray, drop, offset: int = 0, tag: str = "") -> Tensor:
        e = T.embedding(self.embedding, ids)
        if self.lookup_log is not None:
            self.lookup_log.append((tag, e, ids))
        L = ids.shape[1]
        x = e * math.sqrt(self.config.d_model) + sinusoidal_pe(offset + L, self.config.d_model)[offset:]
        return drop(x)

    def _recorder(self, side: str, layer: int, kind: str, step):
        if self.attention_log is None:
            return None
        log = self.attention_log

        class _R(list):
            def append(self, w):
                log.append({"side": side, "layer": layer, "kind": kind, "step": step, "weights": w})

        return _R()

    # -- forward -----------------------------------------------------------
    def encode(self, src, memory: DocumentMemory | None = None, mask=None) -> EncoderOutput:
        ids = self._check_ids(src)
        mask = ids != PAD if mask is None else np.asarray(mask, dtype=bool).reshape(ids.shape)
        drop = self._drop()
        step = memory.step if memory is not None else None
        x = self.embed(ids, drop, tag="src")
        mem_inputs = {}
        for l, layer in enumerate(self.enc_layers):
            params = self.enc_memory.get(l)
            mem = memory.encoder[l].M if memory is not None and l in memory.encoder else None
            rec = self._recorder("encoder", l, "output", step) if mem is not None else None
            x, h = layer(x, mask, drop, mem, params, step, rec)
            if params is not None:
                mem_inputs[l] = h
        return EncoderOutput(SentenceStates(x, mask, step), mem_inputs)

    def decode(self, tgt_in, enc: EncoderOutput, memory: DocumentMemory | None = None, mask=None) -> DecoderOutput:
        ids = self._check_ids(tgt_in)
        mask = ids != PAD if mask is None else np.asarray(mask, dtype=bool).reshape(ids.shape)
        drop = self._drop()
        step = memory.step if memory is not None else None
        y = self.embed(ids, drop, tag="tgt")
        mem_inputs = {}
        for l, layer in enumerate(self.dec_layers):
            params = self.dec_memory.get(l)
            mem = memory.decoder[l].M if memory is not None and l in memory.decoder else None
            rec = self._recorder("decoder", l, "output", step) if mem is not None else None
            y, h = layer(y, mask, enc.out, drop, mem, params, step, rec)
            if params is not None:
                mem_inputs[l] = h
        return DecoderOutput(y @ self.embedding.swapaxes(0, 1), mem_inputs)

    # -- incremental decoding ----------------------------------------------
    def init_cache(self, enc: EncoderOutput, memory: DocumentMemory | None = None) -> dict:
        caches = []
        for l, layer in enumerate(self.dec_layers):
            c = {"enc_kv": layer.cross_attn.project_kv(enc.out.states, enc.out.states), "enc_mask": enc.out.mask}
            params = self.dec_memory.get(l)
            if params is not None and memory is not None and l in memory.decoder:
                M = memory.decoder[l].M
                c["mem_params"] = params
                c["mem_kv"] = params.output_attn.project_kv(M, M)
            caches.append(c)
        return {"layers": caches, "pos": 0}

    def decode_step(self, tokens, cache: dict) -> Tensor:
        """Logits ``[B, V]`` for the next position given one new token per row."""
        ids = self._check_ids(np.asarray(tokens).reshape(-1, 1))
        drop = self._drop()
        pos = cache["pos"]
        if pos >= self.config.max_sentence_len:
            raise ValueError(f"decoding past max_sentence_len {self.config.max_sentence_len}")
        y = self.embed(ids, drop, offset=pos, tag="step")
        for layer, c in zip(self.dec_layers, cache["layers"]):
            y = layer.step(y, c, drop)
        cache["pos"] = pos + 1
        return (y @ self.embedding.swapaxes(0, 1)).reshape(ids.shape[0], -1)

    @staticmethod
    def reorder_cache(cache: dict, index: np.ndarray) -> dict:
        """Select batch rows of a cache (beam reordering)."""
        index = np.asarray(index)
        layers = []
        for c in cache["layers"]:
            nc = dict(c)
            for key in ("k", "v"):
                if key in c:
                    nc[key] = T.Tensor(c[key].data[index])
            # batch-1 encoder/memory projections broadcast over rows and are kept as is
            if c["enc_kv"][0].shape[0] > 1:
                nc["enc_kv"] = tuple(T.Tensor(t.data[index]) for t in c["enc_kv"])
                nc["enc_mask"] = c["enc_mask"][index]
            if "mem_kv" in c and c["mem_kv"][0].shape[0] > 1:
                nc["mem_kv"] = tuple(T.Tensor(t.data[index]) for t in c["mem_kv"])
            layers.append(nc)
        return {"layers": layers, "pos": cache["pos"]}

    # -- memory lifecycle --------------------------------------------------
    def reset_memory(self, batch: int = 1) -> DocumentMemory:
        enc = {l: reset_memory(p, "encoder", batch, l) for l, p in self.enc_memory.items()}
        dec = {l: reset_memory(p, "decoder", batch, l) for l, p in self.dec_memory.items()}
        return DocumentMemory(enc, dec, 0)

    def step_memory(self, memory: DocumentMemory, enc: EncoderOutput, dec: DecoderOutput | None, truncation=None) -> DocumentMemory:
        """Update every memory from the finished sentence's self-attention states."""
        g = self.config.truncation if truncation is None else parse_truncation(truncation)
        drop = self._drop()
        new_enc = {}
        for l, state in memory.encoder.items():
            rec = self._recorder("encoder", l, "update", memory.step)
            new_enc[l] = step_memory(self.enc_memory[l], state, enc.mem_inputs[l], g, self.config.mem_pe, drop, rec)
        new_dec = {}
        for l, state in memory.decoder.items():
            if dec is None:
                raise ValueError("decoder memory update needs decoder states")
            rec = self._recorder("decoder", l, "update", memory.step)
            new_dec[l] = step_memory(self.dec_memory[l], state, dec.mem_inputs[l], g, self.config.mem_pe, drop, rec)
        return DocumentMemory(new_enc, new_dec, memory.step + 1)


def encoder_forward(model: MemoryTransformer, tokens, mem: DocumentMemory | None = None) -> SentenceStates:
    return model.encode(tokens, mem).out


def decoder_forward(model: MemoryTransformer, tokens, enc: EncoderOutput, mem: DocumentMemory | None = None) -> Tensor:
    return model.decode(tokens, enc, mem).logits


def memory_footprint(memory: DocumentMemory) -> int:
    """Number of values carried between sentences."""
    return sum(s.M.size for s in memory.states())


__all__ = [
    "PAD", "BOS", "EOS", "UNK", "ModelConfig", "MemoryTransformer", "DocumentMemory", "EncoderOutput",
    "DecoderOutput", "VocabularyError", "encoder_forward", "decoder_forward", "memory_footprint", "MemoryState",
]
