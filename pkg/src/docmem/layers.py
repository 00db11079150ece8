"""Neural building blocks on top of :mod:`docmem.tensor`."""
from __future__ import annotations

import math
from functools import lru_cache
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container; parameters are discovered from instance attributes."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            for child in _children(value):
                yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _children(value) -> Iterator[Module]:
    if isinstance(value, Module):
        yield value
    elif isinstance(value, (list, tuple)):
        for v in value:
            yield from _children(v)
    elif isinstance(value, dict):
        for v in value.values():
            yield from _children(v)


def _walk(value, name: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k in sorted(value, key=str):
            yield from _walk(value[k], f"{name}.{k}")


def xavier(rng: np.random.Generator, n_in: int, n_out: int) -> Tensor:
    bound = math.sqrt(6.0 / (n_in + n_out))
    return T.parameter(rng.uniform(-bound, bound, (n_in, n_out)))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, zero_init: bool = False):
        self.weight = T.parameter(np.zeros((d_in, d_out))) if zero_init else xavier(rng, d_in, d_out)
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        if eps <= 0:
            raise ValueError(f"layer norm eps must be positive, got {eps}")
        self.gamma = T.parameter(np.ones(d))
        self.beta = T.parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


ACTIVATIONS = {"relu": T.relu, "gelu": T.gelu}


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, d_model: int, d_ffn: int, activation: str = "gelu"):
        self.fc1 = Linear(rng, d_model, d_ffn)
        self.fc2 = Linear(rng, d_ffn, d_model)
        self.activation = activation

    def __call__(self, x: Tensor, drop=None) -> Tensor:
        h = ACTIVATIONS[self.activation](self.fc1(x))
        if drop is not None:
            h = drop(h)
        return self.fc2(h)


@lru_cache(maxsize=32)
def _pe_table(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.empty((length, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    pe.flags.writeable = False
    return pe


def sinusoidal_pe(length: int, d_model: int) -> np.ndarray:
    """PE[p, 2i] = sin(p / 10000^(2i/d)), PE[p, 2i+1] = cos(same)."""
    if d_model % 2:
        raise ValueError(f"sinusoidal encoding needs an even d_model, got {d_model}")
    return _pe_table(length, d_model).astype(T.get_default_dtype())


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``n_heads`` subspaces, heads concatenated then projected.

    ``mask`` is a boolean array broadcastable to ``[B, H, Lq, Lk]``; False marks
    positions that receive zero weight. When ``record`` is a list, head weights
    ``[B, H, Lq, Lk]`` are appended to it.
    """

    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int, zero_out: bool = False):
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} is not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.w_q = xavier(rng, d_model, d_model)
        self.w_k = xavier(rng, d_model, d_model)
        self.w_v = xavier(rng, d_model, d_model)
        self.w_o = T.parameter(np.zeros((d_model, d_model))) if zero_out else xavier(rng, d_model, d_model)

    def _split(self, x: Tensor) -> Tensor:
        B, L, _ = x.shape
        return x.reshape(B, L, self.n_heads, self.d_head).transpose(0, 2, 1, 3)

    def project_kv(self, k_in: Tensor, v_in: Tensor) -> tuple[Tensor, Tensor]:
        return self._split(k_in @ self.w_k), self._split(v_in @ self.w_v)

    def attend(self, q_in: Tensor, k: Tensor, v: Tensor, mask=None, drop=None, record: list | None = None) -> Tensor:
        B, Lq, d = q_in.shape
        q = self._split(q_in @ self.w_q)
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.d_head))
        if mask is not None and np.shape(mask)[-1] != k.shape[-2]:
            raise ValueError(f"attention mask covers {np.shape(mask)[-1]} keys but there are {k.shape[-2]}")
        w = T.softmax(scores, axis=-1, mask=mask)
        if record is not None:
            record.append(w.data)
        if drop is not None:
            w = drop(w)
        ctx = (w @ v).transpose(0, 2, 1, 3).reshape(B, Lq, d)
        return ctx @ self.w_o

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor, mask=None, drop=None, record=None) -> Tensor:
        if q_in.shape[-1] != k_in.shape[-1] or k_in.shape[:-1] != v_in.shape[:-1]:
            raise ValueError(f"attention shape mismatch: q {q_in.shape}, k {k_in.shape}, v {v_in.shape}")
        k, v = self.project_kv(k_in, v_in)
        return self.attend(q_in, k, v, mask=mask, drop=drop, record=record)


def multi_head_attention(q, k, v, mask, weights: MultiHeadAttention, record=None) -> Tensor:
    """Functional alias: ``weights`` carries the projection set."""
    return weights(q, k, v, mask=mask, record=record)


def key_padding_mask(keep: np.ndarray) -> np.ndarray:
    """[B, Lk] keep-flags -> [B, 1, 1, Lk] attention mask."""
    return np.asarray(keep, dtype=bool)[:, None, None, :]


def causal_mask(length: int, offset: int = 0) -> np.ndarray:
    """[Lq, Lk] lower-triangular mask for queries at ``offset .. offset+length``."""
    q = np.arange(offset, offset + length)[:, None]
    k = np.arange(offset + length)[None, :]
    return k <= q
