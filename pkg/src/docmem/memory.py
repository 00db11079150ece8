"""Contextual memory carried across the sentences of a document.

A memory is a ``[d_M, d_model]`` matrix per side and per memory-bearing layer.
After each sentence it is rewritten from that sentence's self-attention states
(update attention); while a sentence is processed, its states read from the
memory (output attention).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .layers import FeedForward, LayerNorm, Module, MultiHeadAttention, key_padding_mask, sinusoidal_pe
from .tensor import Tensor

SIDES = ("encoder", "decoder")
TRUNCATIONS = (0, 1, "full")


class DegenerateInputError(ValueError):
    pass


class SequencingError(RuntimeError):
    pass


@dataclass
class SentenceStates:
    states: Tensor           # [B, L, d_model]
    mask: np.ndarray         # [B, L] keep-flags
    step: int | None = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.states.shape[:2]:
            raise ValueError(f"mask shape {self.mask.shape} does not match states {self.states.shape}")


@dataclass
class MemoryState:
    M: Tensor                # [B, d_M, d_model]
    step: int
    side: str
    layer: int = -1

    @property
    def detached(self) -> bool:
        return not self.M.requires_grad


class MemoryParams(Module):
    """Learnable parts of one memory: initial value, update block, readout block."""

    def __init__(
        self,
        rng: np.random.Generator,
        mem_size: int,
        d_model: int,
        n_heads: int,
        d_ffn: int,
        activation: str = "gelu",
        zero_init_output: bool = True,
        strict_eq5: bool = False,
    ):
        if mem_size < 1:
            raise ValueError(f"memory size must be >= 1, got {mem_size}")
        self.initial = T.parameter(rng.normal(0.0, 1.0, (mem_size, d_model)))
        self.update_attn = MultiHeadAttention(rng, d_model, n_heads)
        self.update_norm1 = LayerNorm(d_model)
        self.update_ffn = FeedForward(rng, d_model, d_ffn, activation)
        self.update_norm2 = LayerNorm(d_model)
        self.output_attn = MultiHeadAttention(rng, d_model, n_heads, zero_out=zero_init_output)
        self.output_norm = None if strict_eq5 else LayerNorm(d_model)

    @property
    def mem_size(self) -> int:
        return self.initial.shape[0]

    @property
    def strict_eq5(self) -> bool:
        return self.output_norm is None


def add_memory_pe(M: Tensor) -> Tensor:
    """Add the sinusoidal table over memory rows (once per update)."""
    d_m, d = M.shape[-2:]
    return M + sinusoidal_pe(d_m, d)


def update_attention(
    params: MemoryParams,
    M: Tensor,
    h: SentenceStates,
    allow_empty: bool = False,
    drop=None,
    record: list | None = None,
) -> Tensor:
    """Memory rows query the sentence states; AddNorm, feed-forward, AddNorm.

    Output is ``[B, d_M, d_model]`` whatever the sentence length.
    """
    if not allow_empty and not h.mask.any(axis=-1).all():
        raise DegenerateInputError("update attention over a fully-masked sentence")
    drop = drop or _identity
    a = params.update_attn(M, h.states, h.states, mask=key_padding_mask(h.mask), drop=drop, record=record)
    m_tilde = params.update_norm1(M + drop(a))
    return params.update_norm2(m_tilde + drop(params.update_ffn(m_tilde, drop)))


def output_attention(
    params: MemoryParams,
    h: SentenceStates,
    M: Tensor,
    drop=None,
    record: list | None = None,
) -> SentenceStates:
    """Sentence states query the memory rows.

    Wrapped as ``LayerNorm(h + MHA(h, M, M))`` unless the params were built
    with ``strict_eq5``, in which case the bare attention output replaces ``h``.
    """
    drop = drop or _identity
    a = params.output_attn(h.states, M, M, drop=drop, record=record)
    out = a if params.strict_eq5 else params.output_norm(h.states + drop(a))
    return SentenceStates(out, h.mask, h.step)


def reset_memory(params: MemoryParams, side: str, batch: int = 1, layer: int = -1) -> MemoryState:
    """Fresh document state: the learned initial memory broadcast over the batch."""
    if side not in SIDES:
        raise ValueError(f"unknown memory side {side!r}")
    init = params.initial
    M = T.expand(T.reshape(init, (1,) + init.shape), (batch,) + init.shape)
    return MemoryState(M, 0, side, layer)


def step_memory(
    params: MemoryParams,
    mem: MemoryState,
    h: SentenceStates,
    truncation=1,
    use_pe: bool = True,
    drop=None,
    record: list | None = None,
) -> MemoryState:
    """Advance the memory by one sentence.

    ``truncation`` controls how far gradients reach back:

    * ``0`` - the returned memory is detached immediately.
    * ``1`` - the returned memory stays on the tape (so the next sentence's loss
      reaches this sentence), but the incoming memory is retired: it is used
      detached and severed in place, so nothing older is reachable. Any loss
      that depends on ``mem.M`` must be backpropagated before this call.
    * ``"full"`` - nothing is detached.

    Rows whose sentence is fully masked keep their memory unchanged.
    """
    if truncation not in TRUNCATIONS:
        raise ValueError(f"truncation must be one of {TRUNCATIONS}, got {truncation!r}")
    if h.step is not None and h.step != mem.step:
        raise SequencingError(f"memory is at step {mem.step} but the sentence states are for step {h.step}")
    if truncation == 1:
        m_in = T.detach(mem.M)
        mem.M.detach_()
    else:
        m_in = mem.M
    valid = h.mask.any(axis=-1)
    if valid.any():
        x = add_memory_pe(m_in) if use_pe else m_in
        new = update_attention(params, x, h, allow_empty=True, drop=drop, record=record)
        if not valid.all():
            new = T.where(valid[:, None, None], new, m_in)
    else:
        new = m_in
    if truncation == 0:
        new = T.detach(new)
    return replace(mem, M=new, step=mem.step + 1)


def _identity(x):
    return x
