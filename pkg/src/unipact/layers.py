"""Parameterised building blocks: linear maps with optional LoRA, pre-norm blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class LoraRankError(ValueError):
    pass


@dataclass(frozen=True)
class LoraConfig:
    r: int = 8
    alpha: float = 16.0
    dropout: float = 0.05

    @property
    def scaling(self) -> float:
        return self.alpha / self.r


class LoraAdapter:
    """Additive low-rank branch ``(alpha / r) * B @ A`` for a (d_out, d_in) weight."""

    def __init__(self, d_in: int, d_out: int, cfg: LoraConfig, rng: np.random.Generator, name: str = ""):
        if not 0 < cfg.r < min(d_in, d_out):
            raise LoraRankError(f"LoRA rank {cfg.r} must be in (0, min({d_in}, {d_out}))")
        self.r = cfg.r
        self.alpha = cfg.alpha
        self.dropout = cfg.dropout
        # Kaiming-uniform A, zero B: the branch starts as an exact no-op
        bound = 1.0 / np.sqrt(d_in)
        self.A = T.parameter(rng.uniform(-bound, bound, (cfg.r, d_in)), name=f"{name}.lora_A")
        self.B = T.parameter(np.zeros((d_out, cfg.r)), name=f"{name}.lora_B")

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def delta_weight(self) -> np.ndarray:
        return (np.float32(self.scaling) * (self.B.data @ self.A.data)).astype(np.float32)

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        h = T.dropout(x, self.dropout, rng)
        return T.scale(T.linear(T.linear(h, self.A), self.B), self.scaling)

    def parameters(self) -> list:
        return [self.A, self.B]


def lora_linear(x: Tensor, w_base: Tensor, adapter: Optional[LoraAdapter], b_base: Optional[Tensor] = None,
                rng: Optional[np.random.Generator] = None) -> Tensor:
    """``x @ W^T (+ b) + (alpha/r) * dropout(x) @ A^T @ B^T``; dropout only when ``rng`` is given."""
    y = T.linear(x, w_base, b_base)
    if adapter is None:
        return y
    if adapter.A.shape[1] != w_base.shape[1] or adapter.B.shape[0] != w_base.shape[0]:
        raise T.ShapeError(f"adapter shapes {adapter.A.shape}/{adapter.B.shape} do not fit weight {w_base.shape}")
    return T.add(y, adapter(x, rng))


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, name: str, bias: bool = True,
                 std: float = 0.02):
        self.name = name
        self.weight = T.parameter(rng.normal(0.0, std, (d_out, d_in)), name=f"{name}.weight")
        self.bias = T.parameter(np.zeros(d_out), name=f"{name}.bias") if bias else None
        self.adapter: Optional[LoraAdapter] = None

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def add_adapter(self, cfg: LoraConfig, rng: np.random.Generator) -> LoraAdapter:
        self.adapter = LoraAdapter(self.d_in, self.d_out, cfg, rng, self.name)
        return self.adapter

    def merged_weight(self) -> np.ndarray:
        w = self.weight.data
        return w if self.adapter is None else w + self.adapter.delta_weight()

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        return lora_linear(x, self.weight, self.adapter, self.bias, rng)

    def base_parameters(self) -> list:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def adapter_parameters(self) -> list:
        return [] if self.adapter is None else self.adapter.parameters()


class LayerNorm:
    def __init__(self, d: int, name: str):
        self.gamma = T.parameter(np.ones(d), name=f"{name}.gamma")
        self.beta = T.parameter(np.zeros(d), name=f"{name}.beta")

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)

    def parameters(self) -> list:
        return [self.gamma, self.beta]


class Block:
    """Pre-norm transformer block: x + attn(LN(x)), then x + FFN(LN(x))."""

    LINEAR_NAMES = ("q", "k", "v", "o", "ff1", "ff2")

    def __init__(self, d: int, n_heads: int, ffn_mult: int, causal: bool, rng: np.random.Generator, name: str):
        if d % n_heads:
            raise ValueError(f"width {d} is not divisible by {n_heads} heads")
        self.d, self.n_heads, self.causal = d, n_heads, causal
        self.ln1 = LayerNorm(d, f"{name}.ln1")
        self.ln2 = LayerNorm(d, f"{name}.ln2")
        self.q = Linear(d, d, rng, f"{name}.q")
        self.k = Linear(d, d, rng, f"{name}.k")
        self.v = Linear(d, d, rng, f"{name}.v")
        self.o = Linear(d, d, rng, f"{name}.o")
        self.ff1 = Linear(d, ffn_mult * d, rng, f"{name}.ff1")
        self.ff2 = Linear(ffn_mult * d, d, rng, f"{name}.ff2")

    def linears(self) -> list:
        return [getattr(self, n) for n in self.LINEAR_NAMES]

    def _heads(self, x: Tensor, b: int, t: int) -> Tensor:
        return T.transpose(T.reshape(x, (b, t, self.n_heads, self.d // self.n_heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None,
                 mask: Optional[np.ndarray] = None) -> Tensor:
        """``mask`` (B, T, T) or (T, T) overrides the default causal / full pattern."""
        b, t, d = x.shape
        if mask is None and self.causal:
            mask = T.causal_mask(t)
        if mask is not None and mask.ndim == 3:
            mask = mask[:, None]
        h = self.ln1(x)
        q = self._heads(self.q(h, rng), b, t)
        k = self._heads(self.k(h, rng), b, t)
        v = self._heads(self.v(h, rng), b, t)
        a = T.attention(q, k, v, mask)
        a = T.reshape(T.transpose(a, (0, 2, 1, 3)), (b, t, d))
        x = T.add(x, self.o(a, rng))
        h = T.gelu(self.ff1(self.ln2(x), rng))
        return T.add(x, self.ff2(h, rng))

    def named_parameters(self) -> Iterator:
        for p in self.ln1.parameters() + self.ln2.parameters():
            yield p.name, p
        for lin in self.linears():
            for p in lin.base_parameters() + lin.adapter_parameters():
                yield p.name, p
