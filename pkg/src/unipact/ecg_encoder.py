"""Raw-waveform ECG encoder: per-lead normalisation, patching, transformer stack."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .ecg_io import EcgSignal
from .layers import Block, LayerNorm, Linear, LoraConfig
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    patch_len: int = 50
    d_ecg: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    n_leads: int = 12
    max_patches: int = 128

    def __post_init__(self):
        if self.d_ecg % self.n_heads:
            raise ValueError(f"d_ecg={self.d_ecg} is not divisible by n_heads={self.n_heads}")
        if self.patch_len <= 0 or self.n_layers <= 0:
            raise ValueError("patch_len and n_layers must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class PatchError(ValueError):
    pass


@dataclass
class EcgEmbedding:
    tokens: Tensor  # (N, d_ecg)


def _samples(sig) -> np.ndarray:
    return sig.samples if isinstance(sig, EcgSignal) else np.asarray(sig, dtype=np.float32)


def normalize_leads(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Z-score each lead over time; works on (L, C) or (B, L, C)."""
    x = np.asarray(x, dtype=np.float32)
    mu = x.mean(axis=-2, keepdims=True)
    sd = x.std(axis=-2, keepdims=True)
    return ((x - mu) / (sd + eps)).astype(np.float32)


def patchify(sig, cfg: EncoderConfig) -> np.ndarray:
    """(L, C) -> (N, patch_len*C): non-overlapping time patches, leads flattened per patch."""
    x = _samples(sig)
    if x.ndim != 2:
        raise PatchError(f"expected (L, C) samples, got shape {x.shape}")
    n, c = x.shape
    if n % cfg.patch_len:
        raise PatchError(f"signal length L={n} is not divisible by patch_len={cfg.patch_len}")
    return x.reshape(n // cfg.patch_len, cfg.patch_len * c)


def unpatchify(patches: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    n, w = patches.shape
    return patches.reshape(n * cfg.patch_len, w // cfg.patch_len)


class EcgEncoder:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_ecg
        self.patch_embed = Linear(cfg.patch_len * cfg.n_leads, d, rng, "enc.patch")
        self.pos = T.parameter(rng.normal(0.0, 0.02, (cfg.max_patches, d)), name="enc.pos")
        self.blocks = [Block(d, cfg.n_heads, cfg.ffn_mult, False, rng, f"enc.block{i}") for i in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d, "enc.ln_f")

    def prepare(self, signals) -> np.ndarray:
        """Normalise and patch a batch of raw signals -> (B, N, patch_len*C) float32."""
        xs = [_samples(s) for s in signals]
        for x in xs:
            if not np.all(np.isfinite(x)):
                raise ValueError("ECG signal contains NaN or Inf")
        x = normalize_leads(np.stack(xs))
        b, n, c = x.shape
        if c != self.cfg.n_leads:
            raise PatchError(f"expected {self.cfg.n_leads} leads, got {c}")
        if n % self.cfg.patch_len:
            raise PatchError(f"signal length L={n} is not divisible by patch_len={self.cfg.patch_len}")
        n_p = n // self.cfg.patch_len
        if n_p > self.cfg.max_patches:
            raise PatchError(f"{n_p} patches exceed max_patches={self.cfg.max_patches}")
        return x.reshape(b, n_p, self.cfg.patch_len * c)

    def forward_patches(self, patches: np.ndarray, rng: Optional[np.random.Generator] = None) -> Tensor:
        b, n, _ = patches.shape
        h = self.patch_embed(Tensor(patches))
        pos = T.take_rows(self.pos, np.broadcast_to(np.arange(n), (b, n)))
        h = T.add(h, pos)
        for blk in self.blocks:
            h = blk(h, rng)
        return self.ln_f(h)

    def encode_batch(self, signals, rng: Optional[np.random.Generator] = None) -> Tensor:
        return self.forward_patches(self.prepare(signals), rng)

    def encode(self, sig, rng: Optional[np.random.Generator] = None) -> EcgEmbedding:
        out = self.encode_batch([sig], rng)
        return EcgEmbedding(T.reshape(out, out.shape[1:]))

    def linears(self) -> list:
        return [lin for blk in self.blocks for lin in blk.linears()]

    def add_adapters(self, cfg: LoraConfig, rng: np.random.Generator) -> list:
        return [lin.add_adapter(cfg, rng) for lin in self.linears()]

    def named_parameters(self) -> Iterator:
        for p in self.patch_embed.base_parameters():
            yield p.name, p
        yield self.pos.name, self.pos
        for blk in self.blocks:
            yield from blk.named_parameters()
        for p in self.ln_f.parameters():
            yield p.name, p


def lora_wrap_encoder(encoder: EcgEncoder, lora_cfg: LoraConfig, rng: np.random.Generator) -> list:
    """Attach adapters to every attention and FFN linear map; returns the adapters."""
    return encoder.add_adapters(lora_cfg, rng)
