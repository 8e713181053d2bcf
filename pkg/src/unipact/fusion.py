"""ECG-to-text fusion: projector, unified input sequence, causal decoder, answer scoring."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .ecg_encoder import EcgEmbedding, EcgEncoder, EncoderConfig
from .layers import Block, LayerNorm, Linear, LoraConfig
from .tensor import Tensor
from .tokenizer import Vocab, decode

SEGMENTS = ("ecg", "prompt", "question", "answer")


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int = 1024
    d_llm: int = 128
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    max_len: int = 256

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ProjectorConfig:
    d_in: int = 64
    d_hidden: int = 128
    d_out: int = 128


class Projector:
    """Two-layer MLP with a GELU between, applied row-wise."""

    def __init__(self, cfg: ProjectorConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.l1 = Linear(cfg.d_in, cfg.d_hidden, rng, "proj.l1", std=1.0 / math.sqrt(cfg.d_in))
        self.l2 = Linear(cfg.d_hidden, cfg.d_out, rng, "proj.l2", std=1.0 / math.sqrt(cfg.d_hidden))

    def __call__(self, h: Tensor) -> Tensor:
        if h.shape[-1] != self.cfg.d_in:
            raise T.ShapeError(f"projector expects width {self.cfg.d_in}, got {h.shape[-1]}")
        return self.l2(T.gelu(self.l1(h)))

    def parameters(self) -> list:
        return self.l1.base_parameters() + self.l2.base_parameters()

    def named_parameters(self) -> Iterator:
        for p in self.parameters():
            yield p.name, p


def project(h, p: Projector) -> Tensor:
    """Map (N, d_ecg) encoder tokens to (N, d_llm)."""
    tokens = h.tokens if isinstance(h, EcgEmbedding) else h
    return p(tokens)


class Decoder:
    """Causal pre-norm transformer with an output head tied to the token embedding."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_llm
        self.tok_emb = T.parameter(rng.normal(0.0, 0.02, (cfg.vocab_size, d)), name="dec.tok_emb")
        self.pos = T.parameter(rng.normal(0.0, 0.02, (cfg.max_len, d)), name="dec.pos")
        self.blocks = [Block(d, cfg.n_heads, cfg.ffn_mult, True, rng, f"dec.block{i}") for i in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d, "dec.ln_f")

    def embed(self, ids) -> Tensor:
        return T.embedding(self.tok_emb, np.asarray(ids, dtype=np.int64))

    def hidden(self, x: Tensor, rng: Optional[np.random.Generator] = None, positions: Optional[np.ndarray] = None,
               mask: Optional[np.ndarray] = None) -> Tensor:
        """(B, T, d) input embeddings -> (B, T, d) final-block states (before ln_f).

        ``positions`` (B, T) defaults to 0..T-1 per row and ``mask``
        (B, T, T) to the causal pattern.
        """
        b, t, _ = x.shape
        if positions is None:
            if t > self.cfg.max_len:
                raise T.ShapeError(f"sequence length {t} exceeds max_len={self.cfg.max_len}")
            positions = np.broadcast_to(np.arange(t), (b, t))
        elif positions.max(initial=0) >= self.cfg.max_len:
            raise T.ShapeError(f"position {positions.max()} exceeds max_len={self.cfg.max_len}")
        h = T.add(x, T.take_rows(self.pos, positions))
        for blk in self.blocks:
            h = blk(h, rng, mask)
        return h

    def head(self, h: Tensor) -> Tensor:
        return T.linear(self.ln_f(h), self.tok_emb)

    def linears(self) -> list:
        return [lin for blk in self.blocks for lin in blk.linears()]

    def named_parameters(self) -> Iterator:
        yield self.tok_emb.name, self.tok_emb
        yield self.pos.name, self.pos
        for blk in self.blocks:
            yield from blk.named_parameters()
        for p in self.ln_f.parameters():
            yield p.name, p


@dataclass
class FusedInput:
    embeddings: Tensor  # (N + M, d_llm)
    segments: list  # one tag per position
    answer_start: int
    token_ids: list = field(default_factory=list)  # text ids, aligned after the ECG rows

    @property
    def n_ecg(self) -> int:
        return sum(1 for s in self.segments if s == "ecg")

    def __len__(self) -> int:
        return len(self.segments)


def assemble_input(ecg: Optional[Tensor], prompt_ids, question_ids, answer_ids, dec: Decoder) -> FusedInput:
    """Concatenate [projected ECG rows | prompt | question | answer] embeddings."""
    text_ids = list(prompt_ids) + list(question_ids) + list(answer_ids)
    segments = (["prompt"] * len(prompt_ids) + ["question"] * len(question_ids)
                + ["answer"] * len(answer_ids))
    parts = []
    if ecg is not None and ecg.shape[0] > 0:
        if ecg.ndim != 2 or ecg.shape[1] != dec.cfg.d_llm:
            raise T.ShapeError(f"ECG rows must be (N, {dec.cfg.d_llm}), got {ecg.shape}")
        parts.append(ecg)
        segments = ["ecg"] * ecg.shape[0] + segments
    if text_ids:
        parts.append(dec.embed(text_ids))
    emb = T.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    answer_start = len(segments) - len(answer_ids)
    return FusedInput(emb, segments, answer_start, text_ids)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    d_proj_hidden: Optional[int] = None  # defaults to d_llm

    def projector(self) -> ProjectorConfig:
        d = self.decoder.d_llm
        return ProjectorConfig(self.encoder.d_ecg, self.d_proj_hidden or d, d)

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "decoder": self.decoder.to_dict(),
            "d_proj_hidden": self.d_proj_hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(EncoderConfig(**d["encoder"]), DecoderConfig(**d["decoder"]), d.get("d_proj_hidden"))


class FusionModel:
    """Encoder + projector + decoder, with optional LoRA adapters on both stacks."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 11])
        self.encoder = EcgEncoder(cfg.encoder, rng)
        self.projector = Projector(cfg.projector(), rng)
        self.decoder = Decoder(cfg.decoder, rng)
        self.lora: Optional[LoraConfig] = None
        self.stages: list = []  # training stages completed, in order

    # -- adapters -----------------------------------------------------------
    def add_lora(self, lora: LoraConfig, seed: int = 0) -> list:
        if self.lora is not None:
            raise RuntimeError("LoRA adapters are already attached")
        rng = np.random.default_rng([seed, 13])
        adapters = [lin.add_adapter(lora, rng) for lin in self.encoder.linears() + self.decoder.linears()]
        self.lora = lora
        return adapters

    def adapters(self) -> list:
        return [lin.adapter for lin in self.encoder.linears() + self.decoder.linears() if lin.adapter is not None]

    # -- parameter groups -----------------------------------------------------
    def named_parameters(self) -> Iterator:
        yield from self.encoder.named_parameters()
        yield from self.projector.named_parameters()
        yield from self.decoder.named_parameters()

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state(self) -> dict:
        return {n: p.data for n, p in self.named_parameters()}

    def adapter_parameters(self) -> list:
        return [p for a in self.adapters() for p in a.parameters()]

    def base_parameters(self) -> list:
        ad = {id(p) for p in self.adapter_parameters()}
        proj = {id(p) for p in self.projector.parameters()}
        return [p for p in self.parameters() if id(p) not in ad and id(p) not in proj]

    def set_trainable(self, params: Sequence[Tensor]) -> None:
        keep = {id(p) for p in params}
        for p in self.parameters():
            p.requires_grad = id(p) in keep
            p.grad = None

    # -- forward paths ----------------------------------------------------------
    def ecg_rows(self, signals, rng: Optional[np.random.Generator] = None) -> Tensor:
        """(B, N, d_llm) projected ECG tokens for a batch of raw signals."""
        return self.projector(self.encoder.encode_batch(signals, rng))

    def ecg_rows_from_patches(self, patches: np.ndarray, rng: Optional[np.random.Generator] = None) -> Tensor:
        return self.projector(self.encoder.forward_patches(patches, rng))

    def assemble(self, signal, prompt_ids, question_ids, answer_ids=()) -> FusedInput:
        ecg = None
        if signal is not None:
            rows = self.ecg_rows([signal])
            ecg = T.reshape(rows, rows.shape[1:])
        return assemble_input(ecg, prompt_ids, question_ids, answer_ids, self.decoder)


def forward_logits(f: FusedInput, model: FusionModel, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Causal logits (seq_len, V) for one fused sequence."""
    x = T.reshape(f.embeddings, (1,) + f.embeddings.shape)
    h = model.decoder.hidden(x, rng)
    logits = model.decoder.head(h)
    return T.reshape(logits, logits.shape[1:])


def yes_no_probability(z_yes, z_no):
    """Two-way renormalised P(Yes) = exp(z_yes) / (exp(z_yes) + exp(z_no))."""
    d = np.asarray(z_yes, dtype=np.float64) - np.asarray(z_no, dtype=np.float64)
    # numerically stable logistic
    return np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))


def answer_position(f: FusedInput) -> int:
    """Index of the position whose logits predict the first answer token."""
    return (f.answer_start if f.answer_start < len(f) else len(f)) - 1


def answer_score(f: FusedInput, model: FusionModel, vocab: Vocab) -> float:
    with T.no_grad():
        logits = forward_logits(f, model).data
    row = logits[answer_position(f)]
    return float(yes_no_probability(row[vocab.yes_id], row[vocab.no_id]))


def generate(f: FusedInput, model: FusionModel, vocab: Vocab, max_tokens: int = 1) -> str:
    """Greedy decoding from a fused context that ends before the answer."""
    emb = f.embeddings
    out_ids = []
    with T.no_grad():
        for _ in range(max_tokens):
            if emb.shape[0] >= model.cfg.decoder.max_len:
                break
            logits = forward_logits(FusedInput(emb, [], 0), model).data
            nxt = int(np.argmax(logits[-1]))
            if nxt == vocab.eos_id:
                break
            out_ids.append(nxt)
            emb = T.concat([emb, model.decoder.embed([nxt])], axis=0)
    return decode(out_ids, vocab)


# -- checkpoints ------------------------------------------------------------------

CKPT_MAGIC = b"UPCK"
CKPT_VERSION = 1
CONFIG_SECTION = "__config__"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: FusionModel, extra: Optional[dict] = None) -> None:
    """Binary checkpoint; the trailing ``__config__`` section holds UTF-8 JSON."""
    cfg = {"model": model.cfg.to_dict(), "lora": asdict(model.lora) if model.lora else None,
           "stages": list(model.stages)}
    if extra:
        cfg.update(extra)
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name, p in model.named_parameters():
        chunks.append(_section(name, p.data))
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    padded = blob + b"\0" * (-len(blob) % 4)
    chunks.append(_section(CONFIG_SECTION, np.frombuffer(padded, dtype="<f4")))
    Path(path).write_bytes(b"".join(chunks))


def _section(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    a = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def read_checkpoint(path) -> tuple:
    """-> (ordered {name: array}, config dict)."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    arrays = {}
    cfg = None
    while pos < len(buf):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        payload = buf[pos:pos + nbytes]
        if len(payload) != nbytes:
            raise CheckpointError(f"{path}: truncated section {name!r}")
        pos += nbytes
        if name == CONFIG_SECTION:
            cfg = json.loads(payload.rstrip(b"\0").decode("utf-8"))
        else:
            arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if cfg is None:
        raise CheckpointError(f"{path}: missing config section")
    return arrays, cfg


def load_checkpoint(path) -> tuple:
    """Rebuild a model from a checkpoint -> (FusionModel, config dict)."""
    arrays, cfg = read_checkpoint(path)
    model = FusionModel(ModelConfig.from_dict(cfg["model"]))
    if cfg.get("lora"):
        model.add_lora(LoraConfig(**cfg["lora"]))
    load_state(model, arrays, str(path))
    model.stages = list(cfg.get("stages", []))
    return model, cfg


def load_state(model: FusionModel, arrays: dict, source: str = "<state>") -> None:
    named = dict(model.named_parameters())
    missing = set(named) - set(arrays)
    extra = set(arrays) - set(named)
    if missing or extra:
        raise CheckpointError(f"{source}: parameter mismatch (missing={sorted(missing)[:5]}, extra={sorted(extra)[:5]})")
    for name, p in named.items():
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"{source}: shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
        p.data = np.array(arrays[name], dtype=np.float32)
