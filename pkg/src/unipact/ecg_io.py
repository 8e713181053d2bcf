"""ECG waveform container and the ``UPCT`` binary file format.

Layout (little endian): magic ``b"UPCT"``, version u32, L u32, C u32, then
L*C float32 samples in time-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"UPCT"
VERSION = 1
N_LEADS = 12
_HEADER = struct.Struct("<4sIII")


class EcgFormatError(ValueError):
    pass


@dataclass
class EcgSignal:
    samples: np.ndarray  # (L, C) float32, millivolts
    sample_rate: float = 100.0

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float32)
        if s.ndim != 2:
            raise ValueError(f"ECG samples must be 2-D (L, C), got shape {s.shape}")
        self.samples = s

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_leads(self) -> int:
        return self.samples.shape[1]


def ecg_to_bytes(samples: np.ndarray) -> bytes:
    s = np.ascontiguousarray(samples, dtype="<f4")
    if s.ndim != 2:
        raise ValueError(f"expected (L, C) samples, got shape {s.shape}")
    return _HEADER.pack(MAGIC, VERSION, s.shape[0], s.shape[1]) + s.tobytes()


def ecg_from_bytes(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise EcgFormatError(f"{source}: truncated header")
    magic, version, n, c = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise EcgFormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise EcgFormatError(f"{source}: unsupported version {version}")
    expected = _HEADER.size + 4 * n * c
    if len(buf) != expected:
        raise EcgFormatError(f"{source}: expected {expected} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(n, c).astype(np.float32)


def write_ecg(path, samples: np.ndarray) -> None:
    Path(path).write_bytes(ecg_to_bytes(samples))


def read_ecg(path) -> np.ndarray:
    path = Path(path)
    return ecg_from_bytes(path.read_bytes(), str(path))
