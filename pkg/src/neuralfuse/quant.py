"""Symmetric uniform weight quantization and the two's-complement bit codec."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class QuantizedWeights:
    """One layer's integer codes, scale and bit width.

    Codes are stored widened to int16 so post-fault values such as
    ``-2**(bits-1)`` are representable.
    """

    codes: np.ndarray
    scale: float
    bits: int

    @property
    def shape(self):
        return self.codes.shape


def _check_bits(b):
    if not 2 <= b <= 8:
        raise ValueError(f"precision must be in [2, 8], got {b}")


def qmax(b):
    return 2 ** (b - 1) - 1


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(weights, b):
    """``codes = round(W / s)`` with ``s = max|W| / (2**(b-1) - 1)``."""
    _check_bits(b)
    w = np.asarray(getattr(weights, "data", weights), dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    peak = float(np.abs(w).max()) if w.size else 0.0
    if peak == 0.0:
        return QuantizedWeights(np.zeros(w.shape, dtype=np.int16), 1.0, b)
    scale = peak / qmax(b)
    codes = np.clip(round_half_away(w / scale), -qmax(b), qmax(b))
    return QuantizedWeights(codes.astype(np.int16), scale, b)


def dequantize(q):
    return q.scale * q.codes.astype(np.float64)


def encode_bits(code, b):
    """Two's-complement bits of ``code``, most significant first."""
    code = int(code)
    if not -(2 ** (b - 1)) <= code <= qmax(b):
        raise ValueError(f"code {code} not representable in {b} bits")
    u = code & ((1 << b) - 1)
    return [(u >> k) & 1 for k in range(b - 1, -1, -1)]


def decode_bits(bits, b):
    if len(bits) != b:
        raise ValueError(f"expected {b} bits, got {len(bits)}")
    u = 0
    for bit in bits:
        u = (u << 1) | int(bit)
    return u - (1 << b) if u >> (b - 1) else u


def to_unsigned(codes, b):
    """Vectorized two's-complement view of signed codes as b-bit words."""
    return np.asarray(codes, dtype=np.int32) & ((1 << b) - 1)


def from_unsigned(words, b):
    words = np.asarray(words, dtype=np.int32)
    return np.where(words >> (b - 1), words - (1 << b), words).astype(np.int16)


def quantize_model(graph, b):
    """Quantize every conv/deconv/linear weight of ``graph`` at ``b`` bits.

    Biases and batchnorm affine parameters stay in float and are never faulted.
    """
    return {k: quantize(p.data, b) for k, p in graph.params.items() if p.quantizable}


def dequantize_model(qmodel):
    return {k: dequantize(q) for k, q in qmodel.items()}


def fake_quantize(w, b):
    """Quantize-dequantize round trip used for straight-through training."""
    return dequantize(quantize(w, b))
