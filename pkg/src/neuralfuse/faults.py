"""Random SRAM bit errors on quantized weights.

Each weight bit flips independently with probability ``p`` (XOR with a
Bernoulli mask), which makes 0->1 and 1->0 flips equally likely and lets the
same mask undo itself. Masks are never stored: they are regenerated from
``(seed, namespace, layer name, sample index)``.

Namespaces keep streams apart: ``"train"`` for the models sampled inside the
generator training loop, ``"val"`` for checkpoint selection and ``"eval"``
for reported numbers.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import quant
from .graph import forward


def _key_int(part):
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def stream_rng(seed, *key):
    """Independent generator for ``key`` under ``seed`` (PCG64 via SeedSequence)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class BitErrorSpec:
    rate: float
    seed: int = 0
    precision: int = 8

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"bit-error rate must be in [0, 1], got {self.rate}")


def sample_flip_mask(shape, spec, stream_id):
    """One b-bit flip word per element; ``stream_id`` is an int or tuple key."""
    key = stream_id if isinstance(stream_id, tuple) else (stream_id,)
    b = spec.precision
    n = int(np.prod(shape))
    if spec.rate == 0.0:
        return np.zeros(shape, dtype=np.uint8)
    rng = stream_rng(spec.seed, *key)
    hits = rng.random((n, b)) < spec.rate
    words = (hits.astype(np.uint16) << np.arange(b, dtype=np.uint16)).sum(axis=1)
    return words.astype(np.uint8).reshape(shape)


def apply_bit_errors(q, mask):
    """XOR each code's two's-complement word with its mask word."""
    mask = np.asarray(mask)
    if mask.shape != q.codes.shape:
        raise ValueError(f"mask shape {mask.shape} != weight shape {q.codes.shape}")
    words = quant.to_unsigned(q.codes, q.bits) ^ mask.astype(np.int32)
    return quant.QuantizedWeights(quant.from_unsigned(words, q.bits), q.scale, q.bits)


@dataclass(frozen=True)
class QuantizedModel:
    """A float graph plus the quantized copies of its faultable weights."""

    graph: object
    qweights: dict
    bits: int = 8
    name: str = "base"

    @classmethod
    def from_graph(cls, graph, bits=8, name="base"):
        return cls(graph, quant.quantize_model(graph, bits), bits, name)

    def overrides(self):
        return quant.dequantize_model(self.qweights)

    def forward(self, x, mode="eval"):
        return forward(self.graph, x, mode, overrides=self.overrides())


@dataclass(frozen=True)
class PerturbedModel:
    base: QuantizedModel
    qweights: dict
    masks: dict = field(repr=False)
    spec: BitErrorSpec
    index: int

    def overrides(self):
        return quant.dequantize_model(self.qweights)

    def forward(self, x, mode="eval"):
        return forward(self.base.graph, x, mode, overrides=self.overrides())


def sample_masks(model, spec, namespace, index):
    return {
        name: sample_flip_mask(q.shape, spec, (namespace, model.name, name, index))
        for name, q in model.qweights.items()
    }


def sample_perturbed_model(model, spec, index, namespace="eval"):
    """Draw M_p number ``index`` from stream ``namespace``; the base is untouched."""
    if spec.precision != model.bits:
        spec = BitErrorSpec(spec.rate, spec.seed, model.bits)
    masks = sample_masks(model, spec, namespace, index)
    flipped = {k: apply_bit_errors(q, masks[k]) for k, q in model.qweights.items()}
    return PerturbedModel(model, flipped, masks, spec, index)


# ---------------------------------------------------------------- voltage

@dataclass(frozen=True)
class VoltagePoint:
    v_ratio: float
    ber: float
    energy_ratio: float


DEFAULT_ANCHORS = ((0.83, 0.01, 0.6936), (1.0, 0.0, 1.0))
# BER growth per unit of v_ratio below the lowest error-free anchor: one decade per 0.05 V_min
DEFAULT_DECAY = math.log(10.0) / 0.05
MAX_BER = 0.5


class VoltageCurve:
    """BER and per-access energy versus supply voltage (as a fraction of V_min).

    BER is exponential in voltage between anchors (log-linear where both
    anchors are positive; an exponential that lands exactly on zero when the
    upper anchor is error-free), extrapolated below the lowest anchor with
    ``decay`` and zero above the highest. Energy is piecewise linear.
    """

    def __init__(self, anchors=DEFAULT_ANCHORS, decay=DEFAULT_DECAY):
        pts = sorted((float(v), float(b), float(e)) for v, b, e in anchors)
        if len(pts) < 2:
            raise ValueError("need at least two anchors")
        for (v0, b0, e0), (v1, b1, e1) in zip(pts, pts[1:]):
            if v1 == v0 or b1 > b0 or e1 < e0:
                raise ValueError("anchors must have distinct voltages, BER non-increasing "
                                 "and energy non-decreasing in voltage")
        self.anchors = pts
        self.decay = decay

    def ber(self, v):
        pts = self.anchors
        if v >= pts[-1][0]:
            return pts[-1][1]
        if v <= pts[0][0]:
            v0, b0, _ = pts[0]
            return min(MAX_BER, b0 * math.exp(self.decay * (v0 - v)))
        for (v0, b0, _), (v1, b1, _) in zip(pts, pts[1:]):
            if v0 <= v <= v1:
                if b1 > 0:
                    t = (v - v0) / (v1 - v0)
                    return math.exp((1 - t) * math.log(b0) + t * math.log(b1))
                if b0 == 0:
                    return 0.0
                k = self.decay
                num = math.exp(-k * (v - v0)) - math.exp(-k * (v1 - v0))
                return b0 * num / (1.0 - math.exp(-k * (v1 - v0)))
        raise AssertionError("unreachable")

    def energy(self, v):
        vs = [p[0] for p in self.anchors]
        es = [p[2] for p in self.anchors]
        if v <= vs[0]:
            slope = (es[1] - es[0]) / (vs[1] - vs[0])
            return es[0] + slope * (v - vs[0])
        if v >= vs[-1]:
            slope = (es[-1] - es[-2]) / (vs[-1] - vs[-2])
            return es[-1] + slope * (v - vs[-1])
        return float(np.interp(v, vs, es))

    def __call__(self, v_ratio):
        if not 0.5 <= v_ratio <= 1.2:
            raise ValueError(f"v_ratio must be in [0.5, 1.2], got {v_ratio}")
        return VoltagePoint(v_ratio, self.ber(v_ratio), self.energy(v_ratio))

    def voltage_for_ber(self, ber, tol=1e-10):
        """Highest voltage whose BER reaches ``ber`` (bisection on the monotone curve)."""
        lo, hi = 0.5, 1.2
        if ber <= 0:
            return self.anchors[-1][0] if self.anchors[-1][1] == 0 else hi
        if self.ber(lo) < ber:
            raise ValueError(f"BER {ber} not reachable above v_ratio 0.5")
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if self.ber(mid) >= ber:
                lo = mid
            else:
                hi = mid
        return lo


def voltage_curve(v_ratio, anchors=DEFAULT_ANCHORS):
    return VoltageCurve(anchors)(v_ratio)
