"""Encoder-decoder generators and the clipped input transformation.

Resolved layer tables (channels at scale 1.0, 3-channel input)::

    ConvL    [CB 32, CB 32, pool] [CB 64, CB 64, pool] [CB 128, CB 128, pool]
             CB 128, up, CB 128 | CB 64, up, CB 64 | CB 32, up, CB 32
             conv 3, BN, tanh                                   723,273 params
    ConvS    [CB 32, pool] [CB 64, pool] [CB 64, pool]
             CB 64, up | CB 32, up | CB 3, up | conv 3, BN, tanh 113,187 params
    DeConvL  ConvL encoder, CB 128 | DCB 64, CB 64 | DCB 32, CB 32
             deconv 3, BN, tanh                                 647,785 params
    DeConvS  ConvS encoder, DCB 64 | DCB 32 | deconv 3, BN, tanh 156,777 params
    UNetL/S  four levels of (CB, CB) at c, 2c, 4c, 8c (c = 16 / 8) with
             2x2 stride-2 deconvs, skip concats, final 1x1 conv   482,771 / 121,195

CB = 3x3 conv + BN + ReLU, DCB = 4x4 stride-2 deconv + BN + ReLU. UNet
ConvBlock convolutions carry no bias (the following BN absorbs it).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graph import Graph, ShapeError, forward
from .tensor import Tensor

FAMILIES = ("ConvL", "ConvS", "DeConvL", "DeConvS", "UNetL", "UNetS")


@dataclass(frozen=True)
class GeneratorArch:
    family: str
    scale: float = 1.0
    input_shape: tuple = (3, 32, 32)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown generator family {self.family!r}; choose from {FAMILIES}")
        c, h, w = self.input_shape
        if h % 8 or w % 8:
            raise ValueError(f"spatial size {h}x{w} must be divisible by 8")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def width(self, channels):
        return max(1, int(round(channels * self.scale)))


class Generator:
    """A generator graph together with the architecture that produced it."""

    def __init__(self, arch, graph):
        self.arch = arch
        self.graph = graph

    @property
    def params(self):
        return self.graph.params

    def __call__(self, x, mode="eval"):
        return forward(self.graph, x, mode)


def _cb(g, out, bias=True, name=None):
    g.add("conv2d", out_channels=out, kernel=3, stride=1, padding=1, bias=bias,
          name=name and f"{name}.conv")
    g.add("batchnorm", name=name and f"{name}.bn")
    return g.add("relu", name=name and f"{name}.relu")


def _dcb(g, out, name=None):
    g.add("deconv2d", out_channels=out, kernel=4, stride=2, padding=1, name=name and f"{name}.deconv")
    g.add("batchnorm", name=name and f"{name}.bn")
    return g.add("relu", name=name and f"{name}.relu")


def _head(g, out, deconv=False):
    if deconv:
        g.add("deconv2d", out_channels=out, kernel=4, stride=2, padding=1, name="head.deconv")
    else:
        g.add("conv2d", out_channels=out, kernel=3, stride=1, padding=1, name="head.conv")
    g.add("batchnorm", name="head.bn")
    return g.add("tanh", name="head.tanh")


def _conv_family(arch, g, large, deconv):
    w, cin = arch.width, arch.input_shape[0]
    if large:
        for i, c in enumerate((32, 64, 128)):
            _cb(g, w(c), name=f"enc{i}a")
            _cb(g, w(c), name=f"enc{i}b")
            g.add("maxpool2x2", name=f"pool{i}")
        if not deconv:
            for i, c in enumerate((128, 64, 32)):
                _cb(g, w(c), name=f"dec{i}a")
                g.add("upsample2x", name=f"up{i}")
                _cb(g, w(c), name=f"dec{i}b")
            return _head(g, cin)
        _cb(g, w(128), name="dec0")
        _dcb(g, w(64), name="dec1a")
        _cb(g, w(64), name="dec1b")
        _dcb(g, w(32), name="dec2a")
        _cb(g, w(32), name="dec2b")
        return _head(g, cin, deconv=True)
    for i, c in enumerate((32, 64, 64)):
        _cb(g, w(c), name=f"enc{i}")
        g.add("maxpool2x2", name=f"pool{i}")
    if not deconv:
        for i, c in enumerate((w(64), w(32), cin)):
            _cb(g, c, name=f"dec{i}")
            g.add("upsample2x", name=f"up{i}")
        return _head(g, cin)
    _dcb(g, w(64), name="dec0")
    _dcb(g, w(32), name="dec1")
    return _head(g, cin, deconv=True)


def _unet(arch, g, base):
    w = arch.width
    c = [w(base * m) for m in (1, 2, 4, 8)]
    skips = []
    for lvl in range(4):
        if lvl:
            g.add("maxpool2x2", name=f"pool{lvl}")
        _cb(g, c[lvl], bias=False, name=f"down{lvl}a")
        skips.append(_cb(g, c[lvl], bias=False, name=f"down{lvl}b"))
    for lvl in (2, 1, 0):
        up = g.add("deconv2d", out_channels=c[lvl], kernel=2, stride=2, padding=0, name=f"up{lvl}")
        g.add("concat", skips[lvl], up, name=f"cat{lvl}")
        _cb(g, c[lvl], bias=False, name=f"dec{lvl}a")
        _cb(g, c[lvl], bias=False, name=f"dec{lvl}b")
    return g.add("conv2d", out_channels=arch.input_shape[0], kernel=1, stride=1, padding=0, name="head.conv")


def build_generator(arch, seed=0, identity_init=False):
    """Build the graph for ``arch``.

    With ``identity_init`` the generator starts out emitting exactly zero, so
    the transformation is the identity until training moves it.
    """
    g = Graph(arch.input_shape, seed=seed)
    fam = arch.family
    if fam.startswith("UNet"):
        _unet(arch, g, 16 if fam == "UNetL" else 8)
    else:
        _conv_family(arch, g, large=fam.endswith("L"), deconv=fam.startswith("DeConv"))
    if g.output_shape != tuple(arch.input_shape):
        raise ShapeError(f"{fam}: output {g.output_shape} != input {arch.input_shape}")
    g.header = {"family": fam, "scale": arch.scale, "input_shape": list(arch.input_shape)}
    if identity_init:
        if "head.bn.gamma" in g.params:
            g.params["head.bn.gamma"].tensor.data[:] = 0.0
        else:
            g.params["head.conv.weight"].tensor.data[:] = 0.0
            g.params["head.conv.bias"].tensor.data[:] = 0.0
    return Generator(arch, g)


def generator_from_graph(graph):
    h = graph.header
    arch = GeneratorArch(h["family"], h["scale"], tuple(h["input_shape"]))
    return Generator(arch, graph)


def _check(x, shape):
    if tuple(x.shape[1:]) != tuple(shape):
        raise ValueError(f"input shape {tuple(x.shape[1:])} != expected {tuple(shape)}")


def transform(gen, x, mode="eval"):
    """``clip(x + G(x), -1, 1)``, differentiable in the generator weights."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    _check(x, gen.arch.input_shape)
    return T.clip(T.add(x, gen(x, mode)), -1.0, 1.0)


class UIP:
    """Universal input perturbation: one trainable tensor shared by every input."""

    def __init__(self, input_shape, init=0.0):
        self.input_shape = tuple(input_shape)
        self.graph = Graph(self.input_shape)
        self.graph._param("uip", "value", "uip", np.full(self.input_shape, float(init)))
        self.graph.header = {"family": "UIP", "input_shape": list(self.input_shape)}

    @property
    def tensor(self):
        return self.graph.params["uip.value"].tensor

    @property
    def params(self):
        return self.graph.params


def uip_transform(u, x, mode="eval"):
    """``clip(x + tanh(u), -1, 1)``; ``mode`` is accepted for interface parity."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    _check(x, u.input_shape)
    return T.clip(T.add(x, T.tanh(u.tensor)), -1.0, 1.0)


def apply_transform(gen, x, mode="eval"):
    """Dispatch to :func:`transform` or :func:`uip_transform`; ``None`` means identity."""
    if gen is None:
        return x if isinstance(x, Tensor) else Tensor(x)
    if isinstance(gen, UIP):
        return uip_transform(gen, x, mode)
    return transform(gen, x, mode)
