"""Small classifier graphs used as base models at desk scale."""
from __future__ import annotations

from .graph import Graph

ARCHS = ("tinycnn-a", "tinycnn-b")


VARIANTS = {
    # (stage widths, conv-BN-ReLU blocks per stage)
    "a": ((8, 16, 32), 3),
    "b": ((16, 32, 64), 1),
}


def tinycnn(input_shape, num_classes, variant="a", seed=0):
    """Three pooled stages of conv-BN-ReLU blocks and a linear head.

    Variant A is narrow and deep, three blocks per stage (~31k parameters
    on 3x16x16); variant B is wider with one block per stage (~25k). Depth
    is what makes A fragile: flipped weights compound through nine blocks.
    """
    widths, per_stage = VARIANTS[variant]
    g = Graph(input_shape, seed=seed)
    for i, c in enumerate(widths):
        for j in range(per_stage):
            g.add("conv2d", out_channels=c, kernel=3, stride=1, padding=1, name=f"conv{i}{j}")
            g.add("batchnorm", name=f"bn{i}{j}")
            g.add("relu", name=f"relu{i}{j}")
        g.add("maxpool2x2", name=f"pool{i}")
    g.add("linear", out_features=num_classes, name="fc")
    g.header = {"arch": f"tinycnn-{variant}", "num_classes": num_classes}
    return g


def build_base(arch, input_shape, num_classes, seed=0):
    if arch not in ARCHS:
        raise ValueError(f"unknown base architecture {arch!r}; choose from {ARCHS}")
    return tinycnn(input_shape, num_classes, arch[-1], seed)
