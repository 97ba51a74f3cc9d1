"""Train a small classifier, quantize it to 8 bits and watch accuracy fall under bit errors."""
import numpy as np

from neuralfuse import dataio
from neuralfuse.eopm import BaseTrainConfig, train_base
from neuralfuse.faults import QuantizedModel
from neuralfuse.harness import evaluate, float_accuracy
from neuralfuse.models import build_base

kw = dict(image_size=16, seed=0, separation=0.35, noise=0.5)
train = dataio.synth_dataset(4, 250, split="train", **kw)
test = dataio.synth_dataset(4, 100, split="test", **kw)

g = build_base("tinycnn-a", (3, 16, 16), 4, seed=0)
train_base(g, train, BaseTrainConfig(epochs=20))
print("float accuracy", float_accuracy(g, test))

base = QuantizedModel.from_graph(g, 8, "tinycnn-a")
for p in (0.0, 0.001, 0.005, 0.01, 0.02):
    r = evaluate(base, None, p, 10, 0, test)
    print(f"p={p:<6} CA={r.ca:.1f} PA={r.pa_mean:.1f} +- {r.pa_std:.1f}  worst={min(r.pa):.1f}")
