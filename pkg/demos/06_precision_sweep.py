"""Accuracy of one trained model as the weight precision drops from 8 to 2 bits."""
from neuralfuse import dataio
from neuralfuse.eopm import BaseTrainConfig, train_base
from neuralfuse.harness import float_accuracy, precision_sweep, reports_csv
from neuralfuse.models import build_base

kw = dict(image_size=16, seed=0, separation=0.35, noise=0.5)
train = dataio.synth_dataset(4, 250, split="train", **kw)
test = dataio.synth_dataset(4, 100, split="test", **kw)
g = build_base("tinycnn-a", (3, 16, 16), 4, seed=0)
train_base(g, train, BaseTrainConfig(epochs=20))

print("float", float_accuracy(g, test))
print(reports_csv(precision_sweep(g, None, [8, 7, 6, 5, 4, 3, 2], 0.0, 1, 0, test, "tinycnn-a")))
print("with 1% bit errors")
print(reports_csv(precision_sweep(g, None, [8, 6, 4], 0.01, 10, 0, test, "tinycnn-a")))
