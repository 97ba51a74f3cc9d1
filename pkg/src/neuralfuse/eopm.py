"""Expectation-over-perturbed-models training of input transformations.

The objective for one mini-batch is::

    L_total = L(M0, F(x)) + lam * mean_i L(M_pi, F(x))

where M0 is the quantized clean base model and M_p1..M_pN are freshly
sampled bit-error copies of it. The generator weights are the only thing
trained; base models are frozen.
"""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .faults import BitErrorSpec, QuantizedModel, sample_perturbed_model
from .generators import apply_transform
from .graph import backward, forward
from .optim import Adam
from .quant import fake_quantize
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(FloatingPointError):
    pass


@dataclass
class EopmConfig:
    lam: float = 5.0
    n_perturbed: int = 10
    ber: float = 0.01
    epochs: int = 150
    batch_size: int = 25
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    precision: int = 8
    val_n: int = 5
    workers: int = 1
    check_every: int = 0  # verify the aggregated gradient every k iterations (0: never)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.n_perturbed < 1:
            raise ValueError("need at least one perturbed model per iteration")

    @property
    def spec(self):
        return BitErrorSpec(self.ber, self.seed, self.precision)


@dataclass
class TrainHistory:
    loss_clean: list = field(default_factory=list)
    loss_perturbed: list = field(default_factory=list)
    loss_total: list = field(default_factory=list)
    ca_val: list = field(default_factory=list)
    pa_val: list = field(default_factory=list)
    best_epoch: int = -1

    COLUMNS = ("epoch", "L_M0", "L_Mp", "L_total", "CA_val", "PA_val")

    def __len__(self):
        return len(self.loss_total)

    def rows(self):
        for i in range(len(self)):
            yield (i, self.loss_clean[i], self.loss_perturbed[i], self.loss_total[i],
                   self.ca_val[i], self.pa_val[i])

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows():
            w.writerow([r[0]] + [f"{v:.6f}" for v in r[1:]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _loss(model, xt, y):
    return T.cross_entropy(model.forward(xt), y)


def total_loss(gen, base, perturbed, x, y, lam, mode="train"):
    """Single differentiable scalar ``L_M0 + lam * mean(L_Mpi)`` and its parts."""
    if not perturbed:
        raise ValueError("need at least one perturbed model")
    xt = apply_transform(gen, x, mode)
    l0 = _loss(base, xt, y)
    lp = [_loss(m, xt, y) for m in perturbed]
    lmp = T.mul(sum(lp[1:], lp[0]), 1.0 / len(lp))
    total = T.add(l0, T.mul(lmp, lam))
    return total, {"L_M0": l0.item(), "L_Mp": lmp.item(), "L_total": total.item()}


def _terms(bases, perturbed_sets, lam):
    """(weight, model) pairs whose weighted loss sum is the objective.

    Several bases (ensemble surrogates) are averaged with equal weight.
    """
    out = []
    for base, pset in zip(bases, perturbed_sets):
        out.append((1.0 / len(bases), base, "clean"))
        for m in pset:
            out.append((lam / (len(pset) * len(bases)), m, "perturbed"))
    return out


def eopm_gradients(gen, bases, perturbed_sets, x, y, lam, mode="train", per_model=False, workers=1):
    """Gradient of the objective w.r.t. the generator weights.

    The transformed batch is computed once; each model's loss is
    backpropagated to that batch (concurrently when ``workers > 1``) and the
    weighted input gradients are summed in a fixed order before one pass
    through the generator. With ``per_model`` every model's gradient is
    instead pushed through the generator separately and the weighted
    parameter gradients are summed, step for step as in the training
    algorithm. Both give the same result up to rounding.
    """
    xt = apply_transform(gen, x, mode)
    terms = _terms(bases, perturbed_sets, lam)

    def input_grad(term):
        _, model, _ = term
        leaf = Tensor(xt.data, requires_grad=True)
        loss = _loss(model, leaf, y)
        loss.backward()
        return loss.item(), leaf.grad

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(input_grad, terms))
    else:
        results = [input_grad(t) for t in terms]

    clean = [l for (w, _, kind), (l, _) in zip(terms, results) if kind == "clean"]
    pert = [l for (w, _, kind), (l, _) in zip(terms, results) if kind == "perturbed"]
    comps = {"L_M0": float(np.mean(clean)), "L_Mp": float(np.mean(pert))}
    comps["L_total"] = comps["L_M0"] + lam * comps["L_Mp"]

    params = gen.graph.trainable()
    if not xt.requires_grad:
        return {k: np.zeros_like(p.data) for k, p in params.items()}, comps
    if per_model:
        grads = {k: np.zeros_like(p.data) for k, p in params.items()}
        for (w, _, _), (_, g) in zip(terms, results):
            gen.graph.zero_grad()
            xt.backward(g)
            for k, p in params.items():
                if p.tensor.grad is not None:
                    grads[k] += w * p.tensor.grad
        return grads, comps
    seed = np.zeros_like(xt.data)
    for (w, _, _), (_, g) in zip(terms, results):
        seed += w * g
    gen.graph.zero_grad()
    xt.backward(seed)
    return {k: (p.tensor.grad if p.tensor.grad is not None else np.zeros_like(p.data)).copy()
            for k, p in params.items()}, comps


def combined_gradients(gen, base, perturbed, x, y, lam, mode="train"):
    """Reference path: one backward through the single combined scalar."""
    total, comps = total_loss(gen, base, perturbed, x, y, lam, mode)
    grads = backward(gen.graph, total)
    return {k: grads[k] for k in gen.graph.trainable()}, comps


def max_rel_diff(a, b, floor=1e-8):
    """Max of ``|a - b| / max(|a|, |b|, floor)`` over every entry of two gradient dicts.

    The floor keeps analytically-zero entries (conv biases ahead of a
    batchnorm) from turning rounding noise into large ratios.
    """
    worst = 0.0
    for k in a:
        d = np.abs(a[k] - b[k])
        m = np.maximum(np.maximum(np.abs(a[k]), np.abs(b[k])), floor)
        worst = max(worst, float((d / m).max()) if d.size else 0.0)
    return worst


def check_aggregation(gen, base, perturbed, x, y, lam, tol=1e-6):
    """Compare the aggregated gradient with the combined-scalar backward.

    Batchnorm running statistics touched by the extra forwards are restored.
    """
    saved = {k: v.copy() for k, v in gen.graph.buffers.items()}
    try:
        g_agg, _ = eopm_gradients(gen, [base], [perturbed], x, y, lam, "train")
        g_ref, _ = combined_gradients(gen, base, perturbed, x, y, lam, "train")
    finally:
        gen.graph.buffers.update(saved)
    err = max_rel_diff(g_agg, g_ref)
    if err > tol:
        raise TrainingError(f"gradient aggregation mismatch: max relative difference {err:.3g}")
    return err


def sample_training_models(bases, config, iteration):
    """The N perturbed copies of each base used at ``iteration``."""
    spec = config.spec
    n = config.n_perturbed
    return [
        [sample_perturbed_model(b, spec, iteration * n + i, namespace="train") for i in range(n)]
        for b in bases
    ]


def eopm_step(gen, bases, batch, config, iteration, optimizer, per_model=False):
    """Sample fresh perturbed models, compute the EOPM gradient, update with Adam."""
    bases = bases if isinstance(bases, (list, tuple)) else [bases]
    x, y = batch
    psets = sample_training_models(bases, config, iteration)
    if config.check_every and iteration % config.check_every == 0 and len(bases) == 1:
        check_aggregation(gen, bases[0], psets[0], x, y, config.lam)
    grads, comps = eopm_gradients(gen, bases, psets, x, y, config.lam, "train",
                                  per_model=per_model, workers=config.workers)
    if not np.isfinite(comps["L_total"]):
        raise TrainingError(f"non-finite loss at iteration {iteration}: {comps}")
    optimizer.step(grads)
    return comps


def accuracy(model, gen, data, batch_size=250):
    hits = 0
    for x, y in data.batches(batch_size):
        logits = model.forward(apply_transform(gen, x, "eval").detach())
        hits += int((logits.data.argmax(axis=1) == y).sum())
    return 100.0 * hits / len(data)


def validate(gen, bases, data, config):
    """Clean and mean perturbed accuracy on a fixed validation fault stream."""
    spec = config.spec
    ca, pa = [], []
    for b in bases:
        ca.append(accuracy(b, gen, data))
        for i in range(config.val_n):
            pa.append(accuracy(sample_perturbed_model(b, spec, i, namespace="val"), gen, data))
    return float(np.mean(ca)), float(np.mean(pa))


def train_generator(config, gen, surrogates, train, val):
    """Run EOPM for ``config.epochs`` and keep the best perturbed-validation weights.

    ``surrogates`` is one quantized model or a list (ensemble mode).
    """
    bases = list(surrogates) if isinstance(surrogates, (list, tuple)) else [surrogates]
    if not bases:
        raise ValueError("need at least one surrogate model")
    frozen = [(p, p.tensor.requires_grad) for b in bases for p in b.graph.params.values()]
    for p, _ in frozen:
        p.tensor.requires_grad = False
    opt = Adam(gen.graph.trainable(), config.lr, config.betas, config.eps)
    hist = TrainHistory()
    rng = np.random.default_rng([config.seed, 7])
    best, best_state = -np.inf, None
    it = 0
    try:
        for epoch in range(config.epochs):
            sums = np.zeros(3)
            nb = 0
            for batch in train.batches(config.batch_size, rng):
                c = eopm_step(gen, bases, batch, config, it, opt)
                sums += (c["L_M0"], c["L_Mp"], c["L_total"])
                nb += 1
                it += 1
            ca, pa = validate(gen, bases, val, config)
            hist.loss_clean.append(sums[0] / nb)
            hist.loss_perturbed.append(sums[1] / nb)
            hist.loss_total.append(sums[2] / nb)
            hist.ca_val.append(ca)
            hist.pa_val.append(pa)
            log.info("epoch %d: L_total=%.4f CA_val=%.2f PA_val=%.2f", epoch, sums[2] / nb, ca, pa)
            if pa > best:
                best, best_state, hist.best_epoch = pa, gen.graph.state(), epoch
    finally:
        for p, flag in frozen:
            p.tensor.requires_grad = flag
    if best_state is not None:
        gen.graph.load_state(best_state)
    return gen, hist


# ---------------------------------------------------------------- base models

@dataclass
class BaseTrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    qat_bits: int = 8


def train_base(graph, data, config=None, qat=False):
    """Train a classifier graph in place with Adam and cross-entropy.

    With ``qat`` the quantizable weights are replaced by their b-bit
    fake-quantized values for each forward/backward, and the resulting
    gradient is applied to the float weights (straight-through estimator).
    Returns the per-epoch mean training loss.
    """
    config = config or BaseTrainConfig()
    opt = Adam(graph.trainable(), config.lr)
    rng = np.random.default_rng([config.seed, 3])
    qnames = [k for k, p in graph.params.items() if p.quantizable]
    losses = []
    for epoch in range(config.epochs):
        total, nb = 0.0, 0
        for x, y in data.batches(config.batch_size, rng):
            saved = {}
            if qat:
                for k in qnames:
                    p = graph.params[k]
                    saved[k] = p.tensor.data
                    p.tensor.data = fake_quantize(saved[k], config.qat_bits)
            loss = T.cross_entropy(forward(graph, x, "train"), y)
            grads = backward(graph, loss)
            for k, w in saved.items():
                graph.params[k].tensor.data = w
            if not np.isfinite(loss.item()):
                raise TrainingError(f"base training diverged in epoch {epoch}")
            opt.step(grads)
            total += loss.item()
            nb += 1
        losses.append(total / nb)
    return losses


def quantized_base(graph, bits=8, name="base"):
    return QuantizedModel.from_graph(graph, bits, name)
