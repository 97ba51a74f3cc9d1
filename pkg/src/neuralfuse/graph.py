"""Layer graphs over the autodiff tensors, plus checkpoint I/O.

A :class:`Graph` is an ordered list of nodes. Node 0 is the input; every other
node applies one :class:`LayerSpec` to earlier nodes, so insertion order is a
topological order and skip connections (concat, residual add) are plain
references to earlier node ids.

Checkpoint layout (all integers little-endian)::

    b"NFCK"                 magic
    u16                     format version (1)
    u32                     manifest length in bytes
    manifest                UTF-8 JSON: input_shape, seed, nodes, params,
                            buffers, optional "header" and "quantized" entries
    f32[...]                parameter blobs, manifest "params" order
    f32[...]                buffer blobs, manifest "buffers" order
    quantized section       only when the manifest lists "quantized": per
                            entry u8 bits, f32 scale, then int8 codes
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import StateError, Tensor

LAYER_KINDS = (
    "conv2d", "deconv2d", "maxpool2x2", "upsample2x", "batchnorm", "relu",
    "tanh", "linear", "concat", "add", "clip",
)
WEIGHT_KINDS = ("conv2d", "deconv2d", "linear")

MAGIC = b"NFCK"
VERSION = 1


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass
class Node:
    name: str
    spec: LayerSpec
    inputs: tuple
    shape: tuple  # per-sample output shape


@dataclass
class Parameter:
    tensor: Tensor
    layer: str
    kind: str  # layer kind owning the parameter
    role: str  # weight | bias | gamma | beta

    @property
    def data(self):
        return self.tensor.data

    @property
    def trainable(self):
        return self.tensor.requires_grad

    @property
    def quantizable(self):
        return self.role == "weight" and self.kind in WEIGHT_KINDS


def conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def deconv_out(size, k, stride, pad):
    return (size - 1) * stride - 2 * pad + k


class Graph:
    """Layer DAG with a named parameter registry and batchnorm buffers."""

    def __init__(self, input_shape, seed=0):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.seed = seed
        self.nodes = [Node("input", None, (), self.input_shape)]
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._rng = np.random.default_rng(seed)
        self.header: dict = {}

    @property
    def output(self):
        return len(self.nodes) - 1

    @property
    def output_shape(self):
        return self.nodes[-1].shape

    def add(self, kind, *inputs, name=None, **hyper):
        """Append a layer fed by node ids ``inputs`` (default: the last node)."""
        spec = LayerSpec(kind, dict(hyper))
        if not inputs:
            inputs = (self.output,)
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ShapeError(f"{kind}: input node {i} does not exist")
        name = name or f"{kind}{len(self.nodes)}"
        if any(n.name == name for n in self.nodes):
            raise ValueError(f"duplicate node name {name!r}")
        shape = self._infer(spec, [self.nodes[i].shape for i in inputs], name)
        self._create_params(spec, [self.nodes[i].shape for i in inputs], name)
        self.nodes.append(Node(name, spec, tuple(inputs), shape))
        return self.output

    def _infer(self, spec, shapes, name):
        h = spec.hyper
        kind = spec.kind
        if kind in ("concat", "add"):
            if len(shapes) < 2:
                raise ShapeError(f"{name}: {kind} needs at least two inputs")
        elif len(shapes) != 1:
            raise ShapeError(f"{name}: {kind} takes exactly one input")
        s = shapes[0]
        if kind in ("conv2d", "deconv2d"):
            if len(s) != 3:
                raise ShapeError(f"{name}: expected C×H×W input, got {s}")
            k, st, p = h["kernel"], h["stride"], h["padding"]
            fn = conv_out if kind == "conv2d" else deconv_out
            ho, wo = fn(s[1], k, st, p), fn(s[2], k, st, p)
            if ho < 1 or wo < 1:
                raise ShapeError(f"{name}: non-positive output size from {s}")
            return (h["out_channels"], ho, wo)
        if kind == "maxpool2x2":
            if len(s) != 3 or s[1] % 2 or s[2] % 2:
                raise ShapeError(f"{name}: maxpool2x2 needs even spatial dims, got {s}")
            return (s[0], s[1] // 2, s[2] // 2)
        if kind == "upsample2x":
            return (s[0], 2 * s[1], 2 * s[2])
        if kind == "linear":
            return (h["out_features"],)
        if kind == "concat":
            if any(t[1:] != s[1:] for t in shapes):
                raise ShapeError(f"{name}: concat spatial mismatch {shapes}")
            return (sum(t[0] for t in shapes),) + s[1:]
        if kind == "add":
            if any(t != s for t in shapes):
                raise ShapeError(f"{name}: add shape mismatch {shapes}")
            return s
        return s

    def _create_params(self, spec, shapes, name):
        h, s, rng = spec.hyper, shapes[0], self._rng
        kind = spec.kind
        if kind in ("conv2d", "deconv2d", "linear"):
            k = h.get("kernel", 1)
            if kind == "conv2d":
                wshape = (h["out_channels"], s[0], k, k)
                fan_in = s[0] * k * k
            elif kind == "deconv2d":
                wshape = (s[0], h["out_channels"], k, k)
                fan_in = max(1, s[0] * k * k // (h["stride"] ** 2))
            else:
                wshape = (h["out_features"], int(np.prod(s)))
                fan_in = wshape[1]
            bound = math.sqrt(6.0 / fan_in)  # Kaiming-uniform, ReLU gain
            self._param(name, "weight", kind, rng.uniform(-bound, bound, wshape))
            if h.get("bias", True):
                self._param(name, "bias", kind, np.zeros(wshape[0] if kind != "deconv2d" else wshape[1]))
        elif kind == "batchnorm":
            c = s[0]
            self._param(name, "gamma", kind, np.ones(c))
            self._param(name, "beta", kind, np.zeros(c))
            self.buffers[f"{name}.running_mean"] = np.zeros(c)
            self.buffers[f"{name}.running_var"] = np.ones(c)

    def _param(self, layer, role, kind, value):
        key = f"{layer}.{role}"
        self.params[key] = Parameter(Tensor(value, requires_grad=True, name=key), layer, kind, role)

    def param_count(self):
        return sum(p.data.size for p in self.params.values())

    def trainable(self):
        return {k: p for k, p in self.params.items() if p.trainable}

    def freeze(self, names=None):
        for k, p in self.params.items():
            if names is None or k in names:
                p.tensor.requires_grad = False
        return self

    def unfreeze(self):
        for p in self.params.values():
            p.tensor.requires_grad = True
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.tensor.grad = None

    def state(self):
        """Copy of every parameter and buffer array, keyed by name."""
        out = {k: p.data.copy() for k, p in self.params.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out

    def load_state(self, state):
        for k, p in self.params.items():
            p.tensor.data = np.array(state[k], dtype=T.DTYPE)
        for k in self.buffers:
            self.buffers[k] = np.array(state[k], dtype=T.DTYPE)

    def copy(self):
        g = Graph.__new__(Graph)
        g.input_shape, g.seed, g.header = self.input_shape, self.seed, dict(self.header)
        g.nodes = list(self.nodes)
        g._rng = np.random.default_rng(self.seed)
        g.params = {
            k: Parameter(Tensor(p.data.copy(), requires_grad=p.trainable, name=k), p.layer, p.kind, p.role)
            for k, p in self.params.items()
        }
        g.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return g


def forward(graph, x, mode="eval", overrides=None, check_finite=True):
    """Run ``graph`` on a batch.

    ``overrides`` maps parameter names to replacement arrays (used for
    dequantized or bit-flipped weights); overridden parameters are constants.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if tuple(x.shape[1:]) != graph.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} != declared {graph.input_shape}")
    train = mode == "train"
    overrides = overrides or {}

    def P(layer, role):
        key = f"{layer}.{role}"
        if key not in graph.params:
            return None
        if key in overrides:
            return Tensor(overrides[key])
        return graph.params[key].tensor

    vals = [x]
    for idx, node in enumerate(graph.nodes[1:], start=1):
        h, kind, name = node.spec.hyper, node.spec.kind, node.name
        ins = [vals[i] for i in node.inputs]
        a = ins[0]
        if kind == "conv2d":
            y = T.conv2d(a, P(name, "weight"), P(name, "bias"), h["stride"], h["padding"])
        elif kind == "deconv2d":
            y = T.conv_transpose2d(a, P(name, "weight"), P(name, "bias"), h["stride"], h["padding"])
        elif kind == "linear":
            y = T.linear(a, P(name, "weight"), P(name, "bias"))
        elif kind == "batchnorm":
            y = T.batch_norm(a, P(name, "gamma"), P(name, "beta"),
                             graph.buffers[f"{name}.running_mean"], graph.buffers[f"{name}.running_var"],
                             train, h.get("momentum", 0.1), h.get("eps", 1e-5))
        elif kind == "maxpool2x2":
            y = T.max_pool2x2(a)
        elif kind == "upsample2x":
            y = T.upsample2x(a)
        elif kind == "relu":
            y = T.relu(a)
        elif kind == "tanh":
            y = T.tanh(a)
        elif kind == "clip":
            y = T.clip(a, h.get("lo", -1.0), h.get("hi", 1.0))
        elif kind == "concat":
            y = T.concat(ins, axis=1)
        else:  # add
            y = ins[0]
            for t in ins[1:]:
                y = T.add(y, t)
        if check_finite and not np.all(np.isfinite(y.data)):
            raise NumericError(f"non-finite activation at layer {idx} ({name})")
        vals.append(y)
    return vals[-1]


def backward(graph, loss):
    """Backpropagate a scalar loss; returns ``{name: grad}`` for every parameter.

    Parameters the loss does not reach (or frozen ones) get zero gradients.
    """
    if not isinstance(loss, Tensor) or not loss.requires_grad:
        raise StateError("loss carries no tape; run forward with trainable inputs first")
    if loss.data.size != 1:
        raise StateError("loss must be a scalar")
    graph.zero_grad()
    loss.backward()
    return {
        k: (p.tensor.grad.copy() if p.tensor.grad is not None else np.zeros_like(p.data))
        for k, p in graph.params.items()
    }


def gradcheck(graph, x, epsilon=1e-3, mode="train", labels=None, cap=10_000, seed=0, wrt_input=False):
    """Max relative error between analytic and central-difference gradients.

    The scalar probed is cross-entropy against ``labels`` when given, else a
    fixed random projection of the output. Frozen parameters are skipped;
    ``wrt_input`` adds the input elements to the comparison.
    """
    params = graph.trainable()
    n = sum(p.data.size for p in params.values())
    if n > cap:
        raise ValueError(f"gradcheck refused: {n} trainable parameters exceed cap {cap}")
    x = np.array(x, dtype=T.DTYPE)
    proj = None
    if labels is None:
        shape = (x.shape[0],) + tuple(graph.output_shape)
        proj = np.random.default_rng(seed).standard_normal(shape)

    def loss_of(inp):
        out = forward(graph, inp, mode)
        if labels is not None:
            return T.cross_entropy(out, labels)
        return T.tsum(T.mul(out, proj))

    xin = Tensor(x, requires_grad=wrt_input)
    loss = loss_of(xin)
    if not loss.requires_grad:
        raise StateError("nothing to check: no trainable parameters and wrt_input=False")
    analytic = backward(graph, loss)
    targets = [(p.tensor.data, analytic[k]) for k, p in params.items()]
    if wrt_input:
        targets.append((x, xin.grad))
    worst = 0.0
    for data, grad in targets:
        flat, ga = data.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + epsilon
            up = loss_of(Tensor(x)).item()
            flat[i] = old - epsilon
            down = loss_of(Tensor(x)).item()
            flat[i] = old
            num = (up - down) / (2 * epsilon)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- checkpoints

def _manifest(graph):
    return {
        "input_shape": list(graph.input_shape),
        "seed": graph.seed,
        "header": graph.header,
        "nodes": [
            {"name": n.name, "kind": n.spec.kind, "inputs": list(n.inputs), "hyper": n.spec.hyper}
            for n in graph.nodes[1:]
        ],
        "params": [{"name": k, "shape": list(p.data.shape), "trainable": p.trainable}
                   for k, p in graph.params.items()],
        "buffers": [{"name": k, "shape": list(v.shape)} for k, v in graph.buffers.items()],
    }


def save_checkpoint(graph, path, quantized=None):
    """Write ``graph`` (and optionally its quantized weights) to ``path``."""
    man = _manifest(graph)
    if quantized:
        man["quantized"] = [{"name": k, "shape": list(q.codes.shape)} for k, q in quantized.items()]
    blob = json.dumps(man, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(blob)), blob]
    for p in graph.params.values():
        parts.append(p.data.astype("<f4").tobytes())
    for v in graph.buffers.values():
        parts.append(v.astype("<f4").tobytes())
    for q in (quantized or {}).values():
        parts.append(struct.pack("<Bf", q.bits, q.scale))
        parts.append(q.codes.astype("i1").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(graph, quantized_or_None)``."""
    from .quant import QuantizedWeights

    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    man = json.loads(raw[10:10 + mlen].decode("utf-8"))
    off = 10 + mlen
    g = Graph(man["input_shape"], seed=man["seed"])
    g.header = man.get("header", {})
    for n in man["nodes"]:
        g.add(n["kind"], *n["inputs"], name=n["name"], **n["hyper"])

    def take(shape, dtype):
        nonlocal off
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(dtype).itemsize
        if off + nbytes > len(raw):
            raise ValueError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).reshape(shape)
        off += nbytes
        return arr

    for entry in man["params"]:
        if entry["name"] not in g.params:  # free-standing tensors such as a UIP
            layer, role = entry["name"].rsplit(".", 1)
            g._param(layer, role, layer, np.zeros(entry["shape"]))
        p = g.params[entry["name"]]
        p.tensor.data = take(entry["shape"], "<f4").astype(T.DTYPE)
        p.tensor.requires_grad = entry.get("trainable", True)
    for entry in man["buffers"]:
        g.buffers[entry["name"]] = take(entry["shape"], "<f4").astype(T.DTYPE)
    quantized = None
    if "quantized" in man:
        quantized = {}
        for entry in man["quantized"]:
            bits, scale = struct.unpack_from("<Bf", raw, off)
            off += 5
            codes = take(entry["shape"], "i1").astype(np.int16)
            quantized[entry["name"]] = QuantizedWeights(codes, float(scale), int(bits))
    return g, quantized
