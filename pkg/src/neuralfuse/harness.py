"""Evaluation protocols and experiment orchestration.

Report CSV columns (``REPORT_COLUMNS``)::

    model, generator, bits, ber, n, seed,
    CA, PA_mean, PA_std, CA_NF, PA_NF_mean, PA_NF_std, RP

Accuracies are percentages with four decimals; NF columns are empty when no
generator was evaluated. PA is the mean and population std over ``n``
perturbed models drawn from the ``"eval"`` fault stream, which never
overlaps the ``"train"``/``"val"`` streams used during generator training.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, dataio, energy
from .eopm import BaseTrainConfig, EopmConfig, train_base, train_generator
from .faults import DEFAULT_ANCHORS, BitErrorSpec, QuantizedModel, VoltageCurve, sample_perturbed_model
from .generators import GeneratorArch, UIP, apply_transform, build_generator, generator_from_graph
from .graph import forward, load_checkpoint, save_checkpoint
from .models import build_base
from .quant import quantize_model

log = logging.getLogger(__name__)

OUTPUT_ENV = "NEURALFUSE_OUTPUT"
REPORT_COLUMNS = ("model", "generator", "bits", "ber", "n", "seed", "CA", "PA_mean", "PA_std",
                  "CA_NF", "PA_NF_mean", "PA_NF_std", "RP")
TRANSFER_COLUMNS = ("source", "target", "same_model") + REPORT_COLUMNS[2:]


class ConfigError(ValueError):
    pass


@dataclass
class EvalReport:
    model: str
    generator: str | None
    bits: int
    ber: float
    n: int
    seed: int
    ca: float
    pa_mean: float
    pa_std: float
    ca_nf: float | None = None
    pa_nf_mean: float | None = None
    pa_nf_std: float | None = None
    pa: list = field(default_factory=list, repr=False)
    pa_nf: list = field(default_factory=list, repr=False)

    @property
    def rp(self):
        return None if self.pa_nf_mean is None else self.pa_nf_mean - self.pa_mean

    def row(self):
        def f(v):
            return "" if v is None else f"{v:.4f}"

        return [self.model, self.generator or "", self.bits, f"{self.ber:g}", self.n, self.seed,
                f(self.ca), f(self.pa_mean), f(self.pa_std), f(self.ca_nf), f(self.pa_nf_mean),
                f(self.pa_nf_std), f(self.rp)]

    def to_dict(self):
        d = asdict(self)
        d["rp"] = self.rp
        return d


def _predict(model, images, batch_size=500):
    out = []
    for lo in range(0, len(images), batch_size):
        out.append(model.forward(images[lo:lo + batch_size]).data.argmax(axis=1))
    return np.concatenate(out)


def transformed(gen, images, batch_size=500):
    """``F(x)`` for a whole image array (generator in eval mode)."""
    if gen is None:
        return images
    parts = [apply_transform(gen, images[lo:lo + batch_size], "eval").data
             for lo in range(0, len(images), batch_size)]
    return np.concatenate(parts)


def _acc(model, images, labels):
    return 100.0 * float(np.mean(_predict(model, images) == labels))


def evaluate(base, generator, p, n, seed, test, gen_name=None):
    """CA/PA of a quantized model, optionally behind a generator.

    The same ``n`` perturbed models are used with and without the generator.
    """
    if len(test) == 0:
        raise ValueError("empty test set")
    x, y = test.images, test.labels
    xt = transformed(generator, x) if generator is not None else None
    spec = BitErrorSpec(p, seed, base.bits)
    ca = _acc(base, x, y)
    ca_nf = _acc(base, xt, y) if xt is not None else None
    pa, pa_nf = [], []
    for i in range(n):
        if p == 0:
            pa.append(ca)
            if xt is not None:
                pa_nf.append(ca_nf)
            continue
        m = sample_perturbed_model(base, spec, i, namespace="eval")
        pa.append(_acc(m, x, y))
        if xt is not None:
            pa_nf.append(_acc(m, xt, y))
    if generator is not None and gen_name is None:
        gen_name = _gen_label(generator)
    rep = EvalReport(base.name, gen_name if generator is not None else None, base.bits, p, n, seed,
                     ca, float(np.mean(pa)), float(np.std(pa)), pa=pa)
    if xt is not None:
        rep.ca_nf, rep.pa_nf = ca_nf, pa_nf
        rep.pa_nf_mean, rep.pa_nf_std = float(np.mean(pa_nf)), float(np.std(pa_nf))
    return rep


def _gen_label(gen):
    if isinstance(gen, UIP):
        return "UIP"
    return f"{gen.arch.family}@{gen.arch.scale:g}"


def reports_csv(reports, path=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow(r.row())
    return _emit(buf.getvalue(), path)


def _emit(text, path):
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


@dataclass
class TransferCell:
    source: str
    target: str
    same_model: bool
    report: EvalReport


def transfer_eval(generator, targets, bers, n, seed, test, source="surrogate"):
    """Evaluate one trained generator on every (target, BER) cell."""
    cells = []
    for t in targets:
        for p in bers:
            cells.append(TransferCell(source, t.name, t.name == source, evaluate(t, generator, p, n, seed, test)))
    return cells


def transfer_csv(cells, path=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRANSFER_COLUMNS)
    for c in cells:
        w.writerow([c.source, c.target, int(c.same_model)] + c.report.row()[2:])
    return _emit(buf.getvalue(), path)


def float_accuracy(graph, test):
    preds = np.concatenate([forward(graph, test.images[lo:lo + 500]).data.argmax(axis=1)
                            for lo in range(0, len(test), 500)])
    return 100.0 * float(np.mean(preds == test.labels))


def precision_sweep(graph, generator, bits_list, p, n, seed, test, name="base"):
    """Re-quantize ``graph`` at each precision and evaluate with/without faults and generator."""
    bad = [b for b in bits_list if not 2 <= b <= 8]
    if bad:
        raise ValueError(f"precisions must lie in 2..8, got {bad}")
    out = []
    for b in bits_list:
        qm = QuantizedModel(graph, quantize_model(graph, b), b, name)
        out.append(evaluate(qm, generator, p, n, seed, test))
    return out


# ---------------------------------------------------------------- experiments

DEFAULT_CONFIG = {
    "name": "experiment",
    "seed": 0,
    "output_dir": None,
    "dataset": {"kind": "synth", "num_classes": 4, "n_per_class": 250, "test_per_class": 100,
                "val_per_class": 50, "image_size": 16, "separation": 0.35, "noise": 0.5,
                "path": None, "classes": [0, 1, 2, 3]},
    "base": {"arch": "tinycnn-a", "epochs": 20, "batch_size": 32, "lr": 1e-3, "qat": False,
             "bits": 8, "checkpoint": None},
    "generator": None,
    "eopm": {"lam": 5.0, "n_perturbed": 5, "ber": 0.01, "epochs": 20, "batch_size": 25,
             "lr": 1e-3, "val_n": 5},
    "eval": {"bers": [0.01], "n": 10},
    "transfer": None,
    "sweep": None,
    "energy": None,
    "voltage": None,
}
GENERATOR_DEFAULTS = {"family": "ConvS", "scale": 0.25, "identity_init": True, "checkpoint": None}


ENERGY_ONLY_KEYS = {"name", "seed", "output_dir", "energy", "voltage", "mode"}


def merge_config(user):
    """Deep-merge ``user`` over the defaults.

    A config holding nothing but an ``energy`` section (plus name, seed,
    output_dir, voltage) gets ``mode = "energy-only"``: no data is loaded and
    no model is trained.
    """
    user = user or {}
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if "mode" not in user:
        energy_only = user.get("energy") is not None and set(user) <= ENERGY_ONLY_KEYS
        cfg["mode"] = "energy-only" if energy_only else "full"
    for k, v in user.items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k].update(v)
        elif k == "generator" and isinstance(v, dict):
            cfg[k] = {**GENERATOR_DEFAULTS, **v}
        else:
            cfg[k] = v
    return cfg


def config_hash(cfg):
    canon = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(canon, sort_keys=True).encode()).hexdigest()


def load_config(path):
    with open(path) as fh:
        return merge_config(json.load(fh))


def output_root(cfg):
    if cfg.get("output_dir"):
        return Path(cfg["output_dir"])
    return Path(os.environ.get(OUTPUT_ENV, "runs")) / cfg["name"]


def validate_config(cfg):
    for section in ("base", "generator"):
        ck = (cfg.get(section) or {}).get("checkpoint")
        if ck and not Path(ck).is_file():
            raise ConfigError(f"{section}.checkpoint {ck!r} does not exist")
    for t in (cfg.get("transfer") or {}).get("targets", []):
        if t.get("checkpoint") and not Path(t["checkpoint"]).is_file():
            raise ConfigError(f"transfer target checkpoint {t['checkpoint']!r} does not exist")
    ds = cfg["dataset"]
    if ds["kind"] not in ("synth", "cifar10"):
        raise ConfigError(f"unknown dataset kind {ds['kind']!r}")
    if ds["kind"] == "cifar10" and needs_data(cfg) and not ds.get("path"):
        raise ConfigError("dataset.path is required for cifar10")


def apply_voltage(cfg):
    """Resolve a ``voltage`` section into BER and energy-ratio settings.

    ``{"v_ratio": 0.83, "anchors": [[v, ber, energy], ...]}`` sets the
    training BER, the evaluation BER list and the energy ratio from the
    curve; anchors default to the built-in pair.
    """
    vs = cfg.get("voltage")
    if not vs:
        return cfg
    curve = VoltageCurve(vs.get("anchors") or DEFAULT_ANCHORS)
    if "v_ratio" in vs:
        point = curve(vs["v_ratio"])
        cfg["eopm"]["ber"] = point.ber
        cfg["eval"]["bers"] = [point.ber]
        if cfg.get("energy") is not None:
            cfg["energy"]["r"] = point.energy_ratio
    return cfg


def needs_data(cfg):
    return cfg.get("mode") != "energy-only"


def load_data(ds, seed):
    """``(train, val, test)`` for a dataset section."""
    if ds["kind"] == "synth":
        kw = dict(image_size=ds["image_size"], seed=seed, separation=ds["separation"], noise=ds["noise"])
        return (dataio.synth_dataset(ds["num_classes"], ds["n_per_class"], split="train", **kw),
                dataio.synth_dataset(ds["num_classes"], ds["val_per_class"], split="val", **kw),
                dataio.synth_dataset(ds["num_classes"], ds["test_per_class"], split="test", **kw))
    train, test = dataio.load_cifar10(ds["path"])
    classes = ds["classes"]
    tr = dataio.subset(train, classes, ds["n_per_class"] + ds["val_per_class"], seed)
    cut = ds["n_per_class"] * len(classes)
    train_part = dataio.Dataset(tr.images[:cut], tr.labels[:cut], tr.num_classes, "train")
    val_part = dataio.Dataset(tr.images[cut:], tr.labels[cut:], tr.num_classes, "val")
    return train_part, val_part, dataio.subset(test, classes, ds["test_per_class"], seed)


def obtain_base(section, shape, num_classes, train, seed, name="base"):
    """Load or train a base model; returns ``(graph, QuantizedModel)``."""
    bits = section.get("bits", 8)
    if section.get("checkpoint"):
        graph, q = load_checkpoint(section["checkpoint"])
        q = q if q and next(iter(q.values())).bits == bits else quantize_model(graph, bits)
        return graph, QuantizedModel(graph, q, bits, name)
    graph = build_base(section["arch"], shape, num_classes, seed)
    cfg = BaseTrainConfig(section["epochs"], section["batch_size"], section["lr"], seed, bits)
    train_base(graph, train, cfg, qat=section.get("qat", False))
    return graph, QuantizedModel.from_graph(graph, bits, name)


def eopm_config(section, seed):
    keys = ("lam", "n_perturbed", "ber", "epochs", "batch_size", "lr", "val_n")
    return EopmConfig(**{k: section[k] for k in keys if k in section}, seed=seed)


def obtain_generator(section, eopm_section, shape, bases, train, val, seed):
    """Load or EOPM-train a generator; returns ``(generator, history_or_None)``."""
    if section.get("checkpoint"):
        graph, _ = load_checkpoint(section["checkpoint"])
        if graph.header.get("family") == "UIP":
            u = UIP(graph.input_shape)
            u.graph.load_state(graph.state())
            return u, None
        return generator_from_graph(graph), None
    if section["family"] == "UIP":
        gen = UIP(shape)
    else:
        gen = build_generator(GeneratorArch(section["family"], section["scale"], tuple(shape)),
                              seed=seed, identity_init=section.get("identity_init", True))
    return train_generator(eopm_config(eopm_section, seed), gen, bases, train, val)


def run_experiment(config):
    """Train/load, evaluate and persist everything ``config`` asks for.

    Writes into the output directory: ``manifest.json`` (marked
    ``"incomplete"`` until every step finishes), checkpoints, ``history.csv``,
    ``eval.csv``/``eval.json``, ``transfer.csv``, ``sweep.csv`` and energy
    tables, depending on the sections present. Returns the directory.
    """
    cfg = apply_voltage(merge_config(config))
    validate_config(cfg)
    out = output_root(cfg)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg["seed"]
    manifest = {"name": cfg["name"], "config_hash": config_hash(cfg), "seed": seed,
                "code_version": __version__, "status": "incomplete", "artifacts": [], "config": cfg}

    def write_manifest():
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    def record(name):
        manifest["artifacts"].append(name)
        write_manifest()

    write_manifest()
    try:
        _execute(cfg, out, seed, record)
    except BaseException as e:
        manifest["error"] = f"{type(e).__name__}: {e}"
        write_manifest()
        raise
    manifest["status"] = "complete"
    write_manifest()
    return out


def _execute(cfg, out, seed, record):
    if cfg.get("energy"):
        r = cfg["energy"].get("r", energy.ENERGY_RATIO_1PCT)
        bases, gens, es, mes = energy.energy_tables(r)
        _emit(energy.tables_csv(bases, gens, es), out / "energy_es.csv")
        _emit(energy.tables_csv(bases, gens, mes), out / "energy_mac_es.csv")
        record("energy_es.csv")
        record("energy_mac_es.csv")
    if not needs_data(cfg):
        return

    train, val, test = load_data(cfg["dataset"], seed)
    shape = train.shape
    graph, base = obtain_base(cfg["base"], shape, train.num_classes, train, seed, cfg["base"]["arch"])
    save_checkpoint(graph, out / "base.nfck", quantized=base.qweights)
    record("base.nfck")

    gen = None
    if cfg.get("generator"):
        gen, hist = obtain_generator(cfg["generator"], cfg["eopm"], shape, [base], train, val, seed)
        save_checkpoint(gen.graph, out / "generator.nfck")
        record("generator.nfck")
        if hist is not None:
            hist.to_csv(out / "history.csv")
            record("history.csv")

    reports = [evaluate(base, gen, p, cfg["eval"]["n"], seed, test) for p in cfg["eval"]["bers"]]
    reports_csv(reports, out / "eval.csv")
    (out / "eval.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True))
    record("eval.csv")
    record("eval.json")

    if cfg.get("transfer"):
        tcfg = cfg["transfer"]
        targets = [base]
        for i, t in enumerate(tcfg.get("targets", [])):
            section = {**cfg["base"], "checkpoint": None, **t}
            _, qm = obtain_base(section, shape, train.num_classes, train, seed + 1 + i,
                                t.get("name", f"{section['arch']}#{i}"))
            targets.append(qm)
        cells = transfer_eval(gen, targets, tcfg.get("bers", cfg["eval"]["bers"]),
                              cfg["eval"]["n"], seed, test, source=base.name)
        transfer_csv(cells, out / "transfer.csv")
        record("transfer.csv")

    if cfg.get("sweep"):
        sc = cfg["sweep"]
        reps = precision_sweep(graph, gen, sc.get("bits", [8, 7, 6, 5, 4, 3, 2]),
                               sc.get("ber", cfg["eval"]["bers"][0]), cfg["eval"]["n"], seed, test,
                               name=base.name)
        reports_csv(reps, out / "sweep.csv")
        record("sweep.csv")

    if gen is not None and not isinstance(gen, UIP) and cfg.get("energy"):
        rp = reports[0].rp
        rep = energy.graph_energy_report(graph, gen.graph, cfg["energy"].get("r", energy.ENERGY_RATIO_1PCT),
                                         rp=rp, base_name=base.name, gen_name=_gen_label(gen))
        (out / "energy_report.json").write_text(rep.to_json())
        record("energy_report.json")
