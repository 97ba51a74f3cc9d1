"""Weight-memory access, MAC and parameter accounting, and energy savings.

Energy model: the base model runs at low voltage, where each weight read
costs ``r`` (relative to nominal), while the generator runs at nominal
voltage. With TWMA counts::

    ES = (twma_base - (twma_base * r + twma_gen)) / twma_base * 100

and the same expression over MAC counts gives MAC-ES.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from importlib import resources

from .graph import WEIGHT_KINDS

# Relative per-access energy at the voltage giving a 1% bit-error rate.
ENERGY_RATIO_1PCT = 0.6936


@dataclass(frozen=True)
class ArrayConfig:
    rows: int = 32
    cols: int = 32
    weight_sram_bytes: int = 262_144
    dataflow: str = "output-stationary"
    elems_per_read: int = 1  # weights delivered per SRAM read

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("array dimensions must be positive")


@dataclass(frozen=True)
class FixtureRow:
    role: str
    name: str
    twma: int
    params: int
    macs: int


def load_fixtures(path=None):
    """Parse the bundled (or given) fixture table into ``{name: FixtureRow}``."""
    if path is None:
        text = resources.files("neuralfuse").joinpath("data/energy_fixtures.tsv").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    rows = {}
    for rec in csv.DictReader(lines, delimiter="\t"):
        rows[rec["name"]] = FixtureRow(rec["role"], rec["name"], int(rec["twma"]),
                                       int(rec["params"]), int(rec["macs"]))
    return rows


def _layers(graph):
    """Yield ``(kind, k, cin, cout, out_pixels)`` for every weight layer."""
    for node in graph.nodes[1:]:
        kind = node.spec.kind
        if kind not in WEIGHT_KINDS:
            continue
        src = graph.nodes[node.inputs[0]].shape
        h = node.spec.hyper
        if kind == "linear":
            yield kind, 1, int(math.prod(src)), h["out_features"], 1
        else:
            yield kind, h["kernel"], src[0], h["out_channels"], node.shape[1] * node.shape[2]


def count_twma(graph, array=ArrayConfig()):
    """Analytic filter-read count for an output-stationary systolic array.

    Output pixels map onto array rows and filters onto columns; every row
    fold re-streams the whole k*k*Cin x Cout filter matrix. Deconvolutions
    are counted as stride-1 convolutions with input/output channels swapped
    over the deconvolution's output area. With ``elems_per_read=8`` the
    counts for the ConvL/ConvS generators equal the bundled fixture values.
    """
    total = 0
    for kind, k, cin, cout, pixels in _layers(graph):
        if kind == "deconv2d":
            cin, cout = cout, cin
        row_folds = math.ceil(pixels / array.rows)
        total += math.ceil(k * k * cin * cout * row_folds / array.elems_per_read)
    return total


def twma_from_fixture(name, fixtures=None):
    return (fixtures or load_fixtures())[name].twma


def count_macs(graph):
    """Conv: k*k*Cin*Cout*Hout*Wout; linear: in*out; deconvs on their output."""
    return sum(k * k * cin * cout * pixels for _, k, cin, cout, pixels in _layers(graph))


def count_params(graph):
    """Weights, biases and batchnorm affine pairs; running statistics excluded."""
    return graph.param_count()


def energy_saving(twma_base, twma_nf, r=ENERGY_RATIO_1PCT):
    if twma_base <= 0 or twma_nf < 0:
        raise ValueError("access counts must be positive")
    if not 0 < r <= 1:
        raise ValueError("energy ratio must be in (0, 1]")
    return (twma_base - (twma_base * r + twma_nf)) / twma_base * 100.0


def mac_energy_saving(macs_base, macs_nf, r=ENERGY_RATIO_1PCT):
    if macs_base <= 0 or macs_nf < 0:
        raise ValueError("MAC counts must be positive")
    return (1.0 - r - macs_nf / macs_base) * 100.0


def efficiency_ratio(rp_percent, params):
    """Recovery percentage per million generator parameters."""
    if params <= 0:
        raise ValueError("parameter count must be positive")
    return rp_percent / (params / 1e6)


@dataclass
class EnergyReport:
    base: str
    generator: str
    twma_base: int
    twma_nf: int
    macs_base: int
    macs_nf: int
    params_nf: int
    energy_ratio: float
    es: float
    mac_es: float
    efficiency_ratio: float | None = None

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def energy_report(base, generator, r=ENERGY_RATIO_1PCT, rp=None, fixtures=None):
    """Report for a fixture base/generator pair by name."""
    fx = fixtures or load_fixtures()
    b, g = fx[base], fx[generator]
    return EnergyReport(
        base, generator, b.twma, g.twma, b.macs, g.macs, g.params, r,
        energy_saving(b.twma, g.twma, r), mac_energy_saving(b.macs, g.macs, r),
        None if rp is None else efficiency_ratio(rp, g.params),
    )


def graph_energy_report(base_graph, gen_graph, r=ENERGY_RATIO_1PCT, rp=None, array=ArrayConfig(),
                        base_name="base", gen_name="generator"):
    """Same report computed from graphs with the analytic counters."""
    tb, tg = count_twma(base_graph, array), count_twma(gen_graph, array)
    mb, mg = count_macs(base_graph), count_macs(gen_graph)
    pg = count_params(gen_graph)
    return EnergyReport(base_name, gen_name, tb, tg, mb, mg, pg, r,
                        energy_saving(tb, tg, r), mac_energy_saving(mb, mg, r),
                        None if rp is None else efficiency_ratio(rp, pg))


def energy_tables(r=ENERGY_RATIO_1PCT, fixtures=None):
    """ES and MAC-ES matrices for every fixture base x generator pair.

    Returns ``(bases, generators, es, mac_es)`` with row-major nested lists.
    """
    fx = fixtures or load_fixtures()
    bases = [n for n, row in fx.items() if row.role == "base"]
    gens = [n for n, row in fx.items() if row.role == "generator"]
    es = [[energy_saving(fx[b].twma, fx[g].twma, r) for g in gens] for b in bases]
    mes = [[mac_energy_saving(fx[b].macs, fx[g].macs, r) for g in gens] for b in bases]
    return bases, gens, es, mes


def tables_csv(bases, gens, matrix, digits=1):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["base"] + gens)
    for b, row in zip(bases, matrix):
        w.writerow([b] + [f"{v:.{digits}f}" for v in row])
    return buf.getvalue()


def fit_energy_ratio(es_table, mac_es_table, fixtures=None):
    """Least-squares ``r`` reproducing published ES and MAC-ES tables.

    Both formulas are ``(1 - r - overhead) * 100``, so the fit is the mean of
    ``1 - overhead - value/100`` over every cell.
    """
    fx = fixtures or load_fixtures()
    resid = []
    for table, attr in ((es_table, "twma"), (mac_es_table, "macs")):
        for (b, g), value in table.items():
            resid.append(1.0 - getattr(fx[g], attr) / getattr(fx[b], attr) - value / 100.0)
    return sum(resid) / len(resid)
