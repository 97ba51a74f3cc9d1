"""Command-line entry point.

Every experiment subcommand builds a JSON experiment config (``--config``
file first, then flags on top) and hands it to ``run_experiment``. Flags
mirror config keys: ``--seed`` -> seed, ``--ber`` -> eopm.ber and eval.bers,
``--lambda`` -> eopm.lam, ``--n-perturbed`` -> eopm.n_perturbed, ``--arch``
-> base.arch or generator.family (by name), ``--scale`` -> generator.scale.
Outputs go to ``--out``, else ``$NEURALFUSE_OUTPUT/<name>``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import energy, harness
from .generators import FAMILIES
from .graph import load_checkpoint
from .models import ARCHS


def _floats(text):
    return [float(v) for v in text.split(",") if v]


def _ints(text):
    return [int(v) for v in text.split(",") if v]


def _common(p):
    p.add_argument("--config", help="JSON experiment config; flags override its keys")
    p.add_argument("--out", help="output directory")
    p.add_argument("--name", help="experiment name (output subdirectory)")
    p.add_argument("--seed", type=int)
    p.add_argument("--ber", type=float, help="bit-error rate for training and evaluation")
    p.add_argument("--eval-bers", type=_floats, help="comma-separated evaluation BERs")
    p.add_argument("--eval-n", type=int, help="perturbed models per evaluation")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--n-perturbed", type=int)
    p.add_argument("--epochs", type=int, help="EOPM epochs")
    p.add_argument("--base-epochs", type=int)
    p.add_argument("--arch", action="append", default=[],
                   help=f"base arch {ARCHS} or generator family {FAMILIES}; repeatable")
    p.add_argument("--scale", type=float, help="generator width scale")
    p.add_argument("--bits", type=int, help="weight precision of the base model")
    p.add_argument("--qat", action="store_true", help="quantization-aware base training")
    p.add_argument("--base", help="base-model checkpoint")
    p.add_argument("--generator", help="generator checkpoint")
    p.add_argument("--dataset", choices=("synth", "cifar10"))
    p.add_argument("--data-dir", help="directory with the CIFAR-10 binary batches")
    p.add_argument("--classes", type=_ints, help="comma-separated class subset")
    p.add_argument("--per-class", type=int, help="training images per class")
    p.add_argument("--energy-ratio", type=float, help="relative access energy r at the low voltage")


def build_config(args, command):
    user = {}
    if args.config:
        with open(args.config) as fh:
            user = json.load(fh)
    cfg = harness.merge_config(user)
    cfg["name"] = args.name or user.get("name") or command
    if args.out:
        cfg["output_dir"] = args.out
    if args.seed is not None:
        cfg["seed"] = args.seed
    ds = cfg["dataset"]
    for flag, key in (("dataset", "kind"), ("data_dir", "path"), ("classes", "classes"),
                      ("per_class", "n_per_class")):
        if getattr(args, flag) is not None:
            ds[key] = getattr(args, flag)
    if args.classes is not None and ds["kind"] == "synth":
        ds["num_classes"] = len(args.classes)
    base = cfg["base"]
    for flag, key in (("base", "checkpoint"), ("bits", "bits"), ("base_epochs", "epochs")):
        if getattr(args, flag) is not None:
            base[key] = getattr(args, flag)
    if args.qat:
        base["qat"] = True
    gen_fams = [a for a in args.arch if a in FAMILIES + ("UIP",)]
    for a in args.arch:
        if a in ARCHS:
            base["arch"] = a
        elif a not in FAMILIES + ("UIP",):
            raise SystemExit(f"unknown --arch {a!r}")
    want_gen = command == "train-generator" or args.generator or gen_fams or cfg["generator"]
    if want_gen:
        gen = {**harness.GENERATOR_DEFAULTS, **(cfg["generator"] or {})}
        if gen_fams:
            gen["family"] = gen_fams[-1]
        if args.scale is not None:
            gen["scale"] = args.scale
        if args.generator:
            gen["checkpoint"] = args.generator
        cfg["generator"] = gen
    ep = cfg["eopm"]
    for flag, key in (("ber", "ber"), ("lam", "lam"), ("n_perturbed", "n_perturbed"), ("epochs", "epochs")):
        if getattr(args, flag) is not None:
            ep[key] = getattr(args, flag)
    if args.ber is not None:
        cfg["eval"]["bers"] = [args.ber]
    if args.eval_bers is not None:
        cfg["eval"]["bers"] = args.eval_bers
    if args.eval_n is not None:
        cfg["eval"]["n"] = args.eval_n
    if args.energy_ratio is not None:
        cfg["energy"] = {"r": args.energy_ratio}
    return cfg


def _run(cfg):
    out = harness.run_experiment(cfg)
    for name in ("eval.csv", "transfer.csv", "sweep.csv"):
        if (out / name).exists():
            print(f"# {out / name}")
            sys.stdout.write((out / name).read_text())
    return 0


def cmd_experiment(args):
    cfg = build_config(args, args.command)
    if args.command == "train-base":
        cfg["generator"] = None
    elif args.command == "eval" and not cfg["base"].get("checkpoint"):
        raise SystemExit("eval needs --base CHECKPOINT")
    elif args.command == "transfer":
        if not cfg["generator"]:
            raise SystemExit("transfer needs a generator (--generator CHECKPOINT or --arch FAMILY)")
        t = cfg.get("transfer") or {}
        if args.target:
            t["targets"] = [{"checkpoint": p, "name": Path(p).stem} for p in args.target]
        t.setdefault("targets", [])
        for a in args.target_arch or []:
            t["targets"].append({"arch": a, "name": a})
        if args.transfer_bers:
            t["bers"] = args.transfer_bers
        cfg["transfer"] = t
    elif args.command == "sweep-precision":
        sw = cfg.get("sweep") or {}
        if args.sweep_bits:
            sw["bits"] = args.sweep_bits
        sw.setdefault("ber", cfg["eval"]["bers"][0])
        cfg["sweep"] = sw
    try:
        return _run(cfg)
    except harness.ConfigError as e:
        raise SystemExit(f"config error: {e}")


def cmd_energy(args):
    r = args.energy_ratio
    if args.base_checkpoint:
        if not args.generator_checkpoint:
            raise SystemExit("--base-checkpoint needs --generator-checkpoint")
        bg, _ = load_checkpoint(args.base_checkpoint)
        gg, _ = load_checkpoint(args.generator_checkpoint)
        arr = energy.ArrayConfig(elems_per_read=args.elems_per_read)
        rep = energy.graph_energy_report(bg, gg, r, args.rp, arr,
                                         Path(args.base_checkpoint).stem, Path(args.generator_checkpoint).stem)
    else:
        fx = energy.load_fixtures(args.fixtures)
        missing = [n for n in (args.base_model, args.generator_model) if n not in fx]
        if missing:
            raise SystemExit(f"unknown fixture model(s) {missing}; known: {sorted(fx)}")
        rep = energy.energy_report(args.base_model, args.generator_model, r, args.rp, fx)
    print(rep.to_json())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(rep.to_json() + "\n")
    return 0


def cmd_tables(args):
    fx = energy.load_fixtures(args.fixtures)
    bases, gens, es, mes = energy.energy_tables(args.energy_ratio, fx)
    es_csv = energy.tables_csv(bases, gens, es)
    mes_csv = energy.tables_csv(bases, gens, mes)
    print("# ES (%) from weight-memory accesses")
    sys.stdout.write(es_csv)
    print("# MAC-ES (%) from MAC counts")
    sys.stdout.write(mes_csv)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "energy_es.csv").write_text(es_csv)
        (out / "energy_mac_es.csv").write_text(mes_csv)
    return 0


def parser():
    ap = argparse.ArgumentParser(prog="neuralfuse", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("train-base", "train and quantize a base classifier"),
                        ("train-generator", "train a generator with EOPM"),
                        ("eval", "CA/PA/RP of a base model with or without a generator"),
                        ("transfer", "evaluate one generator across target models and BERs"),
                        ("sweep-precision", "re-quantize at several precisions and evaluate")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        if name == "transfer":
            p.add_argument("--target", action="append", help="target checkpoint; repeatable")
            p.add_argument("--target-arch", action="append", help="train a fresh target of this arch")
            p.add_argument("--transfer-bers", type=_floats)
        if name == "sweep-precision":
            p.add_argument("--sweep-bits", type=_ints, default=[8, 7, 6, 5, 4, 3, 2])
        p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("energy", help="energy report for one base/generator pair")
    p.add_argument("--base-model", default="ResNet18", help="fixture base-model name")
    p.add_argument("--generator-model", default="ConvL", help="fixture generator name")
    p.add_argument("--base-checkpoint", help="count a base checkpoint analytically instead")
    p.add_argument("--generator-checkpoint")
    p.add_argument("--elems-per-read", type=int, default=1)
    p.add_argument("--rp", type=float, help="recovery percentage for the efficiency ratio")
    p.add_argument("--energy-ratio", type=float, default=energy.ENERGY_RATIO_1PCT)
    p.add_argument("--fixtures", help="alternative fixture table")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_energy)

    p = sub.add_parser("reproduce-energy-tables", help="ES and MAC-ES for every fixture pair")
    p.add_argument("--energy-ratio", type=float, default=energy.ENERGY_RATIO_1PCT)
    p.add_argument("--fixtures", help="alternative fixture table")
    p.add_argument("--out", help="directory for energy_es.csv and energy_mac_es.csv")
    p.set_defaults(func=cmd_tables)
    return ap


def main(argv=None):
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
