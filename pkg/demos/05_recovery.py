"""Full pipeline: base model, EOPM-trained ConvS generator, UIP baseline, CSV report.

Takes a few minutes on one core.
"""
import sys

from neuralfuse.harness import run_experiment

out = sys.argv[1] if len(sys.argv) > 1 else "runs/demo_recovery"
cfg = {
    "name": "demo",
    "output_dir": out,
    "generator": {"family": "ConvS", "scale": 0.25},
    "eval": {"bers": [0.01], "n": 10},
}
path = run_experiment(cfg)
print((path / "eval.csv").read_text())

uip = run_experiment({**cfg, "output_dir": out + "_uip",
                      "base": {"checkpoint": str(path / "base.nfck")},
                      "generator": {"family": "UIP"}})
print((uip / "eval.csv").read_text())
