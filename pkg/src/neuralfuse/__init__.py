"""Bit-error-resilient input transformations for low-voltage accelerators.

Modules:
  tensor, graph   reverse-mode autodiff on numpy and a layer-graph container
  dataio          CIFAR-10 binary loader and synthetic blob datasets
  quant, faults   b-bit quantization, two's-complement codec, bit-error injection
  generators      ConvL/S, DeConvL/S, UNetL/S generators, UIP baseline
  eopm            expectation-over-perturbed-models training
  energy          weight-access, MAC and parameter accounting, energy savings
  harness         CA/PA/RP evaluation, transfer and precision sweeps, experiments
"""
__version__ = "0.1.0"
