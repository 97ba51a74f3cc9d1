"""How one flipped bit moves an 8-bit weight, and what 1% BER does to a layer."""
import numpy as np

from neuralfuse.faults import BitErrorSpec, apply_bit_errors, sample_flip_mask
from neuralfuse.quant import decode_bits, dequantize, encode_bits, quantize

w = np.array([0.8, -0.31, 0.05, -1.2, 0.0])
q = quantize(w, 8)
print("scale", q.scale)
print("codes", q.codes)
print("dequantized", dequantize(q).round(4))

# flipping bit k of the code adds or subtracts 2**k; the sign bit is worth -128
code = int(q.codes[0])
for k in (0, 3, 7):
    bits = encode_bits(code, 8)
    bits[7 - k] ^= 1
    print(f"flip bit {k}: {code} -> {decode_bits(bits, 8)}")

# a layer-sized tensor at p = 1%: about 8% of weights take at least one hit
rng = np.random.default_rng(0)
layer = quantize(rng.normal(0, 0.1, (64, 32, 3, 3)), 8)
mask = sample_flip_mask(layer.shape, BitErrorSpec(0.01, seed=7), ("demo", 0))
hit = mask != 0
print("bits flipped", int(np.unpackbits(mask.ravel()).sum()), "of", mask.size * 8)
print("weights touched", hit.mean().round(4))
err = dequantize(apply_bit_errors(layer, mask)) - dequantize(layer)
print("largest weight error", np.abs(err).max().round(4), "vs max |w|", np.abs(dequantize(layer)).max().round(4))
