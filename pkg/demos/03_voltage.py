"""Undervolting trades weight-memory energy for bit errors."""
import numpy as np

from neuralfuse.faults import VoltageCurve

curve = VoltageCurve()
for v in np.arange(0.78, 1.01, 0.02):
    pt = curve(v)
    print(f"V/Vmin={v:.2f}  BER={pt.ber:.5f}  energy={pt.energy_ratio:.4f}")

print("voltage giving 1% BER:", round(curve.voltage_for_ber(0.01), 4))
print("voltage giving 0.5% BER:", round(curve.voltage_for_ber(0.005), 4))
