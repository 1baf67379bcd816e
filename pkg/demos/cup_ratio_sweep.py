"""Render one synthetic eye at several cup-to-disc ratios and measure them back from pixels."""

import numpy as np

from longidiff.fundus import random_phenotype, render_ratio, to_uint8
from longidiff.metrics import vcdr

rng = np.random.default_rng(3)
eye = random_phenotype(rng, "demo", [2000, 2004], time_variant=True)
print("ratio  measured(float)  measured(8-bit)  threshold")
for ratio in np.linspace(0.3, 0.9, 7):
    img = render_ratio(eye, float(ratio))
    quantised = to_uint8(img).astype(np.float32) / 255.0
    a, b = vcdr(img), vcdr(quantised)
    print(f"{ratio:.2f}   {a.vcdr:.4f}           {b.vcdr:.4f}           {a.threshold:.2f}")
