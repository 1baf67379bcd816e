"""Print the noise schedule and check the closed-form forward process empirically."""

import numpy as np

from longidiff.codec import decode, encode
from longidiff.scheduler import make_schedule, q_sample

sched = make_schedule(T=50, beta_start=1e-4, beta_end=0.2)
print(" t    beta     alpha_bar  signal  noise")
for t in (1, 5, 10, 20, 30, 40, 50):
    a = sched.alpha_bars[t]
    print(f"{t:2d}  {sched.betas[t]:.5f}  {a:.6f}  {np.sqrt(a):.4f}  {np.sqrt(1 - a):.4f}")

rng = np.random.default_rng(0)
z0 = np.full(20_000, 0.6)
for t in (1, 25, 50):
    z = q_sample(sched, z0, np.full(z0.size, t), rng.standard_normal(z0.size))
    a = sched.alpha_bars[t]
    print(f"t={t:2d}  mean {z.mean():+.4f} (expect {np.sqrt(a) * 0.6:+.4f})  var {z.var():.4f} (expect {1 - a:.4f})")

img = rng.random((1, 32, 32)).astype(np.float32)
lat = encode(img, 4)
print("latent shape", lat.shape, "round trip exact:", decode(lat, 4).tobytes() == img.tobytes())
