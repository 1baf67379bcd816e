"""Train a small denoiser for a few hundred steps and fill in the last visit of a test eye.

Usage: python demos/complete_a_sequence.py [workdir]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from longidiff.config import from_dict
from longidiff.evaluation import last_visit_request
from longidiff.fundus import DataConfig, gen_dataset, load_dataset, write_image
from longidiff.metrics import psnr, ssim
from longidiff.sampling import generate_frames
from longidiff.training import load_params, read_loss_log, train

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
data = dict(n_train=16, n_val=2, n_test=4, time_variant_fraction=0.5)
gen_dataset(DataConfig(**data), work / "data", seed=1)
cfg = from_dict(
    {
        "seed": 1,
        "data_dir": str(work / "data"),
        "run_dir": str(work / "run"),
        "steps": 300,
        "lr": 1e-3,
        "lr_decay_steps": 300,
        "ema_decay": 0.99,
        "data": data,
    }
)
train(cfg, log=print)
loss = read_loss_log(cfg.run_dir)
print(f"loss {loss[:10].mean():.3f} -> {loss[-10:].mean():.3f}")

params = load_params(cfg, Path(cfg.run_dir) / "checkpoint.bin")
seq = load_dataset(cfg.data_dir).split("test")[0]
req, win, slot = last_visit_request(seq, cfg, cfg.to_latent(seq.frames), seed=0)
print("eye", seq.eye_id, "years", seq.years.tolist(), "mask", req.codes.tolist())
frame = generate_frames(params, cfg, [req])[0]
truth, last = seq.frames[-1], seq.frames[-2]
print(f"generated: PSNR {psnr(frame, truth):.2f} dB, SSIM {ssim(frame, truth):.3f}")
print(f"copy-last: PSNR {psnr(last, truth):.2f} dB, SSIM {ssim(last, truth):.3f}")
write_image(work / "generated.png", frame)
write_image(work / "truth.png", truth)
print("images in", work)
