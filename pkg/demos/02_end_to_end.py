"""Transmit a synthetic clip end to end and report quality versus SNR.

A moving-rectangle clip is encoded GoP by GoP (first frame as reference,
the rest as motion residuals), sent through a Rayleigh channel with MMSE
equalization, and reconstructed at the receiver with diffusion-based
compensation using oracle noise predictors (so no training is needed to
see the channel behaviour).
"""

import numpy as np

from semvid import (
    ExperimentConfig,
    MotionSpec,
    SystemModels,
    evaluate,
    generate_clip,
    mean_psnr_by,
)

cfg = ExperimentConfig()
cfg.model.update(height=32, width=32)
clip = generate_clip(MotionSpec("rect", (2, 0), seed=7), 32, 32, 20)
models = SystemModels(cfg)
sched = cfg.schedule()
params = cfg.compensation()   # paper-style defaults: m=10, lambda=0.7, k=0.3

print(f"clip: {clip.frame_count} frames of {clip.width}x{clip.height}, "
      f"semantic length L = {models.length}")
print(f"compensation: m = {params.start_step}, lambda = {params.lambda_i}, "
      f"k(t) = {params.k_of_t(0)}\n")

snrs = [0.0, 6.0, 12.0, 18.0, float("inf")]
rows = evaluate(clip.frames, models, snrs, params, sched,
                seeds=[0, 1, 2], gop_size=4, oracle=True)
by_snr = mean_psnr_by(rows, "snr_db")

print(f"{'SNR (dB)':>10} {'mean PSNR (dB)':>15}")
for snr in snrs:
    label = "noiseless" if snr == float("inf") else f"{snr:g}"
    print(f"{label:>10} {by_snr[snr]:>15.2f}")

i_rows = [r for r in rows if r["role"] == "I" and r["snr_db"] == 6.0]
p_rows = [r for r in rows if r["role"] == "P" and r["snr_db"] == 6.0]
print(f"\nat 6 dB: I frames {np.mean([r['psnr_db'] for r in i_rows]):.2f} dB, "
      f"P frames {np.mean([r['psnr_db'] for r in p_rows]):.2f} dB")
print("PSNR grows with SNR; the noiseless run is limited only by the "
      "codec's coefficient truncation.")
