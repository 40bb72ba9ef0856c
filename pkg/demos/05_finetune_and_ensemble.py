"""
Squeezing more out at test time: adaptation and averaging
=========================================================

Two refinements that need no extra training data:

  * semi-supervised fine-tuning re-fits the checkpoint to one measured slice,
    balancing the k-space data term against staying similar to the model's
    own supervised reconstruction (the prior);
  * ensembling averages reconstructions from independently trained members,
    which can never increase the mean squared error (Jensen).

Run 04_train_unrolled.py first; this script reuses its corpus and checkpoint.
"""

from pathlib import Path

import numpy as np

from unrollmri.data import load_training_samples
from unrollmri.losses import LossConfig
from unrollmri.metrics import evaluate_metrics
from unrollmri.networks import ModelCheckpoint, unrolled_recon
from unrollmri.training import ensemble_average, finetune, train

OUT = Path(__file__).parent / "out"
R = 4

paths = sorted((OUT / "corpus").glob("*.h5"))
if not paths:
    raise SystemExit("run 04_train_unrolled.py first to build demos/out/")
ckpt = ModelCheckpoint.load(OUT / "model.ckpt")
val_samples = load_training_samples(paths[-1], R)

# ---------------------------------------------------------------------------
# 1. fine-tune on a single held-out slice: 30 optimizer iterations on the
#    hinged objective; the similarity hinge only activates once ssim against
#    the prior drops below gamma_th

s = val_samples[0]
prior, _, _ = unrolled_recon(s.kspace, s.mask, ckpt.params, ckpt.cfg,
                             smaps=s.smaps)
loss_cfg = LossConfig(gamma_prior=1.0, gamma_th=0.8)
adapted, report = finetune(ckpt, s.kspace, s.mask, prior, s.foreground,
                           smaps=s.smaps, loss_cfg=loss_cfg, iters=30,
                           lr=5e-5, data_range=s.data_range)
print(f"fine-tuning {s.case_id} slice {s.slice_index}:")
print(f"  data term (d-nmse): {report['dnmse_before']:.5f} -> "
      f"{report['dnmse_after']:.5f}")
print(f"  ssim vs prior     : {report['ssim_vs_prior']:.4f} "
      f"(hinge threshold {loss_cfg.gamma_th})")
print(f"  iterations run    : {report['iters_run']}, aborted: {report['aborted']}")

before = evaluate_metrics(prior, s.reference, m=s.foreground,
                          data_range=s.data_range)
mag, _, _ = unrolled_recon(s.kspace, s.mask, adapted.params, adapted.cfg,
                           smaps=s.smaps)
after = evaluate_metrics(mag, s.reference, m=s.foreground,
                         data_range=s.data_range)
print(f"  foreground ssim   : {before['ssim_fg']:.4f} -> {after['ssim_fg']:.4f}")

# ---------------------------------------------------------------------------
# 2. a two-member ensemble: retrain the same architecture from a second seed
#    and average the magnitude reconstructions

train_samples = []
for p in paths[:-1]:
    train_samples.extend(load_training_samples(p, R))
second = train(train_samples, val_samples, ckpt.cfg, epochs=2, seed=1, lr=1e-5)

worse_than_mean = 0
for s in val_samples:
    mags = [unrolled_recon(s.kspace, s.mask, m.params, m.cfg, smaps=s.smaps)[0]
            for m in (ckpt, second)]
    avg = ensemble_average(mags)
    mse = [float(np.mean((m - s.reference) ** 2)) for m in mags]
    mse_avg = float(np.mean((avg - s.reference) ** 2))
    worse_than_mean += mse_avg > np.mean(mse)
    if s.slice_index == 0:
        print(f"\nensemble on {s.case_id} slice 0:")
        print(f"  member mse: {mse[0]:.6f}, {mse[1]:.6f}")
        print(f"  average mse: {mse_avg:.6f} (<= member mean "
              f"{np.mean(mse):.6f})")

print(f"\nslices where averaging beat the member mean: "
      f"{len(val_samples) - worse_than_mean}/{len(val_samples)}")
