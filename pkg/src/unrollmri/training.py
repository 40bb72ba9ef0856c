"""Training and test-time adaptation of unrolled reconstruction models.

The training loop runs single-sample steps over random readout-direction
patches with RMSProp; test-time adaptation minimizes the acquisition residual
with an SSIM hinge toward the supervised reconstruction using Adam. Both are
bitwise reproducible from (seed, config, data).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .ctensor import fft1c, ifft1c, whiten_stats
from .losses import LossConfig, foreground_array, loss_base, lsgan_losses, ssim
from .metrics import evaluate_metrics
from .networks import (ModelCheckpoint, UnrolledConfig, build_model_params,
                       discriminator_params, make_operator, unrolled_graph)
from .operators import SamplingMask, SensitivityMaps
from .optim import Adam, RmsProp


@dataclass(frozen=True)
class TrainSample:
    """One slice of measured data plus its reference and foreground mask.

    ``kspace`` is the already-undersampled multicoil measurement [C, H, W]
    (phase encodes on the last axis), ``reference`` the coil-combined real
    magnitude [H, W], ``data_range`` the peak used for SSIM and PSNR.
    """

    kspace: np.ndarray
    mask: SamplingMask
    smaps: SensitivityMaps | None
    reference: np.ndarray
    foreground: np.ndarray
    data_range: float
    case_id: str = ""
    slice_index: int = 0

    def __post_init__(self):
        k = np.asarray(self.kspace, dtype=np.complex128)
        object.__setattr__(self, "kspace", k)
        ref = np.asarray(self.reference, dtype=np.float64)
        object.__setattr__(self, "reference", ref)
        fg = np.asarray(self.foreground, dtype=np.float64)
        object.__setattr__(self, "foreground", fg)
        if k.ndim != 3:
            raise ValueError(f"kspace must be [C, H, W], got shape {k.shape}")
        if ref.shape != k.shape[1:]:
            raise ValueError(f"reference shape {ref.shape} does not match kspace {k.shape}")
        if fg.shape != ref.shape:
            raise ValueError(f"foreground shape {fg.shape} does not match reference {ref.shape}")
        if self.mask.n_pe != k.shape[-1]:
            raise ValueError(f"mask covers {self.mask.n_pe} lines, kspace has {k.shape[-1]}")
        if self.smaps is not None and self.smaps.maps.shape[-2:] != k.shape[-2:]:
            raise ValueError("sensitivity maps do not match the kspace grid")
        if not self.data_range > 0:
            raise ValueError(f"data_range must be positive, got {self.data_range}")


def cut_fe_patch(sample: TrainSample, offset: int, size: int) -> TrainSample:
    """Crop ``size`` rows starting at ``offset`` along the fully-sampled
    readout axis.

    The k-space goes to hybrid space (inverse FFT along rows only), is cropped
    there, and is transformed back, which commutes exactly with the
    phase-encode undersampling; maps, reference and foreground are cropped on
    the same rows. A patch whose foreground comes up empty falls back to
    all-ones so masked losses stay defined.
    """
    h = sample.kspace.shape[-2]
    if size < 1 or offset < 0 or offset + size > h:
        raise ValueError(f"patch rows [{offset}, {offset + size}) outside image of height {h}")
    rows = slice(offset, offset + size)
    hybrid = ifft1c(sample.kspace, axis=-2)
    kspace = fft1c(hybrid[:, rows, :], axis=-2)
    smaps = (SensitivityMaps(sample.smaps.maps[:, :, rows, :])
             if sample.smaps is not None else None)
    foreground = sample.foreground[rows]
    if foreground.sum() == 0:
        foreground = np.ones_like(foreground)
    return TrainSample(kspace=kspace, mask=sample.mask, smaps=smaps,
                       reference=sample.reference[rows], foreground=foreground,
                       data_range=sample.data_range, case_id=sample.case_id,
                       slice_index=sample.slice_index)


def _sample_graph(sample: TrainSample, params, cfg: UnrolledConfig):
    """(magnitude Tensor, image Tensor, trace, operator) for one sample, with
    whitening statistics taken from its own zero-filled image."""
    op = make_operator(cfg, sample.mask, sample.smaps,
                       coils=sample.kspace.shape[0])
    x0 = op.adjoint(sample.kspace)
    stats = whiten_stats(x0)
    mag_t, x_t, trace = unrolled_graph(sample.kspace, op, params, cfg,
                                       stats=stats, x0=x0)
    return mag_t, x_t, trace, op


def _slice_record(sample: TrainSample, mag: np.ndarray, residual: float,
                  loss_val: float, window: int) -> dict:
    entry = evaluate_metrics(mag, sample.reference,
                             data_range=sample.data_range, window=window)
    ny = float(np.sum(np.abs(sample.kspace) ** 2))
    if ny == 0.0:
        raise ValueError("zero measurement norm")
    return {"loss": loss_val, "ssim": entry["ssim"], "nmse": entry["nmse"],
            "psnr": entry["psnr"], "dnmse": residual**2 / ny}


def _mean_record(epoch: int, split: str, per_slice: list) -> dict:
    record = {"epoch": epoch, "split": split}
    for key in ("loss", "ssim", "nmse", "psnr", "dnmse"):
        record[key] = float(np.mean([r[key] for r in per_slice]))
    return record


def validation_records(samples, params, cfg: UnrolledConfig,
                       loss_cfg: LossConfig) -> list:
    """Per-slice loss and metric entries over held-out samples."""
    out = []
    for s in samples:
        mag_t, _, trace, _ = _sample_graph(s, params, cfg)
        loss = loss_base(mag_t, s.reference, s.foreground, loss_cfg,
                         data_range=s.data_range)
        out.append(_slice_record(s, mag_t.value, trace[-1],
                                 float(loss.value), loss_cfg.ssim_window))
    return out


def _copy_params(params) -> dict:
    return {name: ad.Parameter(p.value.copy(), name=name)
            for name, p in params.items()}


def train(train_samples, val_samples, cfg: UnrolledConfig,
          loss_cfg: LossConfig | None = None, epochs: int = 10, seed: int = 0,
          lr: float = 1e-4, patch: int = 32, adversarial: bool = False,
          disc_lr: float = 1e-4, log_path=None,
          init: ModelCheckpoint | None = None) -> ModelCheckpoint:
    """Train an unrolled model; deterministic given (seed, config, data).

    Every step draws one sample and a random readout-axis patch (batch 1) and
    updates with RMSProp; ``adversarial`` adds an alternately-trained critic
    with Adam. ``lr=0`` disables updates (dry run). Per-epoch train/validation
    records go to ``log_path`` as newline-delimited JSON and into the returned
    checkpoint's metadata. A non-finite loss or gradient aborts with context.
    """
    train_samples = list(train_samples)
    val_samples = list(val_samples) if val_samples is not None else []
    if not train_samples:
        raise ValueError("empty training set")
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if lr < 0 or disc_lr < 0:
        raise ValueError("learning rates must be >= 0")
    loss_cfg = loss_cfg or LossConfig()

    first = train_samples[0]
    if cfg.kind == "sn" and first.smaps is None:
        raise ValueError("sensitivity model needs coil maps on every sample")
    in_chans = first.smaps.sets if cfg.kind == "sn" else first.kspace.shape[0]
    if init is not None:
        params = _copy_params(init.params)
    else:
        params = build_model_params(cfg, in_chans, seed=seed)
    opt = RmsProp(list(params.values()), lr=lr) if lr > 0 else None

    disc = disc_opt = None
    if adversarial:
        disc = discriminator_params(n_f=cfg.dun.n_f, in_chans=1, seed=seed + 1)
        disc_opt = Adam(list(disc.values()), lr=disc_lr) if disc_lr > 0 else None

    rng = np.random.default_rng(seed)
    all_params = list(params.values()) + (list(disc.values()) if disc else [])
    records = []
    log_file = open(log_path, "w") if log_path is not None else None

    def emit(record: dict) -> None:
        records.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()

    try:
        for epoch in range(epochs):
            train_stats = []
            for idx in rng.permutation(len(train_samples)):
                s = train_samples[idx]
                h = s.kspace.shape[-2]
                size = min(patch, h)
                offset = int(rng.integers(0, h - size + 1))
                sp = cut_fe_patch(s, offset, size) if size < h else s
                try:
                    mag_t, _, trace, _ = _sample_graph(sp, params, cfg)
                    if adversarial:
                        # The critic sees the reconstruction detached, so the
                        # generator must step first: its loss graph still
                        # holds the critic's pre-update values.
                        d_loss, loss = lsgan_losses(mag_t, sp.reference,
                                                    sp.foreground, disc,
                                                    loss_cfg,
                                                    data_range=sp.data_range)
                        _check_loss(d_loss)
                        _check_loss(loss)
                        ad.zero_grads(all_params)
                        ad.backward(loss)
                        if opt is not None:
                            opt.step()
                        ad.zero_grads(all_params)
                        ad.backward(d_loss)
                        if disc_opt is not None:
                            disc_opt.step()
                    else:
                        loss = loss_base(mag_t, sp.reference, sp.foreground,
                                         loss_cfg, data_range=sp.data_range)
                        _check_loss(loss)
                        ad.zero_grads(all_params)
                        ad.backward(loss)
                        if opt is not None:
                            opt.step()
                except FloatingPointError as err:
                    raise FloatingPointError(
                        f"training aborted at epoch {epoch}, case "
                        f"{s.case_id!r} slice {s.slice_index}: {err}") from err
                train_stats.append(_slice_record(sp, mag_t.value, trace[-1],
                                                 float(loss.value),
                                                 loss_cfg.ssim_window))
            emit(_mean_record(epoch, "train", train_stats))
            if val_samples:
                emit(_mean_record(epoch, "val",
                                  validation_records(val_samples, params, cfg,
                                                     loss_cfg)))
    finally:
        if log_file is not None:
            log_file.close()

    meta = {"seed": seed, "epochs": epochs, "lr": lr, "patch": patch,
            "adversarial": adversarial, "loss_config": asdict(loss_cfg),
            "history": records}
    return ModelCheckpoint(cfg=cfg, params=params, meta=meta)


def _check_loss(loss: ad.Tensor) -> None:
    if not np.all(np.isfinite(loss.value)):
        raise FloatingPointError("non-finite loss value")


def finetune(ckpt: ModelCheckpoint, y: np.ndarray, mask: SamplingMask,
             x_prior: np.ndarray, foreground,
             smaps: SensitivityMaps | None = None,
             loss_cfg: LossConfig | None = None, iters: int = 50,
             lr: float = 5e-5,
             data_range: float | None = None) -> tuple[ModelCheckpoint, dict]:
    """Adapt a trained model to one measured slice.

    Minimizes ``0.5 ||A x - y||^2`` plus a hinge that activates once the
    masked SSIM against the supervised reconstruction ``x_prior`` (a real
    magnitude image) drops below ``gamma_th``, weighted by ``gamma_prior``.
    Runs ``iters`` Adam steps; a non-finite loss or gradient aborts and keeps
    the last parameters whose loss was finite. Returns the adapted checkpoint
    and a report with the data-term NMSE before and after.
    """
    loss_cfg = loss_cfg or LossConfig()
    cfg = ckpt.cfg
    op = make_operator(cfg, mask, smaps, coils=y.shape[0])
    x0 = op.adjoint(y)
    stats = whiten_stats(x0)
    ny = float(np.sum(np.abs(y) ** 2))
    if ny == 0.0:
        raise ValueError("zero measurement norm")

    prior = np.asarray(x_prior, dtype=np.float64)
    m = ad.constant(foreground_array(foreground, prior.shape), name="foreground")
    masked_prior = prior * m.value
    dr = float(np.max(masked_prior)) if data_range is None else float(data_range)
    y_node = ad.constant(y, name="y")

    params = _copy_params(ckpt.params)
    opt = Adam(list(params.values()), lr=lr)

    def residual_sq(p) -> float:
        _, _, trace = unrolled_graph(y, op, p, cfg, stats=stats, x0=x0)
        return trace[-1] ** 2

    def build_loss() -> tuple[ad.Tensor, ad.Tensor]:
        mag_t, x_t, _ = unrolled_graph(y, op, params, cfg, stats=stats, x0=x0)
        r = ad.sub(ad.apply_linop(x_t, op.forward, op.adjoint,
                                  name="acq_forward"), y_node)
        dc_term = ad.mul(0.5, ad.cdot_real(r, r))
        sim = ssim(ad.mul(mag_t, m), masked_prior, window=loss_cfg.ssim_window,
                   data_range=dr)
        hinge = ad.relu(ad.sub(loss_cfg.gamma_th, sim))
        prior_term = ad.mul(loss_cfg.gamma_prior, ad.mul(hinge, hinge))
        return ad.add(dc_term, prior_term), sim

    dnmse_before = residual_sq(ckpt.params) / ny
    last_finite = {name: p.value.copy() for name, p in params.items()}
    losses, aborted = [], False
    for _ in range(iters):
        try:
            loss, _ = build_loss()
            if not np.all(np.isfinite(loss.value)):
                raise FloatingPointError("non-finite loss value")
            for name, p in params.items():
                last_finite[name] = p.value.copy()
            losses.append(float(loss.value))
            ad.zero_grads(params.values())
            ad.backward(loss)
            opt.step()
        except FloatingPointError:
            aborted = True
            for name, p in params.items():
                p.value[...] = last_finite[name]
            break

    final_loss, final_sim = build_loss()
    if not np.all(np.isfinite(final_loss.value)):
        aborted = True
        for name, p in params.items():
            p.value[...] = last_finite[name]
        final_loss, final_sim = build_loss()
    dnmse_after = residual_sq(params) / ny
    report = {"dnmse_before": dnmse_before, "dnmse_after": dnmse_after,
              "losses": losses, "aborted": aborted, "iters_run": len(losses),
              "ssim_vs_prior": float(final_sim.value)}
    meta = dict(ckpt.meta)
    meta.pop("history", None)
    meta.update({"finetuned": True, "finetune_iters": len(losses),
                 "finetune_lr": lr, "dnmse_before": dnmse_before,
                 "dnmse_after": dnmse_after})
    return ModelCheckpoint(cfg=cfg, params=params, meta=meta), report


def ensemble_average(recons) -> np.ndarray:
    """Pixelwise mean of equally-normalized magnitude reconstructions."""
    recons = [np.asarray(r) for r in recons]
    if not recons:
        raise ValueError("ensemble needs at least one reconstruction")
    shape = recons[0].shape
    for r in recons[1:]:
        if r.shape != shape:
            raise ValueError(f"ensemble shape mismatch: {r.shape} vs {shape}")
    return np.mean(np.stack(recons), axis=0)
