"""Command-line surface: gen-data | train | reconstruct | finetune | ensemble | evaluate.

Exit codes are stable for CI: 0 success, 2 usage error, 3 data error
(missing/corrupt files, inconsistent inputs), 4 numerical failure. All
commands are deterministic given identical flags and seed; thread count
follows the standard BLAS environment variables (OMP_NUM_THREADS), no other
environment is read.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as data_mod
from .checkpoint import CheckpointError
from .data import (
    ContainerError,
    PhantomSpec,
    gen_phantom_dataset,
    load_training_samples,
)
from .dc import DC_KINDS, DcConfig
from .losses import LossConfig
from .metrics import MetricReport, dnmse, evaluate_metrics, stable_hash
from .networks import (
    DunConfig,
    ModelCheckpoint,
    UnrolledConfig,
    make_operator,
    unrolled_recon,
)
from .operators import zero_filled
from .training import finetune, train


class UsageError(Exception):
    """Invalid flag values or combinations."""


# ---------------------------------------------------------------------------
# shared helpers


def _parse_int_pair(text: str, flag: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise UsageError(f"{flag} expects H,W, got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError as e:
        raise UsageError(f"{flag} expects integers, got {text!r}") from e


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p]
    except ValueError as e:
        raise UsageError(f"{flag} expects a comma-separated integer list, got {text!r}") from e


def _parse_acl_map(text: str) -> dict[int, int]:
    out = {}
    for part in text.split(","):
        if not part:
            continue
        try:
            r, acl = part.split(":")
            out[int(r)] = int(acl)
        except ValueError as e:
            raise UsageError(f"--acl expects R:N pairs, got {part!r}") from e
    return out


def _data_paths(path_text: str) -> list[Path]:
    path = Path(path_text)
    if path.is_dir():
        paths = sorted(path.glob("*.h5"))
        if not paths:
            raise FileNotFoundError(f"no container files (*.h5) in {path}")
        return paths
    if path.is_file():
        return [path]
    raise FileNotFoundError(f"no such file or directory: {path}")


def _load_samples(path_text: str, R: int) -> list:
    samples = []
    for p in _data_paths(path_text):
        samples.extend(load_training_samples(p, R))
    return samples


def _rss_channels(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.abs(x) ** 2, axis=0))


def _write_png(path: Path, mag: np.ndarray, data_range: float) -> None:
    arr = np.clip(mag / data_range, 0.0, 1.0)
    Image.fromarray(np.round(255.0 * arr).astype(np.uint8), mode="L").save(path)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")


def _slice_tag(sample) -> str:
    return f"{sample.case_id}_s{sample.slice_index:02d}"


def _dc_override(args, cfg) -> DcConfig | None:
    if args.dc is None:
        return None
    base = cfg.dc
    return DcConfig(kind=args.dc, lam=base.lam, alpha=base.alpha, beta=base.beta,
                    cg_iters=base.cg_iters, cg_tol=base.cg_tol)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    h, w = _parse_int_pair(args.size, "--size")
    accels = _parse_int_list(args.accel, "--accel")
    acl_map = _parse_acl_map(args.acl) if args.acl else None
    spec = PhantomSpec(height=h, width=w, texture_amp=args.texture,
                       sigma=args.sigma, seed=args.seed)
    paths = gen_phantom_dataset(spec, args.cases, args.slices, args.coils,
                                accels, acl_map, out_dir=args.out,
                                float16=args.float16)
    print(f"wrote {len(paths)} cases ({args.slices} slices each) to {args.out}")
    return 0


def _build_config(args) -> UnrolledConfig:
    return UnrolledConfig(
        kind=args.kind,
        dc=DcConfig(kind=args.dc, lam=args.lam),
        cascades=args.cascades,
        shared=not args.per_cascade,
        dun=DunConfig(n_f=args.features, num_dub=args.dub, depth=args.depth),
    )


def cmd_train(args) -> int:
    paths = _data_paths(args.data)
    val_cases = args.val_cases if args.val_cases is not None else max(1, len(paths) // 5)
    if val_cases >= len(paths):
        raise UsageError(f"--val-cases {val_cases} leaves no training cases "
                         f"(found {len(paths)})")
    train_samples, val_samples = [], []
    for p in paths[:len(paths) - val_cases]:
        train_samples.extend(load_training_samples(p, args.accel))
    for p in paths[len(paths) - val_cases:]:
        val_samples.extend(load_training_samples(p, args.accel))
    cfg = _build_config(args)
    ckpt = train(train_samples, val_samples, cfg, epochs=args.epochs,
                 seed=args.seed, lr=args.lr, patch=args.patch,
                 adversarial=args.adversarial, disc_lr=args.disc_lr,
                 log_path=args.log)
    ckpt.save(args.out)
    val = [r for r in ckpt.meta["history"] if r["split"] == "val"]
    tail = (f" | final val ssim {val[-1]['ssim']:.4f} nmse {val[-1]['nmse']:.4f}"
            if val else "")
    print(f"trained {args.epochs} epochs on {len(train_samples)} slices "
          f"-> {args.out}{tail}")
    return 0


def cmd_reconstruct(args) -> int:
    ckpt = ModelCheckpoint.load(args.ckpt)
    samples = _load_samples(args.data, args.accel)
    if args.slice is not None:
        samples = [s for s in samples if s.slice_index == args.slice]
        if not samples:
            raise UsageError(f"--slice {args.slice} matches no loaded slice")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dc_override = _dc_override(args, ckpt.cfg)
    for s in samples:
        mag, x, trace = unrolled_recon(s.kspace, s.mask, ckpt.params, ckpt.cfg,
                                       smaps=s.smaps, lam_override=args.lam,
                                       dc_override=dc_override)
        _check_finite(mag, f"reconstruction of {_slice_tag(s)}")
        op = make_operator(ckpt.cfg, s.mask, s.smaps, coils=s.kspace.shape[0])
        tag = _slice_tag(s)
        np.save(out / f"{tag}_recon.npy", mag)
        _write_png(out / f"{tag}_recon.png", mag, s.data_range)
        with open(out / f"{tag}_trace.json", "w") as f:
            json.dump({"case_id": s.case_id, "slice": s.slice_index,
                       "dataterm_trace": trace,
                       "dnmse_term": dnmse([(x, s.kspace, op)])}, f, indent=2)
        if args.zero_filled:
            zf = _rss_channels(zero_filled(s.kspace, s.mask, s.smaps,
                                           kind=ckpt.cfg.kind))
            np.save(out / f"{tag}_zf.npy", zf)
            _write_png(out / f"{tag}_zf.png", zf, s.data_range)
    print(f"reconstructed {len(samples)} slices -> {out}")
    return 0


def cmd_finetune(args) -> int:
    ckpt = ModelCheckpoint.load(args.ckpt)
    samples = _load_samples(args.data, args.accel)
    matches = [s for s in samples if s.slice_index == args.slice]
    if not matches:
        raise UsageError(f"--slice {args.slice} matches no loaded slice")
    s = matches[0]
    prior, _, _ = unrolled_recon(s.kspace, s.mask, ckpt.params, ckpt.cfg,
                                 smaps=s.smaps)
    _check_finite(prior, "supervised prior reconstruction")
    loss_cfg = LossConfig(gamma_prior=args.gamma_prior, gamma_th=args.gamma_th)
    adapted, report = finetune(ckpt, s.kspace, s.mask, prior, s.foreground,
                               smaps=s.smaps, loss_cfg=loss_cfg,
                               iters=args.iters, lr=args.lr,
                               data_range=s.data_range)
    adapted.save(args.out)
    report_path = args.report or (str(args.out) + ".report.json")
    with open(report_path, "w") as f:
        json.dump(report, f, indent=2)
    print(f"finetuned {_slice_tag(s)}: dnmse {report['dnmse_before']:.6f} -> "
          f"{report['dnmse_after']:.6f}, ssim vs prior {report['ssim_vs_prior']:.4f}"
          + (" (aborted)" if report["aborted"] else ""))
    return 0


def cmd_ensemble(args) -> int:
    if len(args.inputs) < 2:
        raise UsageError("--inputs needs at least two reconstructions")
    recons = []
    for p in args.inputs:
        try:
            arr = np.load(p, allow_pickle=False)
        except ValueError as exc:
            raise ValueError(f"{p} is not a plain .npy array (checkpoints and "
                             f"reports cannot be ensembled): {exc}") from exc
        if arr.ndim != 2:
            raise ValueError(f"{p}: expected a 2-d magnitude image, got shape {arr.shape}")
        recons.append(arr)
    shapes = {r.shape for r in recons}
    if len(shapes) > 1:
        raise ValueError(f"ensemble inputs disagree on shape: {sorted(shapes)}")
    avg = np.mean(np.stack(recons), axis=0)
    _check_finite(avg, "ensemble average")
    out = Path(args.out)
    np.save(out.with_suffix(".npy"), avg)
    dr = args.data_range if args.data_range is not None else float(avg.max())
    _write_png(out.with_suffix(".png"), avg, dr)
    print(f"averaged {len(recons)} reconstructions -> {out.with_suffix('.npy')}")
    return 0


def cmd_evaluate(args) -> int:
    modes = [m for m, on in [("model", args.ckpt), ("zero-filled", args.zero_filled),
                             ("precomputed", args.recon)] if on]
    if len(modes) != 1:
        raise UsageError("pass exactly one of --ckpt, --zero-filled, --recon")
    mode = modes[0]
    samples = _load_samples(args.data, args.accel)
    ckpt = ModelCheckpoint.load(args.ckpt) if mode == "model" else None
    if mode == "model":
        model_id = args.model_id or f"{ckpt.cfg.kind}-{ckpt.cfg.dc.kind}-t{ckpt.cfg.cascades}"
    else:
        model_id = args.model_id or mode
    report = MetricReport(model=model_id, config_hash=stable_hash(
        {"mode": mode, "model": model_id, "R": args.accel}))
    for s in samples:
        if mode == "model":
            mag, x, _ = unrolled_recon(s.kspace, s.mask, ckpt.params, ckpt.cfg,
                                       smaps=s.smaps)
            op = make_operator(ckpt.cfg, s.mask, s.smaps, coils=s.kspace.shape[0])
            term = dnmse([(x, s.kspace, op)])
        elif mode == "zero-filled":
            x = zero_filled(s.kspace, s.mask, s.smaps, kind="sn")
            op = make_operator(UnrolledConfig(kind="sn"), s.mask, s.smaps)
            mag = _rss_channels(x)
            term = dnmse([(x, s.kspace, op)])
        else:
            tag = _slice_tag(s)
            mag = np.load(Path(args.recon) / f"{tag}_recon.npy")
            with open(Path(args.recon) / f"{tag}_trace.json") as f:
                term = float(json.load(f)["dnmse_term"])
        _check_finite(mag, f"reconstruction of {_slice_tag(s)}")
        entry = evaluate_metrics(mag, s.reference, m=s.foreground,
                                 data_range=s.data_range)
        report.add(s.case_id, s.slice_index, args.accel, entry, term)
    out = Path(args.out)
    report.to_csv(out.with_suffix(".csv"))
    report.to_json(out.with_suffix(".json"))
    overall = report.overall()
    print(f"{model_id}: {len(report.rows)} slices | nmse {overall['nmse']:.6f} "
          f"psnr {overall['psnr']:.2f} ssim {overall['ssim']:.4f} "
          f"dnmse {overall['dnmse']:.6f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unrollmri",
        description="Unrolled reconstruction for accelerated multicoil MRI "
                    "on synthetic phantoms.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic dataset containers")
    p.add_argument("--cases", type=int, default=4)
    p.add_argument("--slices", type=int, default=4)
    p.add_argument("--size", default="64,64", help="image size H,W")
    p.add_argument("--coils", type=int, default=4)
    p.add_argument("--accel", default="4,8", help="acceleration factors, e.g. 4,8")
    p.add_argument("--acl", default=None,
                   help="calibration lines per acceleration, e.g. 4:16,8:8")
    p.add_argument("--sigma", type=float, default=0.01, help="k-space noise std")
    p.add_argument("--texture", type=float, default=0.08)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--float16", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an unrolled model")
    p.add_argument("--data", required=True, help="container file or directory")
    p.add_argument("--accel", type=int, default=4)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--kind", choices=["sn", "pcn"], default="sn")
    p.add_argument("--dc", choices=sorted(DC_KINDS), default="gd")
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--cascades", type=int, default=4)
    p.add_argument("--features", type=int, default=8)
    p.add_argument("--dub", type=int, default=2)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--per-cascade", action="store_true",
                   help="per-cascade regularizer parameters instead of shared")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch", type=int, default=32)
    p.add_argument("--val-cases", type=int, default=None)
    p.add_argument("--adversarial", action="store_true")
    p.add_argument("--disc-lr", type=float, default=1e-4)
    p.add_argument("--log", default=None, help="NDJSON training log path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="write magnitude images and traces")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--accel", type=int, default=4)
    p.add_argument("--slice", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dc", choices=sorted(DC_KINDS), default=None,
                   help="override the data-consistency layer")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="override the data-consistency weight")
    p.add_argument("--zero-filled", action="store_true",
                   help="also write the zero-filled baseline")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("finetune", help="adapt a model to one measured slice")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--accel", type=int, default=4)
    p.add_argument("--slice", type=int, default=0)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--gamma-prior", type=float, default=1.0)
    p.add_argument("--gamma-th", type=float, default=0.8)
    p.add_argument("--out", required=True, help="adapted checkpoint path")
    p.add_argument("--report", default=None, help="report JSON path")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("ensemble", help="average magnitude reconstructions")
    p.add_argument("--inputs", nargs="+", required=True, help=".npy magnitude files")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--data-range", type=float, default=None)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("evaluate", help="emit CSV + JSON metric reports")
    p.add_argument("--data", required=True)
    p.add_argument("--accel", type=int, default=4)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--zero-filled", action="store_true")
    p.add_argument("--recon", default=None,
                   help="directory of precomputed *_recon.npy + *_trace.json")
    p.add_argument("--model-id", default=None)
    p.add_argument("--out", required=True, help="report path prefix")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (ContainerError, CheckpointError, FileNotFoundError,
            IsADirectoryError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
