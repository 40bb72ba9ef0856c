"""Synthetic multicoil phantom datasets and their on-disk container.

Generation produces, per case, a stack of random ellipse phantoms with smooth
texture, simulated coil profiles, fully-sampled noisy k-space, coil maps
estimated from the calibration region, the sensitivity-combined reference, a
foreground mask, and undersampling masks for each requested acceleration.
Cases use independent seeds derived from the master seed by case index, so
generation can run in parallel across cases.

Containers are HDF5 files whose dataset and attribute names parameterise the
calibration-region width used to derive them (``smaps_acl{N}``,
``reference_acl{N}``, ``norm_lfimg_*_acl{N}``, ``reference_max_acl{N}``,
``rss_max``), so externally produced files can be slotted in later.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import h5py
import numpy as np
from scipy import ndimage

from .ctensor import WhitenStats, fft1c, fft2c, ifft1c, ifft2c, rss, whiten_stats
from .losses import ForegroundMask
from .operators import (
    SamplingMask,
    SensitivityMaps,
    acl_only_mask,
    estimate_smaps_lowres,
    make_mask,
)
from .training import TrainSample

CONTAINER_VERSION = 1

# Desk-scale calibration widths per acceleration at 64 phase encodes,
# proportional to {R=4: 30, R=8: 15} at ~368 phase encodes.
DESK_ACL_MAP = {4: 16, 8: 8}

# spawn_key namespaces so per-slice and per-mask streams never collide
_MASK_KEY = 1 << 20


class ContainerError(Exception):
    """Base class for dataset container failures."""


class ContainerFormatError(ContainerError):
    """File is unreadable or truncated."""


class ContainerVersionError(ContainerError):
    """File was written with an incompatible container version."""


class ContainerSchemaError(ContainerError):
    """Required dataset/attribute is missing or an array has the wrong axes."""


@dataclass(frozen=True)
class Ellipse:
    """One ellipse of a phantom: fractional center offsets from the image
    center, fractional semi-axes, rotation, and complex intensity (added
    where ellipses overlap)."""

    cy: float
    cx: float
    ay: float
    ax: float
    angle: float = 0.0
    intensity: complex = 1.0 + 0.0j

    def __post_init__(self):
        if not (self.ay > 0 and self.ax > 0):
            raise ValueError(f"ellipse axes must be positive, got ({self.ay}, {self.ax})")


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for phantom slices.

    ``ellipses=None`` draws a fresh random ellipse set per slice; a fixed
    tuple reuses it for every slice. ``sigma`` is the per-component standard
    deviation of the additive complex Gaussian k-space noise. ``texture_amp``
    modulates a smooth multiplicative texture inside the support.
    """

    height: int = 64
    width: int = 64
    ellipses: tuple[Ellipse, ...] | None = None
    texture_amp: float = 0.08
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.height < 4 or self.width < 4:
            raise ValueError(f"image size must be at least 4x4, got {self.height}x{self.width}")
        if self.ellipses is not None:
            object.__setattr__(self, "ellipses", tuple(self.ellipses))
        if not 0.0 <= self.texture_amp < 1.0:
            raise ValueError(f"texture amplitude must be in [0, 1), got {self.texture_amp}")
        if self.sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.sigma}")


def ellipse_image(h: int, w: int, ellipses) -> np.ndarray:
    """Rasterize a sum of ellipses onto an [H, W] complex grid."""
    ys = (np.arange(h) - h / 2) / h
    xs = (np.arange(w) - w / 2) / w
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = np.zeros((h, w), dtype=np.complex128)
    for e in ellipses:
        dy, dx = yy - e.cy, xx - e.cx
        cos, sin = np.cos(e.angle), np.sin(e.angle)
        u = (dx * cos + dy * sin) / e.ax
        v = (dy * cos - dx * sin) / e.ay
        out += np.where(u * u + v * v <= 1.0, complex(e.intensity), 0.0)
    return out


def random_ellipses(rng: np.random.Generator) -> tuple[Ellipse, ...]:
    """One dominant body ellipse plus a handful of smaller inner features."""
    body = Ellipse(
        cy=rng.uniform(-0.04, 0.04),
        cx=rng.uniform(-0.04, 0.04),
        ay=rng.uniform(0.30, 0.38),
        ax=rng.uniform(0.30, 0.38),
        angle=rng.uniform(0.0, np.pi),
        intensity=rng.uniform(0.55, 0.75) * np.exp(1j * rng.uniform(-0.25, 0.25)),
    )
    inner = []
    for _ in range(int(rng.integers(2, 6))):
        mag = rng.uniform(0.12, 0.32)
        sign = -1.0 if rng.random() < 0.25 else 1.0
        inner.append(Ellipse(
            cy=rng.uniform(-0.18, 0.18),
            cx=rng.uniform(-0.18, 0.18),
            ay=rng.uniform(0.04, 0.14),
            ax=rng.uniform(0.04, 0.14),
            angle=rng.uniform(0.0, np.pi),
            intensity=sign * mag * np.exp(1j * rng.uniform(-0.25, 0.25)),
        ))
    return (body, *inner)


def smooth_texture(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random field normalized to peak magnitude 1."""
    t = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=min(h, w) / 16, mode="wrap")
    return t / max(np.abs(t).max(), 1e-12)


def phantom_slice(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """One [H, W] complex phantom; texture is multiplicative so the
    background stays exactly zero."""
    ellipses = spec.ellipses if spec.ellipses is not None else random_ellipses(rng)
    ph = ellipse_image(spec.height, spec.width, ellipses)
    if spec.texture_amp > 0:
        ph = ph * (1.0 + spec.texture_amp * smooth_texture(spec.height, spec.width, rng))
    return ph


def gen_coils(q: int, h: int, w: int) -> SensitivityMaps:
    """Simulated coil profiles: Gaussian lobes centered on a ring with
    smoothly varying phase, rss-normalized so the coil-combined energy is 1
    everywhere. A single coil has no phase diversity to model and is the
    constant 1."""
    if q < 1:
        raise ValueError(f"need at least one coil, got {q}")
    if q == 1:
        return SensitivityMaps(np.ones((1, 1, h, w), dtype=np.complex128))
    ys = (np.arange(h) - h / 2) / h
    xs = (np.arange(w) - w / 2) / w
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    coils = np.empty((q, h, w), dtype=np.complex128)
    for k in range(q):
        theta = 2.0 * np.pi * k / q + 0.3
        cy, cx = 0.55 * np.sin(theta), 0.55 * np.cos(theta)
        lobe = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * 0.45 ** 2))
        phase = 2.0 * np.pi * 0.8 * (np.cos(theta) * xx + np.sin(theta) * yy) + 2.0 * np.pi * k / q
        coils[k] = lobe * np.exp(1j * phase)
    coils /= np.sqrt(np.sum(np.abs(coils) ** 2, axis=0))
    return SensitivityMaps(coils[:, None])


def add_kspace_noise(y: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Additive complex Gaussian noise, std ``sigma`` per real component."""
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    y = np.asarray(y, dtype=np.complex128)
    return y + sigma * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))


def normalize_lowfreq(y, mask_acl, smaps: SensitivityMaps | None = None):
    """Intensity scale and whitening moments of the calibration-only image.

    The scale is the median of the top-20% magnitudes of the coil-combined
    image reconstructed from the calibration lines alone; the moments are the
    complex mean and 2x2 real covariance of the same image. With maps the
    combination uses the first map set; without, the phase-free rss.

    Returns ``(scale, WhitenStats)``.
    """
    y = np.asarray(y, dtype=np.complex128)
    if y.ndim != 3:
        raise ValueError(f"expected [Q, H, W] k-space, got {y.shape}")
    row = mask_acl.acl_only() if isinstance(mask_acl, SamplingMask) else np.asarray(mask_acl, dtype=np.float64)
    if row.ndim != 1 or row.size != y.shape[-1]:
        raise ValueError(f"calibration mask must be 1-d of length {y.shape[-1]}, got {row.shape}")
    if not np.any(row):
        raise ValueError("no calibration lines in the mask")
    lf = ifft2c(y * row)
    if smaps is not None:
        combined = np.sum(np.conj(smaps.maps[:, 0]) * lf, axis=0)
    else:
        combined = rss(lf).astype(np.complex128)
    mags = np.abs(combined).ravel()
    k = max(1, int(round(0.2 * mags.size)))
    top = np.partition(mags, mags.size - k)[mags.size - k:]
    return float(np.median(top)), whiten_stats(combined)


def foreground_mask(mag, threshold_frac: float = 0.05):
    """Foreground from a magnitude image: threshold at ``threshold_frac`` of
    the peak, 3x3 morphological closing (2 iterations), largest connected
    component, hole fill.

    Returns ``(ForegroundMask, fell_back)``; an empty threshold result falls
    back to all-ones with the flag set.
    """
    mag = np.asarray(mag, dtype=np.float64)
    if mag.ndim != 2:
        raise ValueError(f"expected a 2-d magnitude image, got shape {mag.shape}")
    if not 0.0 < threshold_frac < 1.0:
        raise ValueError(f"threshold fraction must be in (0, 1), got {threshold_frac}")
    raw = mag > threshold_frac * mag.max()
    if not raw.any():
        return ForegroundMask.all_ones(mag.shape), True
    # border_value=1 keeps supports touching the image edge intact (closing
    # is extensive, so the result always contains the thresholded set)
    closed = ndimage.binary_closing(raw, structure=np.ones((3, 3), dtype=bool),
                                    iterations=2, border_value=1)
    labels, n = ndimage.label(closed)
    largest = 1 + int(np.argmax(np.bincount(labels.ravel())[1:]))
    filled = ndimage.binary_fill_holes(labels == largest)
    return ForegroundMask(filled.astype(np.float64)), False


@dataclass
class DatasetCase:
    """In-memory form of one container file.

    Per-ACL entries are keyed by the calibration line count N and map to the
    on-disk names ``smaps_acl{N}``, ``reference_acl{N}``,
    ``norm_lfimg_{max,mean,cov}_acl{N}``, ``reference_max_acl{N}``.
    """

    case_id: str
    kspace: np.ndarray                      # [N_sl, Q, H, W] fully sampled
    smaps: dict[int, np.ndarray]            # N -> [N_sl, Q, M, H, W]
    reference: dict[int, np.ndarray]        # N -> [N_sl, M, H, W]
    foreground: np.ndarray                  # [N_sl, H, W] of {0, 1}
    foreground_fallback: np.ndarray         # [N_sl] bool
    masks: dict[int, SamplingMask]          # R -> mask
    lf_max: dict[int, float]
    lf_mean: dict[int, complex]
    lf_cov: dict[int, np.ndarray]           # N -> (2, 2) real
    reference_max: dict[int, float]
    rss_max: float
    seed: int = 0
    sigma: float = 0.0
    header: str = ""
    float16: bool = field(default=False, compare=False)

    def validate(self) -> None:
        k = np.asarray(self.kspace)
        if k.ndim != 4:
            raise ContainerSchemaError(f"kspace must be [N_sl, Q, H, W], got shape {k.shape}")
        n_sl, q, h, w = k.shape
        keys = set(self.smaps)
        for name, d in [("reference", self.reference), ("norm_lfimg_max", self.lf_max),
                        ("norm_lfimg_mean", self.lf_mean), ("norm_lfimg_cov", self.lf_cov),
                        ("reference_max", self.reference_max)]:
            if set(d) != keys:
                raise ContainerSchemaError(
                    f"{name} ACL counts {sorted(d)} do not match smaps {sorted(keys)}")
        if not keys:
            raise ContainerSchemaError("container stores no ACL count")
        for n in keys:
            s = np.asarray(self.smaps[n])
            if s.ndim != 5 or s.shape[0] != n_sl or s.shape[1] != q or s.shape[3:] != (h, w):
                raise ContainerSchemaError(
                    f"smaps_acl{n} must be [N_sl, Q, M, H, W]={n_sl, q, '*', h, w}, got {s.shape}")
            r = np.asarray(self.reference[n])
            if r.shape != (n_sl, s.shape[2], h, w):
                raise ContainerSchemaError(
                    f"reference_acl{n} must be [N_sl, M, H, W]={(n_sl, s.shape[2], h, w)}, got {r.shape}")
            if np.asarray(self.lf_cov[n]).shape != (2, 2):
                raise ContainerSchemaError(f"norm_lfimg_cov_acl{n} must be 2x2")
        fg = np.asarray(self.foreground)
        if fg.shape != (n_sl, h, w):
            raise ContainerSchemaError(f"foreground must be {(n_sl, h, w)}, got {fg.shape}")
        if not np.all((fg == 0.0) | (fg == 1.0)):
            raise ContainerSchemaError("foreground entries must be exactly 0 or 1")
        if np.asarray(self.foreground_fallback).shape != (n_sl,):
            raise ContainerSchemaError("foreground_fallback must be [N_sl]")
        for r_key, mask in self.masks.items():
            if mask.n_pe != w or mask.R != r_key:
                raise ContainerSchemaError(
                    f"mask_r{r_key} inconsistent: n_pe={mask.n_pe} (w={w}), R={mask.R}")
        if not (np.isfinite(self.rss_max) and self.rss_max > 0):
            raise ContainerSchemaError(f"rss_max must be positive, got {self.rss_max}")

    @property
    def n_slices(self) -> int:
        return self.kspace.shape[0]

    @property
    def acl_counts(self) -> list[int]:
        return sorted(self.smaps)


def _case_rng(seed: int, *spawn_key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=spawn_key))


def gen_case(spec: PhantomSpec, case_index: int, n_slices: int, q: int,
             r_list, acl_map=None) -> DatasetCase:
    """Simulate one case: phantoms, coils, noisy k-space, per-ACL maps and
    references, foreground masks, and one undersampling mask per R."""
    acl_map = dict(DESK_ACL_MAP if acl_map is None else acl_map)
    r_list = sorted(set(int(r) for r in r_list))
    missing = [r for r in r_list if r not in acl_map]
    if missing:
        raise ValueError(f"no calibration width configured for R={missing}")
    if n_slices < 1:
        raise ValueError(f"need at least one slice, got {n_slices}")
    h, w = spec.height, spec.width
    coils = gen_coils(q, h, w).maps[:, 0]

    phantoms = np.empty((n_slices, h, w), dtype=np.complex128)
    kspace = np.empty((n_slices, q, h, w), dtype=np.complex128)
    for sl in range(n_slices):
        ph = phantom_slice(spec, _case_rng(spec.seed, case_index, sl, 0))
        y = fft2c(coils * ph[None])
        if spec.sigma > 0:
            y = add_kspace_noise(y, spec.sigma, _case_rng(spec.seed, case_index, sl, 1))
        phantoms[sl] = ph
        kspace[sl] = y

    masks = {}
    for r in r_list:
        seed = int(_case_rng(spec.seed, case_index, _MASK_KEY + r).integers(2 ** 31))
        masks[r] = make_mask(w, r, acl_map[r], kind="random", seed=seed)

    imgs = ifft2c(kspace)
    smaps, reference = {}, {}
    lf_max, lf_mean, lf_cov, reference_max = {}, {}, {}, {}
    for n in sorted(set(acl_map[r] for r in r_list)):
        maps_n = np.stack([estimate_smaps_lowres(kspace[sl], n).maps for sl in range(n_slices)])
        smaps[n] = maps_n
        reference[n] = np.einsum("sqmhw,sqhw->smhw", np.conj(maps_n), imgs)
        lf = ifft2c(kspace * acl_only_mask(w, n))
        lf_comb = np.einsum("sqhw,sqhw->shw", np.conj(maps_n[:, :, 0]), lf)
        stats = whiten_stats(lf_comb)
        lf_max[n] = float(np.abs(lf_comb).max())
        lf_mean[n] = stats.mean
        lf_cov[n] = stats.cov
        reference_max[n] = float(np.abs(reference[n]).max())

    n_fg = acl_map[r_list[0]]
    fg = np.empty((n_slices, h, w), dtype=np.float64)
    fallback = np.zeros(n_slices, dtype=bool)
    for sl in range(n_slices):
        m, fell_back = foreground_mask(np.abs(reference[n_fg][sl, 0]))
        fg[sl] = m.mask
        fallback[sl] = fell_back

    header = json.dumps({"height": h, "width": w, "coils": q, "slices": n_slices,
                         "sigma": spec.sigma, "texture_amp": spec.texture_amp,
                         "case_index": case_index})
    case = DatasetCase(
        case_id=f"case_{case_index:03d}", kspace=kspace, smaps=smaps,
        reference=reference, foreground=fg, foreground_fallback=fallback,
        masks=masks, lf_max=lf_max, lf_mean=lf_mean, lf_cov=lf_cov,
        reference_max=reference_max,
        rss_max=float(np.sqrt(np.sum(np.abs(imgs) ** 2, axis=1)).max()),
        seed=spec.seed, sigma=spec.sigma, header=header)
    case.validate()
    return case


def gen_phantom_dataset(spec: PhantomSpec, n_cases: int, n_slices: int, q: int,
                        r_list, acl_map=None, out_dir=".",
                        float16: bool = False) -> list[Path]:
    """Write ``n_cases`` container files to ``out_dir``; returns their paths."""
    if n_cases < 1:
        raise ValueError(f"need at least one case, got {n_cases}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for idx in range(n_cases):
        case = gen_case(spec, idx, n_slices, q, r_list, acl_map)
        paths.append(write_container(out / f"{case.case_id}.h5", case, float16=float16))
    return paths


def _store(f, name: str, arr: np.ndarray, float16: bool) -> None:
    if float16 and np.iscomplexobj(arr):
        packed = np.stack([arr.real, arr.imag], axis=-1).astype(np.float16)
        ds = f.create_dataset(name, data=packed)
        ds.attrs["packed_complex16"] = 1
    else:
        f.create_dataset(name, data=arr)


def _load(f, name: str) -> np.ndarray:
    ds = f[name]
    arr = ds[()]
    if ds.attrs.get("packed_complex16"):
        arr = arr.astype(np.float64)
        return arr[..., 0] + 1j * arr[..., 1]
    return arr


def write_container(path, case: DatasetCase, float16: bool = False) -> Path:
    """Serialize one case. float64 fields round trip bitwise; with ``float16``
    the complex volumes are stored as half-precision (re, im) pairs, accurate
    to about 2^-11 relative."""
    case.validate()
    path = Path(path)
    with h5py.File(path, "w") as f:
        f.attrs["container_version"] = CONTAINER_VERSION
        f.attrs["case_id"] = case.case_id
        f.attrs["seed"] = case.seed
        f.attrs["sigma"] = case.sigma
        f.attrs["r_list"] = np.asarray(sorted(case.masks), dtype=np.int64)
        f.attrs["acl_counts"] = np.asarray(case.acl_counts, dtype=np.int64)
        f.attrs["foreground_fallback"] = case.foreground_fallback.astype(np.uint8)
        f.attrs["rss_max"] = case.rss_max
        _store(f, "kspace", case.kspace, float16)
        f.create_dataset("foreground", data=case.foreground)
        f.create_dataset("ismrmrd_header", data=case.header)
        for n in case.acl_counts:
            _store(f, f"smaps_acl{n}", case.smaps[n], float16)
            _store(f, f"reference_acl{n}", case.reference[n], float16)
            f.attrs[f"norm_lfimg_max_acl{n}"] = case.lf_max[n]
            f.attrs[f"norm_lfimg_mean_acl{n}"] = case.lf_mean[n]
            f.attrs[f"norm_lfimg_cov_acl{n}"] = np.asarray(case.lf_cov[n], dtype=np.float64)
            f.attrs[f"reference_max_acl{n}"] = case.reference_max[n]
        for r, mask in case.masks.items():
            f.create_dataset(f"mask_r{r}", data=mask.pe_mask)
            f.attrs[f"acl_r{r}"] = mask.acl_count
            f.attrs[f"mask_kind_r{r}"] = mask.kind
    return path


def _require_dataset(f, name: str):
    if name not in f:
        raise ContainerSchemaError(f"missing dataset {name!r}")
    return name


def _require_attr(f, name: str):
    if name not in f.attrs:
        raise ContainerSchemaError(f"missing attribute {name!r}")
    return f.attrs[name]


def read_container(path) -> DatasetCase:
    """Read and validate one container file.

    Raises :class:`ContainerFormatError` for unreadable or truncated files,
    :class:`ContainerVersionError` on a version tag mismatch, and
    :class:`ContainerSchemaError` for missing names or wrong array layouts.
    """
    path = Path(path)
    try:
        f = h5py.File(path, "r")
    except OSError as e:
        raise ContainerFormatError(f"cannot read {path}: {e}") from e
    try:
        version = _require_attr(f, "container_version")
        if int(version) != CONTAINER_VERSION:
            raise ContainerVersionError(
                f"container version {int(version)}, expected {CONTAINER_VERSION}")
        acl_counts = [int(n) for n in _require_attr(f, "acl_counts")]
        r_list = [int(r) for r in _require_attr(f, "r_list")]
        smaps, reference = {}, {}
        lf_max, lf_mean, lf_cov, reference_max = {}, {}, {}, {}
        for n in acl_counts:
            smaps[n] = _load(f, _require_dataset(f, f"smaps_acl{n}"))
            reference[n] = _load(f, _require_dataset(f, f"reference_acl{n}"))
            lf_max[n] = float(_require_attr(f, f"norm_lfimg_max_acl{n}"))
            lf_mean[n] = complex(_require_attr(f, f"norm_lfimg_mean_acl{n}"))
            lf_cov[n] = np.asarray(_require_attr(f, f"norm_lfimg_cov_acl{n}"))
            reference_max[n] = float(_require_attr(f, f"reference_max_acl{n}"))
        masks = {}
        for r in r_list:
            pe = np.asarray(_load(f, _require_dataset(f, f"mask_r{r}")))
            try:
                masks[r] = SamplingMask(pe_mask=pe, acl_count=int(_require_attr(f, f"acl_r{r}")),
                                        R=r, kind=str(_require_attr(f, f"mask_kind_r{r}")))
            except ValueError as e:
                raise ContainerSchemaError(f"invalid mask_r{r}: {e}") from e
        header = f["ismrmrd_header"][()] if "ismrmrd_header" in f else b""
        if isinstance(header, bytes):
            header = header.decode("utf-8")
        case = DatasetCase(
            case_id=str(_require_attr(f, "case_id")),
            kspace=_load(f, _require_dataset(f, "kspace")),
            smaps=smaps, reference=reference,
            foreground=np.asarray(_load(f, _require_dataset(f, "foreground"))),
            foreground_fallback=np.asarray(_require_attr(f, "foreground_fallback")).astype(bool),
            masks=masks, lf_max=lf_max, lf_mean=lf_mean, lf_cov=lf_cov,
            reference_max=reference_max, rss_max=float(_require_attr(f, "rss_max")),
            seed=int(_require_attr(f, "seed")), sigma=float(_require_attr(f, "sigma")),
            header=str(header))
        case.validate()
        return case
    except (OSError, KeyError) as e:
        raise ContainerFormatError(f"cannot read {path}: {e}") from e
    finally:
        f.close()


def whiten_stats_from_case(case: DatasetCase, acl: int) -> WhitenStats:
    """Rebuild the stored whitening moments for one calibration width."""
    if acl not in case.lf_mean:
        raise ValueError(f"no statistics stored for acl={acl}, have {case.acl_counts}")
    return WhitenStats(mean=case.lf_mean[acl], cov=case.lf_cov[acl])


def crop_fe_kspace(kspace: np.ndarray, target_rows: int) -> np.ndarray:
    """Crop the fully sampled frequency-encode axis (rows) of k-space by
    transforming rows to image space, center-cropping, and transforming back.
    ``target_rows`` equal to the current row count returns the input copy
    unchanged (the desk-scale no-op)."""
    kspace = np.asarray(kspace, dtype=np.complex128)
    h = kspace.shape[-2]
    if not 0 < target_rows <= h:
        raise ValueError(f"target rows must be in 1..{h}, got {target_rows}")
    if target_rows == h:
        return kspace.copy()
    lo = (h - target_rows) // 2
    hybrid = ifft1c(kspace, axis=-2)[..., lo:lo + target_rows, :]
    return fft1c(hybrid, axis=-2)


def crop_fe_image(arr: np.ndarray, target_rows: int) -> np.ndarray:
    """Center-crop the row axis of an image-domain array [..., H, W]."""
    arr = np.asarray(arr)
    h = arr.shape[-2]
    if not 0 < target_rows <= h:
        raise ValueError(f"target rows must be in 1..{h}, got {target_rows}")
    lo = (h - target_rows) // 2
    return arr[..., lo:lo + target_rows, :].copy()


def load_training_samples(path, R: int) -> list[TrainSample]:
    """Turn one container file into undersampled training samples for the
    given acceleration: k-space is masked on load, the reference magnitude is
    the rss over map sets, and the intensity range is the stored
    per-case reference maximum."""
    case = read_container(path)
    if R not in case.masks:
        raise ValueError(f"no mask stored for R={R}, have {sorted(case.masks)}")
    mask = case.masks[R]
    acl = mask.acl_count
    if acl not in case.smaps:
        raise ValueError(f"no coil maps stored for acl={acl}, have {case.acl_counts}")
    samples = []
    for sl in range(case.n_slices):
        ref_mag = np.sqrt(np.sum(np.abs(case.reference[acl][sl]) ** 2, axis=0))
        samples.append(TrainSample(
            kspace=case.kspace[sl] * mask.pe_mask,
            mask=mask,
            smaps=SensitivityMaps(case.smaps[acl][sl]),
            reference=ref_mag,
            foreground=case.foreground[sl],
            data_range=case.reference_max[acl],
            case_id=case.case_id,
            slice_index=sl,
        ))
    return samples
