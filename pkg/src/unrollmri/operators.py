"""Multicoil Cartesian acquisition operators.

Two operator families share one measurement model y = mask * fft2c(coil
images) + noise:

* sensitivity operators combine image content with explicit coil maps
  (optionally several map sets per voxel, "soft" combination), so the image
  variable is [M, H, W];
* coilwise operators act per coil without maps, the image variable is the
  coil-image stack [Q, H, W].

The phase-encode axis is the last axis; frequency encoding (rows) is always
fully sampled. All functions are pure; mask generation takes an explicit seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ctensor import fft2c, ifft2c, rss

SMAPS_RSS_TOL = 1e-6
SUPPORT_FRAC = 0.05  # relative rss level below which estimated maps are zeroed


@dataclass(frozen=True)
class SamplingMask:
    """Binary phase-encode line mask with a fully-sampled central block."""

    pe_mask: np.ndarray  # [n_pe] of {0.0, 1.0}
    acl_count: int
    R: int
    kind: str  # random | equispaced

    def __post_init__(self):
        pe = np.asarray(self.pe_mask, dtype=np.float64)
        object.__setattr__(self, "pe_mask", pe)
        if pe.ndim != 1:
            raise ValueError("pe_mask must be 1-d")
        if not np.all((pe == 0.0) | (pe == 1.0)):
            raise ValueError("pe_mask entries must be exactly 0 or 1")
        n = pe.size
        lo = n // 2 - self.acl_count // 2
        if not np.all(pe[lo:lo + self.acl_count] == 1.0):
            raise ValueError("central auto-calibration lines must all be sampled")
        if abs(pe.sum() - n / self.R) > 1.0 + 1e-9:
            raise ValueError(
                f"mask samples {int(pe.sum())} lines, expected {n}/{self.R} within 1")

    @property
    def n_pe(self) -> int:
        return self.pe_mask.size

    def acl_only(self) -> np.ndarray:
        """The mask restricted to its central calibration block."""
        out = np.zeros_like(self.pe_mask)
        lo = self.n_pe // 2 - self.acl_count // 2
        out[lo:lo + self.acl_count] = 1.0
        return out


def acl_only_mask(n_pe: int, acl: int) -> np.ndarray:
    """Plain 1-d binary mask sampling only the central ``acl`` lines."""
    if not 0 < acl <= n_pe:
        raise ValueError(f"acl must be in 1..{n_pe}, got {acl}")
    out = np.zeros(n_pe)
    lo = n_pe // 2 - acl // 2
    out[lo:lo + acl] = 1.0
    return out


def make_mask(n_pe: int, R: int, acl: int, kind: str = "random",
              seed: int = 0) -> SamplingMask:
    """Build a deterministic undersampling mask.

    The central ``acl`` lines are always sampled and count toward the rate
    budget round(n_pe / R); remaining lines are drawn uniformly without
    replacement (``random``) or spread evenly (``equispaced``).
    """
    if R < 1:
        raise ValueError(f"acceleration must be >= 1, got {R}")
    if acl > n_pe:
        raise ValueError(f"acl={acl} exceeds n_pe={n_pe}")
    budget = int(round(n_pe / R))
    if acl > budget:
        raise ValueError(
            f"acl={acl} exceeds the {budget}-line budget for R={R}, n_pe={n_pe}")
    pe = acl_only_mask(n_pe, acl)
    extras = budget - acl
    candidates = np.flatnonzero(pe == 0.0)
    if extras > 0:
        if kind == "random":
            rng = np.random.default_rng(seed)
            chosen = rng.choice(candidates, size=extras, replace=False)
        elif kind == "equispaced":
            pos = (np.arange(extras) * candidates.size) // extras
            chosen = candidates[pos]
        else:
            raise ValueError(f"unknown mask kind {kind!r}")
        pe[chosen] = 1.0
    return SamplingMask(pe_mask=pe, acl_count=acl, R=R, kind=kind)


@dataclass(frozen=True)
class SensitivityMaps:
    """Per-coil complex spatial weights, possibly several map sets per voxel.

    ``maps`` is [Q, M, H, W]. The first map set carries the anatomy: its
    coil-combined energy never exceeds 1 pointwise (rss-normalized inside the
    support, zero outside).
    """

    maps: np.ndarray = field()

    def __post_init__(self):
        m = np.asarray(self.maps, dtype=np.complex128)
        object.__setattr__(self, "maps", m)
        if m.ndim != 4:
            raise ValueError(f"maps must be [Q, M, H, W], got shape {m.shape}")
        if not np.all(np.isfinite(m.view(np.float64))):
            raise ValueError("non-finite sensitivity maps")
        energy = np.sum(np.abs(m[:, 0]) ** 2, axis=0)
        if energy.max() > 1.0 + SMAPS_RSS_TOL:
            raise ValueError(
                f"first map set exceeds unit coil-combined energy: {energy.max():.6f}")

    @property
    def coils(self) -> int:
        return self.maps.shape[0]

    @property
    def sets(self) -> int:
        return self.maps.shape[1]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.maps.shape[2], self.maps.shape[3]


def _check_pe(mask: SamplingMask, w: int) -> None:
    if mask.n_pe != w:
        raise ValueError(f"mask has {mask.n_pe} phase-encode lines, k-space width is {w}")


def sense_forward(x: np.ndarray, smaps: SensitivityMaps, mask: SamplingMask) -> np.ndarray:
    """Image sets [M, H, W] -> undersampled multicoil k-space [Q, H, W]."""
    x = np.asarray(x, dtype=np.complex128)
    q, m, h, w = smaps.maps.shape
    if x.shape != (m, h, w):
        raise ValueError(f"expected image shape {(m, h, w)}, got {x.shape}")
    _check_pe(mask, w)
    coil_imgs = np.einsum("qmhw,mhw->qhw", smaps.maps, x)
    return fft2c(coil_imgs) * mask.pe_mask


def sense_adjoint(y: np.ndarray, smaps: SensitivityMaps, mask: SamplingMask) -> np.ndarray:
    """Multicoil k-space [Q, H, W] -> image sets [M, H, W]; exact adjoint of
    :func:`sense_forward`."""
    y = np.asarray(y, dtype=np.complex128)
    q, m, h, w = smaps.maps.shape
    if y.shape != (q, h, w):
        raise ValueError(f"expected k-space shape {(q, h, w)}, got {y.shape}")
    _check_pe(mask, w)
    coil_imgs = ifft2c(y * mask.pe_mask)
    return np.einsum("qmhw,qhw->mhw", np.conj(smaps.maps), coil_imgs)


def pcn_op(arr: np.ndarray, mask: SamplingMask, direction: str) -> np.ndarray:
    """Coilwise operator: forward = mask * fft2c per coil, adjoint = ifft2c of
    the masked k-space. Satisfies forward(adjoint(y)) == mask * y."""
    arr = np.asarray(arr, dtype=np.complex128)
    if arr.ndim != 3:
        raise ValueError(f"expected [Q, H, W], got shape {arr.shape}")
    _check_pe(mask, arr.shape[-1])
    if direction == "forward":
        return fft2c(arr) * mask.pe_mask
    if direction == "adjoint":
        return ifft2c(arr * mask.pe_mask)
    raise ValueError(f"unknown direction {direction!r}")


class SenseOp:
    """Bound sensitivity operator: callable forward/adjoint closures around
    fixed maps and mask, for DC layers and graph nodes."""

    kind = "sn"

    def __init__(self, smaps: SensitivityMaps, mask: SamplingMask):
        _check_pe(mask, smaps.image_shape[1])
        self.smaps = smaps
        self.mask = mask

    @property
    def image_shape(self) -> tuple[int, ...]:
        return (self.smaps.sets, *self.smaps.image_shape)

    @property
    def kspace_shape(self) -> tuple[int, ...]:
        return (self.smaps.coils, *self.smaps.image_shape)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return sense_forward(x, self.smaps, self.mask)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        return sense_adjoint(y, self.smaps, self.mask)

    def normal(self, x: np.ndarray) -> np.ndarray:
        return self.adjoint(self.forward(x))


class CoilwiseOp:
    """Bound coilwise operator for the map-free model."""

    kind = "pcn"

    def __init__(self, coils: int, mask: SamplingMask):
        self.coils = coils
        self.mask = mask

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[0] != self.coils:
            raise ValueError(f"expected {self.coils} coils, got {x.shape[0]}")
        return pcn_op(x, self.mask, "forward")

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        if y.shape[0] != self.coils:
            raise ValueError(f"expected {self.coils} coils, got {y.shape[0]}")
        return pcn_op(y, self.mask, "adjoint")

    def normal(self, x: np.ndarray) -> np.ndarray:
        return self.adjoint(self.forward(x))


def zero_filled(y: np.ndarray, mask: SamplingMask,
                smaps: SensitivityMaps | None = None,
                kind: str = "sn") -> np.ndarray:
    """Zero-filled initialization: adjoint of the chosen operator applied to
    the measurements."""
    if kind == "sn":
        if smaps is None:
            raise ValueError("sensitivity operator needs coil maps")
        return sense_adjoint(y, smaps, mask)
    if kind == "pcn":
        return pcn_op(y, mask, "adjoint")
    raise ValueError(f"unknown operator kind {kind!r}")


def estimate_smaps_lowres(y: np.ndarray, acl: int) -> SensitivityMaps:
    """Estimate single-set coil maps from the calibration lines.

    Each coil's low-frequency image is divided by the coil-combined rss
    (floored at 1e-12); voxels whose rss falls below 5% of its maximum are
    treated as background and zeroed.
    """
    y = np.asarray(y, dtype=np.complex128)
    if y.ndim != 3:
        raise ValueError(f"expected [Q, H, W] k-space, got {y.shape}")
    if acl < 4:
        raise ValueError(f"need at least 4 calibration lines, got {acl}")
    if not np.any(y):
        raise ValueError("all-zero k-space, cannot estimate coil maps")
    lf = ifft2c(y * acl_only_mask(y.shape[-1], acl))
    combined = rss(lf)
    support = combined >= SUPPORT_FRAC * combined.max()
    maps = lf / (combined + 1e-12) * support
    return SensitivityMaps(maps=maps[:, None])


def op_norm(op, shape: tuple[int, ...] | None = None, iters: int = 50,
            seed: int = 0) -> float:
    """Largest singular value of the forward operator, by power iteration on
    the normal operator. ``shape`` is the image-domain shape; inferred for
    sensitivity operators."""
    if shape is None:
        if op.kind != "sn":
            raise ValueError("image shape required for coilwise operators")
        shape = op.image_shape
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    lam = 0.0
    for _ in range(iters):
        av = op.normal(v)
        lam = np.linalg.norm(av)
        if lam == 0.0:
            return 0.0
        v = av / lam
    return float(np.sqrt(lam))
