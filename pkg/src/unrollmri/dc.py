"""Data-consistency layers for unrolled reconstruction.

Four interchangeable maps pull an intermediate image back toward the measured
k-space: a gradient step on the data term, the proximal map of the data term
(conjugate-gradient solve, or closed form for the coilwise model), a
variable-splitting update with a coil-wise auxiliary image, and the identity
(pure image enhancement).

Every layer exists twice: as a plain ndarray function (used by oracles, the
CLI and evaluation) and as a graph builder over autodiff Tensors (used in
training, where the data-term weights are trainable). The graph CG unrolls a
fixed number of iterations so gradients are exact derivatives of the computed
output, not an implicit-function approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .ctensor import fft2c, ifft2c
from .operators import SamplingMask, SensitivityMaps

DENOM_FLOOR = 1e-12

DC_KINDS = ("gd", "pg", "vs", "id")


@dataclass(frozen=True)
class DcConfig:
    """Configuration of one data-consistency layer.

    ``lam`` weighs the data term; ``alpha``/``beta`` weigh the two soft
    constraints of the variable-splitting update.
    """

    kind: str
    lam: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    cg_iters: int = 10
    cg_tol: float = 1e-6

    def __post_init__(self):
        if self.kind not in DC_KINDS:
            raise ValueError(f"unknown dc kind {self.kind!r}, expected one of {DC_KINDS}")
        if self.lam < 0:
            raise ValueError(f"data-term weight must be >= 0, got {self.lam}")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("splitting weights alpha and beta must be > 0")
        if self.cg_iters < 1:
            raise ValueError("cg_iters must be >= 1")
        if self.cg_tol <= 0:
            raise ValueError("cg_tol must be > 0")


@dataclass(frozen=True)
class VsState:
    """Coil-wise auxiliary image of the variable-splitting layer."""

    z: np.ndarray  # complex [Q, H, W]

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.complex128)
        object.__setattr__(self, "z", z)
        if not np.all(np.isfinite(z.view(np.float64))):
            raise ValueError("non-finite splitting variable")


# ---------------------------------------------------------------------------
# conjugate gradients


def cg_solve(apply_h, b: np.ndarray, iters: int = 10, tol: float = 1e-6) -> np.ndarray:
    """Conjugate gradients for H x = b with Hermitian positive definite H.

    Starts from zero and stops when the (recursively tracked) residual
    satisfies ||H x - b|| <= tol * ||b||, or after ``iters`` iterations.
    """
    b = np.asarray(b, dtype=np.complex128)
    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        return np.zeros_like(b)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = np.real(np.vdot(r, r))
    for _ in range(iters):
        if np.sqrt(rs) <= tol * norm_b:
            break
        hp = apply_h(p)
        alpha = rs / np.real(np.vdot(p, hp))
        x = x + alpha * p
        r = r - alpha * hp
        if not np.all(np.isfinite(r.view(np.float64))):
            raise FloatingPointError("conjugate gradient produced non-finite residual")
        rs_new = np.real(np.vdot(r, r))
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def graph_cg(apply_h, b: ad.Tensor, iters: int = 10, tol: float = 1e-6) -> ad.Tensor:
    """Unrolled conjugate gradients on graph Tensors (same recursion and
    stopping rule as :func:`cg_solve`, evaluated on node values)."""
    norm_b = np.linalg.norm(b.value)
    if norm_b == 0.0:
        return ad.constant(np.zeros_like(b.value))
    x = ad.constant(np.zeros_like(b.value))
    r = b
    p = r
    rs = ad.cdot_real(r, r)
    for _ in range(iters):
        if np.sqrt(rs.value) <= tol * norm_b:
            break
        hp = apply_h(p)
        alpha = ad.div(rs, ad.cdot_real(p, hp))
        x = ad.add(x, ad.mul(p, alpha))
        r = ad.sub(r, ad.mul(hp, alpha))
        rs_new = ad.cdot_real(r, r)
        p = ad.add(r, ad.mul(p, ad.div(rs_new, rs)))
        rs = rs_new
    return x


# ---------------------------------------------------------------------------
# ndarray layers


def dc_gd(x_half: np.ndarray, y: np.ndarray, op, cfg: DcConfig) -> np.ndarray:
    """Gradient step on the data term: x - lam * A^H (A x - y).

    A zero weight short-circuits to the input, bit for bit.
    """
    if cfg.kind != "gd":
        raise ValueError(f"dc_gd called with kind {cfg.kind!r}")
    if cfg.lam == 0.0:
        return x_half.copy()
    return x_half - cfg.lam * op.adjoint(op.forward(x_half) - y)


def _pg_closed_form_kspace_weights(lam: float, pe_mask: np.ndarray) -> np.ndarray:
    # sampled lines blend toward y with weight 1/(1+lam); others untouched
    return (1.0 - pe_mask) + pe_mask / (1.0 + lam)


def dc_pg(x_half: np.ndarray, y: np.ndarray, op, cfg: DcConfig) -> np.ndarray:
    """Proximal map of the data term:

        argmin_x  1/2 ||x - x_half||^2 + lam/2 ||A x - y||^2

    Sensitivity operators solve (I + lam A^H A) x = x_half + lam A^H y by CG;
    the coilwise model is diagonal in k-space and solved in closed form.
    """
    if cfg.kind != "pg":
        raise ValueError(f"dc_pg called with kind {cfg.kind!r}")
    if cfg.lam == 0.0:
        return x_half.copy()
    if op.kind == "pcn":
        m = op.mask.pe_mask
        k = fft2c(x_half) + cfg.lam * (y * m)
        return ifft2c(k * _pg_closed_form_kspace_weights(cfg.lam, m))

    def apply_h(v):
        return v + cfg.lam * op.adjoint(op.forward(v))

    b = x_half + cfg.lam * op.adjoint(y)
    return cg_solve(apply_h, b, iters=cfg.cg_iters, tol=cfg.cg_tol)


def _vs_map_gram(smaps: SensitivityMaps) -> np.ndarray:
    """Per-pixel Gram matrix of the map sets: G[h,w,m,n] = sum_q conj(c_qm) c_qn."""
    c = smaps.maps
    return np.einsum("qmhw,qnhw->hwmn", np.conj(c), c)


def dc_vs(x_half: np.ndarray, y: np.ndarray, smaps: SensitivityMaps,
          mask: SamplingMask, cfg: DcConfig) -> tuple[np.ndarray, VsState]:
    """Variable-splitting update with a coil-wise auxiliary image z.

    z_q minimizes  lam/2 ||m * fft2c(z_q) - y_q||^2 + alpha/2 ||z_q - (C x_half)_q||^2
    (diagonal in k-space), then x minimizes
    beta/2 ||x - x_half||^2 + alpha/2 sum_q ||(C x)_q - z_q||^2
    (pointwise M x M Hermitian solve).
    """
    if cfg.kind != "vs":
        raise ValueError(f"dc_vs called with kind {cfg.kind!r}")
    c = smaps.maps
    m1d = mask.pe_mask

    coil = np.einsum("qmhw,mhw->qhw", c, x_half)
    denom_z = cfg.lam * m1d + cfg.alpha  # per phase-encode line
    if denom_z.min() < DENOM_FLOOR:
        raise FloatingPointError("variable-splitting z-step denominator below floor")
    kz = (cfg.alpha * fft2c(coil) + cfg.lam * (y * m1d)) / denom_z
    z = ifft2c(kz)

    rhs = cfg.beta * x_half + cfg.alpha * np.einsum("qmhw,qhw->mhw", np.conj(c), z)
    n_sets = c.shape[1]
    if n_sets == 1:
        denom_x = cfg.beta + cfg.alpha * np.sum(np.abs(c[:, 0]) ** 2, axis=0)
        if denom_x.min() < DENOM_FLOOR:
            raise FloatingPointError("variable-splitting x-step denominator below floor")
        x = rhs / denom_x[None]
    else:
        if cfg.beta < DENOM_FLOOR:
            raise FloatingPointError("variable-splitting x-step denominator below floor")
        mat = cfg.alpha * _vs_map_gram(smaps)
        mat[..., range(n_sets), range(n_sets)] += cfg.beta
        sol = np.linalg.solve(mat, np.moveaxis(rhs, 0, -1)[..., None])
        x = np.moveaxis(sol[..., 0], -1, 0)
    return x, VsState(z=z)


def dc_id(x_half: np.ndarray) -> np.ndarray:
    """Identity layer: the cascade becomes a pure image enhancer."""
    return x_half


def apply_dc(x_half: np.ndarray, y: np.ndarray, op, cfg: DcConfig) -> np.ndarray:
    """Dispatch on cfg.kind; the VS auxiliary image is dropped."""
    if cfg.kind == "gd":
        return dc_gd(x_half, y, op, cfg)
    if cfg.kind == "pg":
        return dc_pg(x_half, y, op, cfg)
    if cfg.kind == "vs":
        if op.kind != "sn":
            raise ValueError("variable splitting requires the sensitivity operator")
        return dc_vs(x_half, y, op.smaps, op.mask, cfg)[0]
    return dc_id(x_half)


# ---------------------------------------------------------------------------
# graph layers (trainable weights)


def _as_scalar_tensor(v) -> ad.Tensor:
    return v if isinstance(v, ad.Tensor) else ad.constant(np.float64(v))


def _graph_linop(op):
    fwd = lambda t: ad.apply_linop(t, op.forward, op.adjoint, "acq_forward")
    adj = lambda t: ad.apply_linop(t, op.adjoint, op.forward, "acq_adjoint")
    return fwd, adj


def graph_dc_gd(x_half: ad.Tensor, y: np.ndarray, op, lam) -> ad.Tensor:
    if not isinstance(lam, ad.Tensor) and float(lam) == 0.0:
        return x_half
    fwd, adj = _graph_linop(op)
    resid = ad.sub(fwd(x_half), ad.constant(y))
    return ad.sub(x_half, ad.mul(adj(resid), _as_scalar_tensor(lam)))


def graph_dc_pg(x_half: ad.Tensor, y: np.ndarray, op, lam,
                cg_iters: int = 10, cg_tol: float = 1e-6) -> ad.Tensor:
    if not isinstance(lam, ad.Tensor) and float(lam) == 0.0:
        return x_half
    lam_t = _as_scalar_tensor(lam)
    if op.kind == "pcn":
        m1d = op.mask.pe_mask
        m2d = np.broadcast_to(m1d, y.shape[-2:]).copy()
        k = ad.add(ad.fft2c(x_half), ad.mul(ad.constant(y * m1d), lam_t))
        w = ad.add(ad.constant(1.0 - m2d),
                   ad.div(ad.constant(m2d), ad.add(lam_t, ad.constant(np.float64(1.0)))))
        return ad.ifft2c(ad.mul(k, w))

    fwd, adj = _graph_linop(op)

    def apply_h(v):
        return ad.add(v, ad.mul(adj(fwd(v)), lam_t))

    b = ad.add(x_half, ad.mul(adj(ad.constant(y)), lam_t))
    return graph_cg(apply_h, b, iters=cg_iters, tol=cg_tol)


def graph_dc_vs(x_half: ad.Tensor, y: np.ndarray, smaps: SensitivityMaps,
                mask: SamplingMask, lam, alpha, beta) -> tuple[ad.Tensor, ad.Tensor]:
    """Graph version of :func:`dc_vs` for one or two map sets; the two-set
    pointwise system is inverted with the explicit 2x2 Hermitian formula."""
    lam_t, alpha_t, beta_t = map(_as_scalar_tensor, (lam, alpha, beta))
    c = smaps.maps
    q, n_sets, h, w = c.shape
    m2d = np.broadcast_to(mask.pe_mask, (h, w)).copy()

    expand = lambda t: ad.apply_linop(
        t, lambda v: np.einsum("qmhw,mhw->qhw", c, v),
        lambda v: np.einsum("qmhw,qhw->mhw", np.conj(c), v), "apply_maps")

    kz_num = ad.add(ad.mul(ad.fft2c(expand(x_half)), alpha_t),
                    ad.mul(ad.constant(y * mask.pe_mask), lam_t))
    denom_z = ad.add(ad.mul(ad.constant(m2d), lam_t), alpha_t)
    if denom_z.value.min() < DENOM_FLOOR:
        raise FloatingPointError("variable-splitting z-step denominator below floor")
    z = ad.ifft2c(ad.mul(kz_num, ad.reciprocal(denom_z)))

    combine = lambda t: ad.apply_linop(
        t, lambda v: np.einsum("qmhw,qhw->mhw", np.conj(c), v),
        lambda v: np.einsum("qmhw,mhw->qhw", c, v), "combine_maps")
    rhs = ad.add(ad.mul(x_half, beta_t), ad.mul(combine(z), alpha_t))

    gram = _vs_map_gram(smaps)  # [h, w, m, n]
    if n_sets == 1:
        denom_x = ad.add(beta_t, ad.mul(ad.constant(gram[..., 0, 0].real), alpha_t))
        if denom_x.value.min() < DENOM_FLOOR:
            raise FloatingPointError("variable-splitting x-step denominator below floor")
        x = ad.mul(rhs, ad.reciprocal(denom_x))
    elif n_sets == 2:
        if beta_t.value < DENOM_FLOOR:
            raise FloatingPointError("variable-splitting x-step denominator below floor")
        a_diag = ad.add(beta_t, ad.mul(ad.constant(gram[..., 0, 0].real), alpha_t))
        d_diag = ad.add(beta_t, ad.mul(ad.constant(gram[..., 1, 1].real), alpha_t))
        b_off = ad.mul(ad.constant(gram[..., 0, 1]), alpha_t)  # complex
        det = ad.sub(ad.mul(a_diag, d_diag),
                     ad.mul(ad.mul(alpha_t, alpha_t),
                            ad.constant(np.abs(gram[..., 0, 1]) ** 2)))
        inv_det = ad.reciprocal(det)
        r0 = ad.crop(rhs, (slice(0, 1),))
        r1 = ad.crop(rhs, (slice(1, 2),))
        x0 = ad.mul(ad.sub(ad.mul(r0, d_diag), ad.mul(r1, b_off)), inv_det)
        x1 = ad.mul(ad.sub(ad.mul(r1, a_diag), ad.mul(r0, ad.conj(b_off))), inv_det)
        x = ad.concat([x0, x1], axis=0)
    else:
        raise NotImplementedError(
            "trainable variable splitting supports 1 or 2 map sets")
    return x, z


def graph_apply_dc(x_half: ad.Tensor, y: np.ndarray, op, cfg: DcConfig,
                   lam=None, alpha=None, beta=None) -> ad.Tensor:
    """Dispatch like :func:`apply_dc`; scalar weights default to the config
    values but may be Tensors (trainable)."""
    lam = cfg.lam if lam is None else lam
    if cfg.kind == "gd":
        return graph_dc_gd(x_half, y, op, lam)
    if cfg.kind == "pg":
        return graph_dc_pg(x_half, y, op, lam, cfg.cg_iters, cfg.cg_tol)
    if cfg.kind == "vs":
        if op.kind != "sn":
            raise ValueError("variable splitting requires the sensitivity operator")
        alpha = cfg.alpha if alpha is None else alpha
        beta = cfg.beta if beta is None else beta
        return graph_dc_vs(x_half, y, op.smaps, op.mask, lam, alpha, beta)[0]
    return x_half
