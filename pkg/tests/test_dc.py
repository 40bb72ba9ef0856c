import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from unrollmri import autodiff as ad
from unrollmri.ctensor import fft2c, ifft2c
from unrollmri.dc import (DcConfig, VsState, apply_dc, cg_solve, dc_gd, dc_id,
                          dc_pg, dc_vs, graph_apply_dc, graph_cg, graph_dc_gd,
                          graph_dc_pg, graph_dc_vs)
from unrollmri.operators import (CoilwiseOp, SenseOp, SensitivityMaps,
                                 make_mask, op_norm)

from test_operators import random_smaps


def sn_instance(rng, q=2, m=1, h=8, w=8, R=2):
    smaps = random_smaps(rng, q, m, h, w)
    mask = make_mask(w, R, acl=max(2, w // (2 * R)), seed=int(rng.integers(1 << 30)))
    op = SenseOp(smaps, mask)
    x = rng.standard_normal((m, h, w)) + 1j * rng.standard_normal((m, h, w))
    y = rng.standard_normal((q, h, w)) + 1j * rng.standard_normal((q, h, w))
    y *= mask.pe_mask
    return op, x, y


# ---------------------------------------------------------------------------
# config validation


def test_dc_config_validation():
    DcConfig(kind="gd", lam=0.0)
    for bad in (dict(kind="newton"), dict(kind="gd", lam=-1.0),
                dict(kind="vs", alpha=0.0), dict(kind="vs", beta=-2.0),
                dict(kind="pg", cg_iters=0), dict(kind="pg", cg_tol=0.0)):
        with pytest.raises(ValueError):
            DcConfig(**bad)
    with pytest.raises(ValueError):
        VsState(z=np.array([np.nan + 0j]))


# ---------------------------------------------------------------------------
# conjugate gradients


def test_cg_identity_single_iteration():
    rng = np.random.default_rng(0)
    b = rng.standard_normal((3, 4)) + 1j * rng.standard_normal((3, 4))
    x = cg_solve(lambda v: v, b, iters=1, tol=0.0)
    np.testing.assert_allclose(x, b, atol=1e-14)


def test_cg_diagonal_krylov_exact_in_four_iterations():
    d = np.array([1.0, 2.0, 3.0, 4.0])
    rng = np.random.default_rng(1)
    b = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    x = cg_solve(lambda v: d * v, b, iters=4, tol=0.0)
    np.testing.assert_allclose(x, b / d, atol=1e-10)


def test_cg_dense_spd_vs_direct_solve():
    rng = np.random.default_rng(2)
    n = 16
    for trial in range(5):
        g = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        h_mat = g.conj().T @ g + 0.5 * np.eye(n)
        b = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        x = cg_solve(lambda v: h_mat @ v, b, iters=200, tol=1e-10)
        direct = np.linalg.solve(h_mat, b)
        assert np.linalg.norm(x - direct) / np.linalg.norm(direct) <= 1e-6


def test_cg_zero_rhs_and_nonfinite_error():
    assert np.all(cg_solve(lambda v: v, np.zeros(4, complex)) == 0)
    b = np.ones(4, complex)
    with pytest.raises(FloatingPointError):
        cg_solve(lambda v: np.full_like(v, np.nan), b, iters=3, tol=0.0)


def test_graph_cg_matches_numeric():
    rng = np.random.default_rng(3)
    g = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    h_mat = g.conj().T @ g + np.eye(8)
    b = rng.standard_normal(8) + 1j * rng.standard_normal(8)
    numeric = cg_solve(lambda v: h_mat @ v, b, iters=12, tol=1e-9)
    graphed = graph_cg(lambda t: ad.apply_linop(t, lambda v: h_mat @ v,
                                                lambda v: h_mat.conj().T @ v),
                       ad.constant(b), iters=12, tol=1e-9)
    np.testing.assert_allclose(graphed.value, numeric, atol=1e-12)


# ---------------------------------------------------------------------------
# gradient-step layer


def test_dc_gd_zero_weight_bitwise_identity():
    rng = np.random.default_rng(4)
    op, x, y = sn_instance(rng)
    out = dc_gd(x, y, op, DcConfig(kind="gd", lam=0.0))
    assert out.tobytes() == x.tobytes()


def test_dc_gd_consistent_input_is_fixed_point():
    rng = np.random.default_rng(5)
    op, x, _ = sn_instance(rng)
    y = op.forward(x)
    out = dc_gd(x, y, op, DcConfig(kind="gd", lam=0.3))
    np.testing.assert_array_equal(out, x)


def test_dc_gd_loop_oracle():
    rng = np.random.default_rng(6)
    op, x, y = sn_instance(rng, q=3, m=2)
    lam = 0.37
    out = dc_gd(x, y, op, DcConfig(kind="gd", lam=lam))

    c = op.smaps.maps
    q, m, h, w = c.shape
    # hand-expanded per-coil, per-set loops
    resid = np.empty((q, h, w), complex)
    for qi in range(q):
        coil_img = np.zeros((h, w), complex)
        for mi in range(m):
            coil_img += c[qi, mi] * x[mi]
        resid[qi] = fft2c(coil_img) * op.mask.pe_mask - y[qi]
    correction = np.zeros((m, h, w), complex)
    for qi in range(q):
        back = ifft2c(resid[qi] * op.mask.pe_mask)
        for mi in range(m):
            correction[mi] += np.conj(c[qi, mi]) * back
    np.testing.assert_allclose(out, x - lam * correction, atol=1e-10)


def test_dc_gd_energy_decrease_under_small_steps():
    rng = np.random.default_rng(7)
    for trial in range(10):
        op, x, y = sn_instance(rng, q=int(rng.choice([1, 4])), m=1)
        lam = 0.99 / op_norm(op, iters=80, seed=trial) ** 2
        out = dc_gd(x, y, op, DcConfig(kind="gd", lam=lam))
        before = np.linalg.norm(op.forward(x) - y)
        after = np.linalg.norm(op.forward(out) - y)
        assert after <= before + 1e-12


# ---------------------------------------------------------------------------
# proximal layer


def test_dc_pg_zero_weight_identity():
    rng = np.random.default_rng(8)
    op, x, y = sn_instance(rng)
    out = dc_pg(x, y, op, DcConfig(kind="pg", lam=0.0))
    assert out.tobytes() == x.tobytes()


def test_dc_pg_pcn_closed_form_vs_cg_oracle():
    rng = np.random.default_rng(9)
    mask = make_mask(8, 2, acl=2, seed=1)
    op = CoilwiseOp(3, mask)
    x = rng.standard_normal((3, 8, 8)) + 1j * rng.standard_normal((3, 8, 8))
    y = (rng.standard_normal((3, 8, 8)) + 1j * rng.standard_normal((3, 8, 8)))
    y *= mask.pe_mask
    lam = 0.8
    closed = dc_pg(x, y, op, DcConfig(kind="pg", lam=lam))
    # same objective solved iteratively
    cg = cg_solve(lambda v: v + lam * op.adjoint(op.forward(v)),
                  x + lam * op.adjoint(y), iters=50, tol=1e-12)
    assert np.linalg.norm(closed - cg) / np.linalg.norm(cg) <= 1e-6


def test_dc_pg_pcn_large_weight_replaces_sampled_lines():
    rng = np.random.default_rng(10)
    mask = make_mask(8, 1, acl=2, seed=0)  # fully sampled
    op = CoilwiseOp(2, mask)
    x = rng.standard_normal((2, 8, 8)) + 1j * rng.standard_normal((2, 8, 8))
    y = rng.standard_normal((2, 8, 8)) + 1j * rng.standard_normal((2, 8, 8))
    out = dc_pg(x, y, op, DcConfig(kind="pg", lam=1e6))
    rel = np.linalg.norm(fft2c(out) - y) / np.linalg.norm(y)
    assert rel <= 2e-6


def test_dc_pg_sn_optimality_condition():
    rng = np.random.default_rng(11)
    op, x_half, y = sn_instance(rng, q=3, m=1)
    lam = 0.5
    cfg = DcConfig(kind="pg", lam=lam, cg_iters=100, cg_tol=1e-8)
    x = dc_pg(x_half, y, op, cfg)
    grad = (x - x_half) + lam * op.adjoint(op.forward(x) - y)
    assert np.linalg.norm(grad) <= 1e-5 * np.linalg.norm(x_half)


def test_dc_pg_sn_matches_dense_normal_solve():
    # tiny instance: build the dense system matrix over split-real coords
    rng = np.random.default_rng(12)
    op, x_half, y = sn_instance(rng, q=2, m=1, h=4, w=4)
    lam = 0.9
    cfg = DcConfig(kind="pg", lam=lam, cg_iters=200, cg_tol=1e-12)
    x = dc_pg(x_half, y, op, cfg)

    n = x_half.size
    h_mat = np.zeros((n, n), complex)
    for j in range(n):
        e = np.zeros(n, complex)
        e[j] = 1.0
        v = e.reshape(x_half.shape)
        h_mat[:, j] = (v + lam * op.adjoint(op.forward(v))).ravel()
    b = (x_half + lam * op.adjoint(y)).ravel()
    direct = np.linalg.solve(h_mat, b).reshape(x_half.shape)
    assert np.linalg.norm(x - direct) / np.linalg.norm(direct) <= 1e-6


# ---------------------------------------------------------------------------
# variable-splitting layer


def coordinate_argmin(obj, x0: np.ndarray, sweeps: int = 60) -> np.ndarray:
    """Derivative-free per-coordinate golden-section minimizer over the real
    and imaginary parts; independent oracle for the closed forms."""
    x = x0.astype(complex).copy()
    flat = x.reshape(-1)
    for _ in range(sweeps):
        for i in range(flat.size):
            for part in (1.0, 1.0j):
                base = flat[i]

                def phi(t):
                    flat[i] = base + part * t
                    val = obj(x)
                    flat[i] = base
                    return val

                res = minimize_scalar(phi, bounds=(-8.0, 8.0), method="bounded",
                                      options={"xatol": 1e-12})
                flat[i] = base + part * res.x
    return x


@pytest.mark.parametrize("n_sets", [1, 2])
def test_dc_vs_closed_forms_vs_golden_section_oracle(n_sets):
    rng = np.random.default_rng(13 + n_sets)
    q, h, w = 2, 2, 2
    smaps = random_smaps(rng, q, n_sets, h, w)
    mask = make_mask(w, 2, acl=1, seed=0)
    x_half = rng.standard_normal((n_sets, h, w)) + 1j * rng.standard_normal((n_sets, h, w))
    y = (rng.standard_normal((q, h, w)) + 1j * rng.standard_normal((q, h, w)))
    y *= mask.pe_mask
    cfg = DcConfig(kind="vs", lam=0.7, alpha=1.1, beta=0.9)
    x, state = dc_vs(x_half, y, smaps, mask, cfg)

    c = smaps.maps
    coil = np.einsum("qmhw,mhw->qhw", c, x_half)

    def z_objective(z):
        fid = np.linalg.norm(fft2c(z) * mask.pe_mask - y) ** 2
        prox = np.linalg.norm(z - coil) ** 2
        return 0.5 * cfg.lam * fid + 0.5 * cfg.alpha * prox

    z_oracle = coordinate_argmin(z_objective, coil.copy())
    np.testing.assert_allclose(state.z, z_oracle, atol=1e-6)

    def x_objective(v):
        tied = np.linalg.norm(v - x_half) ** 2
        coupling = np.linalg.norm(np.einsum("qmhw,mhw->qhw", c, v) - state.z) ** 2
        return 0.5 * cfg.beta * tied + 0.5 * cfg.alpha * coupling

    x_oracle = coordinate_argmin(x_objective, x_half.copy())
    np.testing.assert_allclose(x, x_oracle, atol=1e-6)


def test_dc_vs_zero_weight_passthrough_with_normalized_maps():
    rng = np.random.default_rng(15)
    smaps = random_smaps(rng, 3, 1, 8, 8)  # unit coil-combined energy
    mask = make_mask(8, 2, acl=2, seed=2)
    x_half = rng.standard_normal((1, 8, 8)) + 1j * rng.standard_normal((1, 8, 8))
    y = np.zeros((3, 8, 8), complex)
    x, state = dc_vs(x_half, y, smaps, mask, DcConfig(kind="vs", lam=0.0))
    coil = np.einsum("qmhw,mhw->qhw", smaps.maps, x_half)
    np.testing.assert_allclose(state.z, coil, atol=1e-12)
    np.testing.assert_allclose(x, x_half, atol=1e-10)


def test_dc_vs_fully_sampled_single_coil_symbolic():
    # c == 1, Q = M = 1, full mask, alpha == beta: both stages are scalar
    # blends, expanded here symbolically
    rng = np.random.default_rng(16)
    h = w = 4
    smaps = SensitivityMaps(maps=np.ones((1, 1, h, w), complex))
    mask = make_mask(w, 1, acl=2, seed=0)
    x_half = rng.standard_normal((1, h, w)) + 1j * rng.standard_normal((1, h, w))
    y = rng.standard_normal((1, h, w)) + 1j * rng.standard_normal((1, h, w))
    lam, a = 0.6, 1.3
    x, state = dc_vs(x_half, y, smaps, mask, DcConfig(kind="vs", lam=lam, alpha=a, beta=a))
    z_expected = ifft2c((a * fft2c(x_half[0]) + lam * y[0]) / (lam + a))
    np.testing.assert_allclose(state.z[0], z_expected, atol=1e-12)
    np.testing.assert_allclose(x[0], (a * x_half[0] + a * z_expected) / (2 * a),
                               atol=1e-12)


def test_dc_vs_denominator_floor():
    rng = np.random.default_rng(17)
    maps = np.zeros((2, 1, 4, 4), complex)  # zero maps: x-step denom is beta
    smaps = SensitivityMaps(maps=maps)
    mask = make_mask(4, 2, acl=1, seed=0)
    x_half = rng.standard_normal((1, 4, 4)) + 1j * rng.standard_normal((1, 4, 4))
    y = np.zeros((2, 4, 4), complex)
    cfg = DcConfig(kind="vs", lam=0.5, alpha=1e-13, beta=1e-13)
    with pytest.raises(FloatingPointError):
        dc_vs(x_half, y, smaps, mask, cfg)


def test_dc_vs_two_sets_matches_general_solver():
    # the 2x2 graph formula against the batched linear solve
    rng = np.random.default_rng(18)
    smaps = random_smaps(rng, 3, 2, 8, 8)
    mask = make_mask(8, 2, acl=2, seed=3)
    x_half = rng.standard_normal((2, 8, 8)) + 1j * rng.standard_normal((2, 8, 8))
    y = (rng.standard_normal((3, 8, 8)) + 1j * rng.standard_normal((3, 8, 8)))
    y *= mask.pe_mask
    cfg = DcConfig(kind="vs", lam=0.4, alpha=0.8, beta=1.2)
    x_num, _ = dc_vs(x_half, y, smaps, mask, cfg)
    x_graph, _ = graph_dc_vs(ad.constant(x_half), y, smaps, mask,
                             cfg.lam, cfg.alpha, cfg.beta)
    np.testing.assert_allclose(x_graph.value, x_num, atol=1e-10)


def test_dc_id_and_dispatch():
    rng = np.random.default_rng(19)
    for shape in [(1, 4, 4), (3, 8, 6), (2, 5, 5)]:
        x = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        assert dc_id(x) is x

    op, x, y = sn_instance(rng)
    np.testing.assert_array_equal(apply_dc(x, y, op, DcConfig(kind="id")), x)
    np.testing.assert_array_equal(apply_dc(x, y, op, DcConfig(kind="gd", lam=0.2)),
                                  dc_gd(x, y, op, DcConfig(kind="gd", lam=0.2)))
    with pytest.raises(ValueError):
        dc_gd(x, y, op, DcConfig(kind="id"))
    with pytest.raises(ValueError):
        apply_dc(x, y, CoilwiseOp(2, op.mask), DcConfig(kind="vs"))


# ---------------------------------------------------------------------------
# graph layers: value consistency and differentiability


def test_graph_dc_values_match_numeric():
    rng = np.random.default_rng(20)
    op, x, y = sn_instance(rng, q=2, m=1)
    for cfg in (DcConfig(kind="gd", lam=0.3), DcConfig(kind="pg", lam=0.7),
                DcConfig(kind="vs", lam=0.5, alpha=1.1, beta=0.9),
                DcConfig(kind="id")):
        num = apply_dc(x, y, op, cfg)
        graphed = graph_apply_dc(ad.constant(x), y, op, cfg)
        np.testing.assert_allclose(graphed.value, num, atol=1e-10,
                                   err_msg=cfg.kind)
    cop = CoilwiseOp(2, op.mask)
    z = rng.standard_normal((2, 8, 8)) + 1j * rng.standard_normal((2, 8, 8))
    yq = op.mask.pe_mask * (rng.standard_normal((2, 8, 8))
                            + 1j * rng.standard_normal((2, 8, 8)))
    cfg = DcConfig(kind="pg", lam=0.7)
    np.testing.assert_allclose(graph_apply_dc(ad.constant(z), yq, cop, cfg).value,
                               dc_pg(z, yq, cop, cfg), atol=1e-10)


def test_graph_dc_zero_float_weight_short_circuits():
    rng = np.random.default_rng(21)
    op, x, y = sn_instance(rng)
    t = ad.constant(x)
    assert graph_dc_gd(t, y, op, 0.0) is t
    assert graph_dc_pg(t, y, op, 0.0) is t


def graph_dc_gradcheck(kind, op_kind="sn"):
    rng = np.random.default_rng(hash(kind) % 1000)
    q, m, h, w = 2, 1, 8, 8
    smaps = random_smaps(rng, q, m, h, w)
    mask = make_mask(w, 2, acl=2, seed=0)
    op = SenseOp(smaps, mask) if op_kind == "sn" else CoilwiseOp(q, mask)
    chans = m if op_kind == "sn" else q
    re = ad.Parameter(rng.standard_normal((chans, h, w)), name="re")
    im = ad.Parameter(rng.standard_normal((chans, h, w)), name="im")
    lam_raw = ad.Parameter(-0.5, name="lam_raw")
    alpha_raw = ad.Parameter(0.2, name="alpha_raw")
    beta_raw = ad.Parameter(0.1, name="beta_raw")
    y = (rng.standard_normal((q, h, w)) + 1j * rng.standard_normal((q, h, w)))
    y *= mask.pe_mask

    def fn():
        xt = ad.channels_to_complex(ad.concat([re, im], axis=0))
        lam = ad.softplus(lam_raw)
        if kind == "gd":
            out = graph_dc_gd(xt, y, op, lam)
        elif kind == "pg":
            out = graph_dc_pg(xt, y, op, lam, cg_iters=8, cg_tol=1e-12)
        else:
            out, _ = graph_dc_vs(xt, y, smaps, mask, lam,
                                 ad.softplus(alpha_raw), ad.softplus(beta_raw))
        return ad.cdot_real(out, out)

    params = [re, im, lam_raw]
    if kind == "vs":
        params += [alpha_raw, beta_raw]
    return ad.grad_check(fn, params, n_coords=16)


@pytest.mark.parametrize("kind", ["gd", "pg", "vs"])
def test_graph_dc_gradients_sn(kind):
    assert graph_dc_gradcheck(kind, "sn") < 1e-4


def test_graph_dc_gradients_pcn_closed_form():
    assert graph_dc_gradcheck("pg", "pcn") < 1e-4


def test_graph_dc_vs_two_set_gradients():
    rng = np.random.default_rng(23)
    q, h, w = 2, 4, 4
    smaps = random_smaps(rng, q, 2, h, w)
    mask = make_mask(w, 2, acl=1, seed=0)
    re = ad.Parameter(rng.standard_normal((2, h, w)), name="re")
    im = ad.Parameter(rng.standard_normal((2, h, w)), name="im")
    lam_raw = ad.Parameter(-0.3, name="lam_raw")
    y = (rng.standard_normal((q, h, w)) + 1j * rng.standard_normal((q, h, w)))
    y *= mask.pe_mask

    def fn():
        xt = ad.channels_to_complex(ad.concat([re, im], axis=0))
        out, _ = graph_dc_vs(xt, y, smaps, mask, ad.softplus(lam_raw), 1.2, 0.8)
        return ad.cdot_real(out, out)

    assert ad.grad_check(fn, [re, im, lam_raw], n_coords=16) < 1e-4
    with pytest.raises(NotImplementedError):
        graph_dc_vs(ad.constant(np.zeros((3, h, w), complex)), y,
                    random_smaps(rng, q, 3, h, w), mask, 0.5, 1.0, 1.0)
