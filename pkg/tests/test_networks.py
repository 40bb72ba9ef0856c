import numpy as np
import pytest

from unrollmri import autodiff as ad
from unrollmri.ctensor import rss as rss_np
from unrollmri.ctensor import whiten_stats
from unrollmri.dc import DcConfig, dc_gd
from unrollmri.networks import (DunConfig, ModelCheckpoint, UnrolledConfig,
                                build_model_params, count_params,
                                discriminator_forward, discriminator_params,
                                dun_forward, inv_softplus, make_operator,
                                unet_forward, unrolled_recon, zero_regularizer)
from unrollmri.operators import SenseOp, make_mask

from test_operators import random_smaps

STATS = None


def small_stats(rng):
    return whiten_stats(rng.standard_normal(200) * 1.5 + 1j * rng.standard_normal(200))


# ---------------------------------------------------------------------------
# configs


def test_config_validation():
    with pytest.raises(ValueError):
        DunConfig(n_f=7)
    with pytest.raises(ValueError):
        DunConfig(n_f=0)
    with pytest.raises(ValueError):
        DunConfig(num_dub=0)
    with pytest.raises(ValueError):
        DunConfig(activation="gelu")
    with pytest.raises(ValueError):
        UnrolledConfig(kind="pcn", dc=DcConfig(kind="gd"))
    with pytest.raises(ValueError):
        UnrolledConfig(kind="pcn", dc=DcConfig(kind="vs"))
    UnrolledConfig(kind="pcn", dc=DcConfig(kind="pg"))
    with pytest.raises(ValueError):
        UnrolledConfig(cascades=0)
    with pytest.raises(ValueError):
        UnrolledConfig(regularizer="tv")
    with pytest.raises(ValueError):
        inv_softplus(0.0)


def test_config_json_round_trip():
    cfg = UnrolledConfig(kind="pcn", dc=DcConfig(kind="pg", lam=0.3),
                         cascades=6, shared=False, dun=DunConfig(n_f=4))
    assert UnrolledConfig.from_json(cfg.to_json()) == cfg


def test_dc_per_cascade_defaults():
    assert not UnrolledConfig(shared=True).dc_per_cascade
    assert UnrolledConfig(shared=False).dc_per_cascade
    assert UnrolledConfig(shared=True, per_cascade_dc=True).dc_per_cascade


# ---------------------------------------------------------------------------
# regularizers


@pytest.mark.parametrize("fwd,kind", [(dun_forward, "dun"), (unet_forward, "unet")])
def test_zero_parameter_regularizer_is_identity(fwd, kind):
    rng = np.random.default_rng(0)
    cfg = UnrolledConfig(regularizer=kind, dun=DunConfig(n_f=4, num_dub=2))
    params = build_model_params(cfg, in_chans=2, seed=1)
    zero_regularizer(params)
    x = rng.standard_normal((2, 16, 16)) + 1j * rng.standard_normal((2, 16, 16))
    stats = small_stats(rng)
    out = fwd(ad.constant(x), params, cfg.dun, stats, prefix="reg.")
    assert out.shape == x.shape
    np.testing.assert_allclose(out.value, x, atol=1e-10)


def test_dun_shape_preserved_with_random_params():
    rng = np.random.default_rng(2)
    cfg = UnrolledConfig(dun=DunConfig(n_f=8, num_dub=2))
    params = build_model_params(cfg, in_chans=2, seed=3)
    x = rng.standard_normal((2, 32, 32)) + 1j * rng.standard_normal((2, 32, 32))
    out = dun_forward(ad.constant(x), params, cfg.dun, small_stats(rng), prefix="reg.")
    assert out.shape == (2, 32, 32)
    assert np.iscomplexobj(out.value)
    assert np.all(np.isfinite(out.value.view(np.float64)))


def test_dun_divisibility_error_names_padding():
    rng = np.random.default_rng(3)
    cfg = UnrolledConfig(dun=DunConfig(n_f=4, num_dub=1))
    params = build_model_params(cfg, in_chans=1, seed=0)
    x = ad.constant(np.zeros((1, 10, 12), complex))
    with pytest.raises(ValueError, match="pad"):
        dun_forward(x, params, cfg.dun, small_stats(rng), prefix="reg.")


@pytest.mark.parametrize("kind,fwd", [("dun", dun_forward), ("unet", unet_forward)])
def test_regularizer_gradients(kind, fwd):
    rng = np.random.default_rng(4)
    cfg = UnrolledConfig(regularizer=kind,
                         dun=DunConfig(n_f=4, num_dub=1, depth=1, activation="prelu"))
    params = build_model_params(cfg, in_chans=1, seed=5)
    stats = small_stats(rng)
    re = ad.Parameter(rng.standard_normal((1, 16, 16)), name="re")
    im = ad.Parameter(rng.standard_normal((1, 16, 16)), name="im")

    def fn():
        x = ad.channels_to_complex(ad.concat([re, im], axis=0))
        out = fwd(x, params, cfg.dun, stats, prefix="reg.")
        return ad.cdot_real(out, out)

    checked = [re, im] + list(params.values())
    assert ad.grad_check(fn, checked, n_coords=6, seed=0) < 1e-4


def test_full_size_dun_gradients():
    # default desk topology, as used in training
    rng = np.random.default_rng(5)
    cfg = UnrolledConfig(dun=DunConfig(n_f=8, num_dub=2, depth=2))
    params = build_model_params(cfg, in_chans=1, seed=6)
    stats = small_stats(rng)
    x = ad.constant(rng.standard_normal((1, 16, 16))
                    + 1j * rng.standard_normal((1, 16, 16)))

    def fn():
        out = dun_forward(x, params, cfg.dun, stats, prefix="reg.")
        return ad.cdot_real(out, out)

    assert ad.grad_check(fn, list(params.values()), n_coords=4, seed=1) < 1e-4


# ---------------------------------------------------------------------------
# discriminator


def test_discriminator_zero_cases_and_shapes():
    params = discriminator_params(n_f=4, seed=0)
    z = discriminator_forward(ad.constant(np.zeros((64, 64))), params)
    assert z.item() == 0.0  # zero head on zero features
    for shape in [(64, 64), (96, 320), (1, 48, 48)]:
        score = discriminator_forward(ad.constant(np.random.default_rng(0).random(shape)),
                                      params)
        assert score.value.shape == ()


def test_discriminator_gradients():
    rng = np.random.default_rng(6)
    params = discriminator_params(n_f=2, seed=7)
    params["head.w"].value[:] = rng.standard_normal(16) * 0.3
    img = ad.Parameter(rng.standard_normal((16, 16)), name="img")

    def fn():
        s = discriminator_forward(img, params)
        return ad.mul(s, s)

    assert ad.grad_check(fn, [img] + list(params.values()), n_coords=6, seed=2) < 1e-4


# ---------------------------------------------------------------------------
# parameter bookkeeping


def test_parameter_counting_shared_vs_variable():
    base = dict(dc=DcConfig(kind="gd", lam=0.1), cascades=3, dun=DunConfig(n_f=4))
    shared = build_model_params(UnrolledConfig(shared=True, **base), in_chans=1, seed=0)
    variable = build_model_params(UnrolledConfig(shared=False, **base), in_chans=1, seed=0)
    cs, cv = count_params(shared), count_params(variable)
    assert cv["regularizer"] == 3 * cs["regularizer"]
    assert cs["dc_scalars"] == 1 and cv["dc_scalars"] == 3

    vs_cfg = UnrolledConfig(shared=False, dc=DcConfig(kind="vs"), cascades=2,
                            dun=DunConfig(n_f=4))
    assert count_params(build_model_params(vs_cfg, 1, 0))["dc_scalars"] == 6

    id_cfg = UnrolledConfig(dc=DcConfig(kind="id"), cascades=2, dun=DunConfig(n_f=4))
    assert count_params(build_model_params(id_cfg, 1, 0))["dc_scalars"] == 0


def test_param_init_deterministic():
    cfg = UnrolledConfig(dun=DunConfig(n_f=4))
    a = build_model_params(cfg, in_chans=1, seed=9)
    b = build_model_params(cfg, in_chans=1, seed=9)
    for name in a:
        np.testing.assert_array_equal(a[name].value, b[name].value)


# ---------------------------------------------------------------------------
# unrolled reconstruction


def sn_case(rng, q=2, m=1, h=16, w=16, R=2):
    smaps = random_smaps(rng, q, m, h, w)
    mask = make_mask(w, R, acl=max(2, w // (2 * R)), seed=int(rng.integers(1 << 30)))
    x_true = rng.standard_normal((m, h, w)) + 1j * rng.standard_normal((m, h, w))
    y = SenseOp(smaps, mask).forward(x_true)
    return smaps, mask, y


def test_single_cascade_identity_model_returns_zero_filled():
    rng = np.random.default_rng(10)
    smaps, mask, y = sn_case(rng)
    cfg = UnrolledConfig(dc=DcConfig(kind="id"), cascades=1, dun=DunConfig(n_f=4))
    params = build_model_params(cfg, in_chans=1, seed=0)
    zero_regularizer(params)
    mag, x_t, trace = unrolled_recon(y, mask, params, cfg, smaps=smaps)
    x0 = SenseOp(smaps, mask).adjoint(y)
    np.testing.assert_allclose(x_t, x0, atol=1e-10)
    np.testing.assert_allclose(mag, rss_np(x0), atol=1e-10)
    assert len(trace) == 1


def test_gd_zero_weight_equals_identity_dc_bitwise():
    rng = np.random.default_rng(11)
    smaps, mask, y = sn_case(rng)
    cfg = UnrolledConfig(dc=DcConfig(kind="gd", lam=0.2), cascades=2,
                         dun=DunConfig(n_f=4, num_dub=1))
    params = build_model_params(cfg, in_chans=1, seed=1)
    mag_gd, x_gd, _ = unrolled_recon(y, mask, params, cfg, smaps=smaps,
                                     lam_override=0.0)
    mag_id, x_id, _ = unrolled_recon(y, mask, params, cfg, smaps=smaps,
                                     dc_override=DcConfig(kind="id"))
    assert mag_gd.tobytes() == mag_id.tobytes()
    assert x_gd.tobytes() == x_id.tobytes()


def test_zero_regularizer_gd_collapses_to_plain_gradient_descent():
    rng = np.random.default_rng(12)
    smaps, mask, y = sn_case(rng, q=3)
    cfg = UnrolledConfig(dc=DcConfig(kind="gd", lam=0.35), cascades=4,
                         dun=DunConfig(n_f=4, num_dub=1), train_dc_weights=True)
    params = build_model_params(cfg, in_chans=1, seed=2)
    zero_regularizer(params)
    _, x_t, _ = unrolled_recon(y, mask, params, cfg, smaps=smaps)

    op = SenseOp(smaps, mask)
    lam = float(np.logaddexp(0.0, params["dc.lam_raw"].value))
    x = op.adjoint(y)
    gd_cfg = DcConfig(kind="gd", lam=lam)
    for _ in range(4):
        x = dc_gd(x, y, op, gd_cfg)
    np.testing.assert_allclose(x_t, x, atol=1e-10)


def test_full_sampling_large_weight_pg_recovers_adjoint():
    rng = np.random.default_rng(13)
    smaps = random_smaps(rng, 2, 1, 16, 16)  # unit coil-combined energy
    mask = make_mask(16, 1, acl=4, seed=0)
    op = SenseOp(smaps, mask)
    x_true = rng.standard_normal((1, 16, 16)) + 1j * rng.standard_normal((1, 16, 16))
    y = op.forward(x_true)
    cfg = UnrolledConfig(dc=DcConfig(kind="pg", lam=1.0, cg_iters=20, cg_tol=1e-12),
                         cascades=1, dun=DunConfig(n_f=4, num_dub=1))
    params = build_model_params(cfg, in_chans=1, seed=3)
    zero_regularizer(params)
    mag, _, _ = unrolled_recon(y, mask, params, cfg, smaps=smaps, lam_override=1e6)
    target = rss_np(op.adjoint(y))
    assert np.linalg.norm(mag - target) / np.linalg.norm(target) <= 1e-3


def test_trace_decreases_with_gd_cascades():
    rng = np.random.default_rng(14)
    smaps, mask, y = sn_case(rng, q=2, h=16, w=16)
    cfg = UnrolledConfig(dc=DcConfig(kind="gd", lam=0.4), cascades=5,
                         dun=DunConfig(n_f=4, num_dub=1), train_dc_weights=False)
    params = build_model_params(cfg, in_chans=1, seed=4)
    zero_regularizer(params)
    _, _, trace = unrolled_recon(y, mask, params, cfg, smaps=smaps)
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


def test_non_divisible_sizes_are_padded_and_cropped():
    rng = np.random.default_rng(15)
    smaps, mask, y = sn_case(rng, h=10, w=10)
    cfg = UnrolledConfig(dc=DcConfig(kind="gd", lam=0.1), cascades=2,
                         dun=DunConfig(n_f=4, num_dub=1))
    params = build_model_params(cfg, in_chans=1, seed=5)
    mag, x_t, _ = unrolled_recon(y, mask, params, cfg, smaps=smaps)
    assert mag.shape == (10, 10) and x_t.shape == (1, 10, 10)
    assert np.all(np.isfinite(mag))


def test_pcn_model_runs_with_pg():
    rng = np.random.default_rng(16)
    mask = make_mask(16, 2, acl=4, seed=1)
    y = (rng.standard_normal((3, 16, 16)) + 1j * rng.standard_normal((3, 16, 16)))
    y *= mask.pe_mask
    cfg = UnrolledConfig(kind="pcn", dc=DcConfig(kind="pg", lam=0.5), cascades=2,
                         dun=DunConfig(n_f=4, num_dub=1))
    params = build_model_params(cfg, in_chans=3, seed=6)
    mag, x_t, trace = unrolled_recon(y, mask, params, cfg)
    assert x_t.shape == (3, 16, 16) and mag.shape == (16, 16)
    with pytest.raises(ValueError):
        make_operator(UnrolledConfig(), mask, None)


def test_model_checkpoint_round_trip(tmp_path):
    cfg = UnrolledConfig(dc=DcConfig(kind="vs", lam=0.2), cascades=2,
                         shared=False, dun=DunConfig(n_f=4))
    params = build_model_params(cfg, in_chans=2, seed=7)
    ck = ModelCheckpoint(cfg=cfg, params=params,
                         meta={"seed": 7, "epochs": 3, "loss_curve": [2.0, 1.5]})
    path = tmp_path / "model.ckpt"
    ck.save(path)
    loaded = ModelCheckpoint.load(path)
    assert loaded.cfg == cfg
    assert loaded.meta["epochs"] == 3 and loaded.meta["loss_curve"] == [2.0, 1.5]
    assert set(loaded.params) == set(params)
    for name in params:
        np.testing.assert_array_equal(loaded.params[name].value, params[name].value)
