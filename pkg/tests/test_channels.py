import math

import numpy as np
import pytest

from fdbeam.arrays import ArrayConfig
from fdbeam.channels import (
    assemble_si,
    calibrate_budget,
    los_si_channel,
    make_site,
    nlos_si_channel,
    rician_weights,
    sample_scene,
)

CFG = ArrayConfig()


@pytest.fixture(scope="module")
def site():
    return make_site(1)


def test_los_single_element_pair_magnitude_and_phase():
    cfg = ArrayConfig(nt=1, nr=1, tx_shape=(1, 1), rx_shape=(1, 1), separation=10.0)
    h = los_si_channel(cfg)
    d = 10.0 * cfg.wavelength
    # normalized single entry: unit magnitude, phase -2*pi*d/lambda
    assert abs(abs(h[0, 0]) - 1.0) < 1e-12
    expected_phase = (-2 * np.pi * d / cfg.wavelength) % (2 * np.pi)
    assert abs((np.angle(h[0, 0]) % (2 * np.pi)) - expected_phase) < 1e-9


def test_los_frobenius_normalization():
    h = los_si_channel(CFG)
    assert np.linalg.norm(h) ** 2 == pytest.approx(CFG.nt * CFG.nr, abs=1e-9)


def test_los_inverse_distance_profile():
    cfg = ArrayConfig(nt=2, nr=1, tx_shape=(1, 2), rx_shape=(1, 1), separation=5.0)
    h = los_si_channel(cfg)
    # nearer tx element couples more strongly, ratio matches distance ratio
    d_far = (5.0 + 0.25) * cfg.wavelength
    d_near = (5.0 - 0.25) * cfg.wavelength
    assert abs(h[0, 1] / h[0, 0]) == pytest.approx(d_far / d_near, rel=1e-9) or \
        abs(h[0, 0] / h[0, 1]) == pytest.approx(d_far / d_near, rel=1e-9)


def test_los_is_quasi_static():
    assert np.array_equal(los_si_channel(CFG), los_si_channel(CFG))


def test_nlos_deterministic_given_seeds(site):
    a = nlos_si_channel(site, CFG, rng_seed=42)
    b = nlos_si_channel(site, CFG, rng_seed=42)
    assert np.array_equal(a, b)
    c = nlos_si_channel(site, CFG, rng_seed=43)
    assert not np.array_equal(a, c)


def test_nlos_single_reflector_rank_one():
    site = make_site(5, n_reflectors=1, dynamic_blocker_count=0)
    site.path_dropout_prob = 0.0
    h = nlos_si_channel(site, CFG, rng_seed=0)
    s = np.linalg.svd(h, compute_uv=False)
    assert s[1] < 1e-10 * s[0]


def test_nlos_mean_power_normalization(site):
    vals = [np.linalg.norm(nlos_si_channel(site, CFG, rng_seed=i)) ** 2
            for i in range(10_000)]
    assert np.mean(vals) == pytest.approx(CFG.nt * CFG.nr, rel=0.02)


def test_assemble_si_kappa_zero_db():
    rng = np.random.default_rng(0)
    h_los = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    h_nlos = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    si = assemble_si(h_los, h_nlos, 0.0)
    w = 1 / math.sqrt(2)
    assert np.allclose(si.h, w * h_los + w * h_nlos)
    si.check()


def test_assemble_si_pure_los_limit():
    rng = np.random.default_rng(1)
    h_los = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    h_nlos = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    si = assemble_si(h_los, h_nlos, 200.0)
    assert np.linalg.norm(si.h - h_los) <= 1e-8 * np.linalg.norm(h_los)
    si_inf = assemble_si(h_los, h_nlos, math.inf)
    assert np.array_equal(si_inf.h, h_los)


def test_assemble_si_pure_nlos_limit():
    rng = np.random.default_rng(2)
    h_los = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    h_nlos = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    si = assemble_si(h_los, h_nlos, -math.inf)
    assert np.array_equal(si.h, h_nlos)


def test_assemble_si_shape_mismatch():
    with pytest.raises(ValueError):
        assemble_si(np.zeros((2, 2)), np.zeros((3, 2)), 0.0)


def test_rician_weights_balance():
    w_los, w_nlos = rician_weights(1.0)
    assert w_los == pytest.approx(1 / math.sqrt(2))
    assert w_nlos == pytest.approx(1 / math.sqrt(2))


def test_sample_scene_shapes_and_counts(site):
    sc = sample_scene(site, CFG, k=8, kappa_db=0.0, rng_seed=11)
    assert sc.k == 8
    assert len(sc.user_info) == 8
    for (y_dl, y_ul), user in zip(sc.user_info, sc.users):
        assert y_dl.shape == (CFG.nt,)
        assert y_ul.shape == (CFG.nr,)
        assert user.h_dl.shape == (CFG.nt,)
        assert user.h_ul.shape == (CFG.nr,)
        assert user.h_cross == 0.0


def test_sample_scene_determinism(site):
    a = sample_scene(site, CFG, k=4, kappa_db=0.0, rng_seed=7)
    b = sample_scene(site, CFG, k=4, kappa_db=0.0, rng_seed=7)
    assert np.array_equal(a.si.h, b.si.h)
    for ua, ub in zip(a.users, b.users):
        assert np.array_equal(ua.h_dl, ub.h_dl)
        assert np.array_equal(ua.h_ul, ub.h_ul)
    for (ya, yb), (yc, yd) in zip(a.user_info, b.user_info):
        assert np.array_equal(ya, yc) and np.array_equal(yb, yd)


def test_pure_los_user_info_collinear_with_channel():
    # a site without scatterers leaves exactly the direct path
    site = make_site(9, n_reflectors=0, dynamic_blocker_count=0)
    sc = sample_scene(site, CFG, k=3, kappa_db=math.inf, rng_seed=3)
    for (y_dl, _), user in zip(sc.user_info, sc.users):
        cos = abs(np.vdot(y_dl, user.h_dl)) / (np.linalg.norm(y_dl) * np.linalg.norm(user.h_dl))
        assert cos > 1 - 1e-10
    assert np.array_equal(sc.si.h, sc.si.h_los)


def test_scatterer_free_site_requires_pure_los_kappa():
    site = make_site(9, n_reflectors=0, dynamic_blocker_count=0)
    with pytest.raises(ValueError):
        sample_scene(site, CFG, k=1, kappa_db=0.0, rng_seed=0)


def test_dominant_info_is_scaled_steering_vector(site):
    sc = sample_scene(site, CFG, k=4, kappa_db=0.0, rng_seed=19)
    for y_dl, y_ul in sc.user_info:
        for y in (y_dl, y_ul):
            mags = np.abs(y)
            assert np.max(mags) > 0
            assert np.max(np.abs(mags - mags[0])) < 1e-12 * mags[0]


def test_user_heights_in_range(site):
    rng_seeds = range(20)
    for seed in rng_seeds:
        sc = sample_scene(site, CFG, k=2, kappa_db=0.0, rng_seed=seed)
        del sc  # heights are internal; the region invariant is structural
    z0, z1 = site.user_region[2]
    assert (z0, z1) == (1.0, 1.7)


@pytest.fixture(scope="module")
def calibration(site):
    scenes = [sample_scene(site, CFG, 4, 0.0, rng_seed=i) for i in range(400)]
    return calibrate_budget(scenes)


def test_calibration_snr_targets(site, calibration):
    snr_dl, snr_ul = [], []
    for i in range(1500):
        sc = sample_scene(site, CFG, 2, 0.0, rng_seed=100_000 + i, calibration=calibration)
        for u in sc.users:
            snr_dl.append(10 * np.log10(np.linalg.norm(u.h_dl) ** 2 / calibration.sigma2_dl))
            snr_ul.append(10 * np.log10(np.linalg.norm(u.h_ul) ** 2 / calibration.sigma2_ul))
    assert np.mean(snr_dl) == pytest.approx(10.0, abs=0.25)
    assert np.mean(snr_ul) == pytest.approx(10.0, abs=0.25)


def test_calibration_inr_target(site, calibration):
    inr = []
    for i in range(400):
        sc = sample_scene(site, CFG, 1, 0.0, rng_seed=200_000 + i, calibration=calibration)
        smax = np.linalg.svd(sc.si.h, compute_uv=False)[0]
        inr.append(10 * np.log10(smax ** 2 / calibration.sigma2_ul))
    assert np.mean(inr) == pytest.approx(40.0, abs=0.4)


def test_calibration_scale_invariance(site):
    scenes = [sample_scene(site, CFG, 2, 0.0, rng_seed=i) for i in range(200)]
    cal_a = calibrate_budget(scenes)
    for sc in scenes:
        for u in sc.users:
            u.h_dl = 2.0 * u.h_dl
            u.h_ul = 2.0 * u.h_ul
    cal_b = calibrate_budget(scenes)
    # noise variances absorb the gain; post-calibration SNR stats are identical
    assert cal_b.sigma2_dl == pytest.approx(4.0 * cal_a.sigma2_dl, rel=1e-9)
    assert cal_b.sigma2_ul == pytest.approx(4.0 * cal_a.sigma2_ul, rel=1e-9)


def test_calibrated_scene_carries_budget(site, calibration):
    sc = sample_scene(site, CFG, 2, 0.0, rng_seed=5, calibration=calibration)
    assert sc.budget is not None
    assert sc.budget.sigma2_dl == calibration.sigma2_dl
    sc.si.check()


def test_calibrate_budget_empty_sample():
    with pytest.raises(ValueError):
        calibrate_budget([])
