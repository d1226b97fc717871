import math

import numpy as np
import pytest
import scipy.linalg

from fdbeam.arrays import ArrayConfig, dft_codebook, steering_vector
from fdbeam.baselines import (
    csi_bounds,
    interference_aware_combiner,
    lmmse_baseline,
    lmmse_estimate,
    mrt_beam,
    mrt_mrc_beams,
)
from fdbeam.channels import (
    LinkBudget,
    SceneRealization,
    SIChannel,
    UserPairChannel,
    calibrate_budget,
    make_site,
    sample_scene,
)
from fdbeam.metrics import link_report

CFG = ArrayConfig()


def test_mrt_on_steering_vector_maximizes_gain():
    a = steering_vector(CFG, "tx", 0.4, -0.1)
    y = 0.3j * a  # dominant-path info: scaled steering vector
    f = mrt_beam(y)
    h = 0.3j * a  # pure-LOS channel equals the partial knowledge
    gain = abs(np.vdot(h, f))
    # any unit-modulus beam is bounded by ||h||_1 = sum |h_i|, achieved here
    assert gain == pytest.approx(np.sum(np.abs(h)), rel=1e-12)


def test_mrt_single_element():
    y = np.zeros(4, complex)
    y[0] = 2.0
    f = mrt_beam(y)
    assert np.array_equal(f, [1.0, 0, 0, 0])


def test_mrt_max_magnitude_one():
    rng = np.random.default_rng(0)
    for _ in range(20):
        y = rng.standard_normal(8) + 1j * rng.standard_normal(8)
        assert np.max(np.abs(mrt_beam(y))) == pytest.approx(1.0, abs=1e-15)


def test_mrt_rejects_zero():
    with pytest.raises(ValueError):
        mrt_beam(np.zeros(4, complex))


@pytest.fixture(scope="module")
def scene_and_cal():
    site = make_site(2)
    raw = [sample_scene(site, CFG, 4, 0.0, rng_seed=i) for i in range(300)]
    cal = calibrate_budget(raw)
    scene = sample_scene(site, CFG, 4, 0.0, rng_seed=9999, calibration=cal)
    return scene, cal


def test_lmmse_noiseless_scan_recovers_effective_channel(scene_and_cal):
    scene, cal = scene_and_cal
    rho = cal.rho_for(0.0)
    for j in range(scene.k):
        y_dl, _ = scene.user_info[j]
        f = mrt_beam(y_dl)
        h_eff = scene.si.h @ f
        codebook = dft_codebook(CFG.nr, CFG.rx_shape)
        z = math.sqrt(scene.budget.p_dl / CFG.nt) * (codebook.conj().T @ h_eff)
        # direct inversion oracle: with no noise the scan determines h exactly
        budget0 = LinkBudget(scene.budget.p_dl, scene.budget.p_ul,
                             scene.budget.sigma2_dl, scene.budget.sigma2_ul)
        h_direct = np.linalg.solve(
            math.sqrt(budget0.p_dl / CFG.nt) * codebook.conj().T, z)
        assert np.linalg.norm(h_direct - h_eff) < 1e-9 * np.linalg.norm(h_eff)
        # lmmse with sigma2 -> 0 converges to the same point
        tiny = LinkBudget(budget0.p_dl, budget0.p_ul, budget0.sigma2_dl, 1e-30)
        h_est = lmmse_estimate(z, codebook, tiny, CFG.nt, rho)
        assert np.linalg.norm(h_est - h_eff) < 1e-9 * np.linalg.norm(h_eff)


def test_lmmse_estimate_consistency_as_noise_vanishes(scene_and_cal):
    scene, cal = scene_and_cal
    rho = cal.rho_for(0.0)
    y_dl, _ = scene.user_info[0]
    f = mrt_beam(y_dl)
    h_eff = scene.si.h @ f
    codebook = dft_codebook(CFG.nr, CFG.rx_shape)
    a2 = scene.budget.p_dl / CFG.nt
    errs = []
    # the prior-induced bias scales as sigma2/(rho*a^2): shrink it to zero
    for frac in (1e-2, 1e-4, 1e-8):
        budget = LinkBudget(scene.budget.p_dl, 1.0, 1.0, rho * a2 * frac)
        z = math.sqrt(budget.p_dl / CFG.nt) * (codebook.conj().T @ h_eff)
        h_est = lmmse_estimate(z, codebook, budget, CFG.nt, rho)
        errs.append(np.linalg.norm(h_est - h_eff) / np.linalg.norm(h_eff))
    assert errs[0] > errs[1] > errs[2]
    assert errs[-1] < 1e-6


def test_combiner_matches_generalized_eigen_oracle():
    rng = np.random.default_rng(1)
    budget = LinkBudget(1.0, 1.0, 1.0, 0.4)
    for _ in range(50):
        nr, nt = 8, 8
        h_ul = rng.standard_normal(nr) + 1j * rng.standard_normal(nr)
        h_si = rng.standard_normal(nr) + 1j * rng.standard_normal(nr)
        w = interference_aware_combiner(h_si, h_ul, budget, nt)
        num = budget.p_ul * abs(np.vdot(w, h_ul)) ** 2
        den = (np.linalg.norm(w) ** 2 * budget.sigma2_ul
               + budget.p_dl / nt * abs(np.vdot(w, h_si)) ** 2)
        achieved = num / den
        a = budget.p_ul * np.outer(h_ul, h_ul.conj())
        b = budget.sigma2_ul * np.eye(nr) + budget.p_dl / nt * np.outer(h_si, h_si.conj())
        best = float(np.max(scipy.linalg.eigh(a, b, eigvals_only=True)))
        assert achieved == pytest.approx(best, rel=1e-6)


def test_lmmse_combiner_beats_mrc_with_exact_estimate():
    rng = np.random.default_rng(2)
    nt = nr = 8
    budget = LinkBudget(1.0, 1.0, 1.0, 0.2)
    for _ in range(100):
        h_ul = rng.standard_normal(nr) + 1j * rng.standard_normal(nr)
        h_si = rng.standard_normal(nr) + 1j * rng.standard_normal(nr)

        def sinr(w):
            num = budget.p_ul * abs(np.vdot(w, h_ul)) ** 2
            den = (np.linalg.norm(w) ** 2 * budget.sigma2_ul
                   + budget.p_dl / nt * abs(np.vdot(w, h_si)) ** 2)
            return num / den

        w_opt = interference_aware_combiner(h_si, h_ul, budget, nt)
        assert sinr(w_opt) >= sinr(h_ul) * (1 - 1e-12)


def test_lmmse_baseline_measurement_count(scene_and_cal):
    scene, cal = scene_and_cal
    res = lmmse_baseline(scene, 0, rng_seed=0, rho=cal.rho_for(0.0), rx_shape=CFG.rx_shape)
    assert res.measurements_used == CFG.nr == 16
    # K pairs cost K * Nr in total
    total = sum(
        lmmse_baseline(scene, j, rng_seed=j, rho=cal.rho_for(0.0)).measurements_used
        for j in range(scene.k)
    )
    assert total == scene.k * CFG.nr


def test_lmmse_baseline_reduces_interference(scene_and_cal):
    scene, cal = scene_and_cal
    better = 0
    for j in range(scene.k):
        res = lmmse_baseline(scene, j, rng_seed=j, rho=cal.rho_for(0.0), rx_shape=CFG.rx_shape)
        rep = link_report(res.beams[0], scene.users[j], scene.si, scene.budget)
        mm = mrt_mrc_beams(scene).beams[j]
        rep_mm = link_report(mm, scene.users[j], scene.si, scene.budget)
        if rep.inr_ul < rep_mm.inr_ul:
            better += 1
    assert better >= scene.k - 1


def test_lmmse_pair_index_bounds(scene_and_cal):
    scene, cal = scene_and_cal
    with pytest.raises(IndexError):
        lmmse_baseline(scene, scene.k, rng_seed=0, rho=1.0)


def test_csi_bounds_reference_values():
    vec, mat = csi_bounds(8, 56, 0, 16, 16)
    assert vec == pytest.approx(448 / 576, abs=1e-12)
    assert mat == pytest.approx(448 / 704, abs=1e-12)


def test_csi_bounds_limit_large_l():
    vec, mat = csi_bounds(8, 10**9, 0, 16, 16)
    assert vec == pytest.approx(1.0, abs=1e-5)
    assert mat == pytest.approx(1.0, abs=1e-5)


def test_csi_bounds_ordering():
    # vector >= matrix iff K*Nr <= Nt*Nr, i.e. K <= Nt
    vec, mat = csi_bounds(8, 56, 0, 16, 16)
    assert vec >= mat
    vec2, mat2 = csi_bounds(32, 56, 0, 16, 16)
    assert vec2 < mat2
    vec3, mat3 = csi_bounds(16, 56, 0, 16, 16)
    assert vec3 == pytest.approx(mat3, abs=1e-15)


def test_csi_bounds_k_vs_nt_crossover():
    k_small, _ = csi_bounds(4, 56, 0, 16, 16)
    k_large, mat_large = csi_bounds(64, 56, 0, 16, 16)
    # with K=64 > Nt=16, per-pair estimation costs more than full-matrix
    assert k_large < mat_large


def test_mrt_mrc_zero_measurements(scene_and_cal):
    scene, _ = scene_and_cal
    res = mrt_mrc_beams(scene)
    assert res.measurements_used == 0
    assert len(res.beams) == scene.k
