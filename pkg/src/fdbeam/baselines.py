"""Classical references: LMMSE per-pair estimation and CSI best-case bounds.

The LMMSE baseline transmits with MRT from partial knowledge, scans an
Nr-point DFT codebook to estimate the effective SI vector H f, and combines
with the SINR-maximizing receive beam against that estimate. The Vector and
Matrix CSI bounds assume capacity attainment after Nr (per pair) or Nt*Nr
(total) measurements and are evaluated analytically, never simulated.
"""

import math
from dataclasses import dataclass

import numpy as np

from .arrays import dft_codebook
from .channels import LinkBudget, SceneRealization
from .metrics import BeamPair
from .probing import ProbingCodebooks, measure
from . import probing


@dataclass
class BaselineResult:
    """Outcome of one baseline invocation."""

    beams: list | None
    measurements_used: int
    nsse_assumed: float | None = None


def mrt_beam(y_dl: np.ndarray) -> np.ndarray:
    """Maximum-ratio transmit beam from partial knowledge, max-magnitude 1.

    Matched to the channel under the h^H f convention (the conjugation
    lives in the inner product), so the beam is y itself rescaled.
    """
    if np.max(np.abs(y_dl)) == 0:
        raise ValueError("cannot form an MRT beam from an all-zero channel")
    return probing.normalize_tx_beam(y_dl)


def lmmse_estimate(z: np.ndarray, codebook: np.ndarray, budget: LinkBudget,
                   nt: int, rho: float) -> np.ndarray:
    """LMMSE estimate of the effective SI vector from a DFT scan.

    Measurement model: z = sqrt(P_DL/Nt) * G^H h + diag-combined noise with
    per-measurement variance sigma2_ul * Nr (unit-modulus columns). The
    prior is zero-mean with isotropic covariance rho * I, which collapses
    the estimator to a scaled G z thanks to G G^H = Nr I.
    """
    nr = codebook.shape[0]
    a = math.sqrt(budget.p_dl / nt)
    gain = rho * a / (nr * (rho * a * a + budget.sigma2_ul))
    return gain * (codebook @ z)


def interference_aware_combiner(h_si_est: np.ndarray, y_ul: np.ndarray,
                                budget: LinkBudget, nt: int) -> np.ndarray:
    """Uplink-SINR-maximizing combiner against an estimated interferer.

    w = (P_DL/Nt * h h^H + sigma2_ul I)^-1 y_ul; with an exact h this is
    the argmax of the generalized Rayleigh quotient behind the uplink SINR.
    """
    nr = h_si_est.shape[0]
    cov = (budget.p_dl / nt) * np.outer(h_si_est, h_si_est.conj())
    cov[np.diag_indices(nr)] += budget.sigma2_ul
    return np.linalg.solve(cov, y_ul)


def lmmse_baseline(
    scene: SceneRealization,
    pair_index: int,
    rng_seed: int,
    rho: float,
    rx_shape: tuple | None = None,
    include_noise: bool = True,
) -> BaselineResult:
    """Run the LMMSE baseline for one user pair; costs Nr measurements."""
    if not 0 <= pair_index < scene.k:
        raise IndexError(f"pair_index {pair_index} out of range for K={scene.k}")
    y_dl, y_ul = scene.user_info[pair_index]
    nr, nt = scene.si.h.shape
    f = mrt_beam(y_dl)
    codebook = dft_codebook(nr, rx_shape if rx_shape is not None else (nr, 1))
    cb = ProbingCodebooks(f_cb=np.tile(f[:, None], (1, nr)), w_cb=codebook)
    rec = measure(cb, scene.si, scene.budget,
                  noise_seed=int(rng_seed) * 1009 + pair_index,
                  include_noise=include_noise)
    h_est = lmmse_estimate(rec.z, codebook, scene.budget, nt, rho)
    w = interference_aware_combiner(h_est, y_ul, scene.budget, nt)
    return BaselineResult(beams=[BeamPair(f=f, w=w)], measurements_used=nr)


def mrt_mrc_beams(scene: SceneRealization) -> BaselineResult:
    """SI-unaware reference: MRT transmit, MRC receive, zero measurements."""
    beams = [
        BeamPair(f=mrt_beam(y_dl), w=y_ul.copy())
        for y_dl, y_ul in scene.user_info
    ]
    return BaselineResult(beams=beams, measurements_used=0)


def csi_bounds(k: int, l: int, m_unused: int, nt: int, nr: int) -> tuple[float, float]:
    """Effective-nsse ceilings of explicit estimation: (vector, matrix).

    Vector CSI re-estimates H f per pair (K*Nr measurements); Matrix CSI
    estimates all of H once (Nt*Nr measurements). Both assume the capacity
    is then attained, so raw nsse is 1.
    """
    if min(k, l, nt, nr) <= 0:
        raise ValueError("k, l, nt, nr must be positive")
    kl = k * l
    return kl / (k * nr + kl), kl / (nt * nr + kl)
