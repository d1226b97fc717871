"""Closed-form link-quality metrics.

SNRs, INRs, SINRs, per-link spectral efficiencies, sum spectral efficiency
(SSE), interference-free sum capacity, and the normalized / overhead-
discounted (effective) SSE. Everything is computed in linear scale; dB only
at I/O boundaries.
"""

import math
from dataclasses import dataclass

import numpy as np

from .channels import LinkBudget, SIChannel, UserPairChannel

#: slack on the per-antenna constraint max|f_i| <= 1
POWER_TOL = 1e-7


def to_db(x):
    return 10.0 * np.log10(x)


def from_db(x):
    return 10.0 ** (np.asarray(x) / 10.0)


@dataclass
class BeamPair:
    """A transmit beam f and receive beam w serving one user pair."""

    f: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        if np.max(np.abs(self.f)) > 1.0 + POWER_TOL:
            raise ValueError("transmit beam violates the per-antenna power constraint")
        if np.linalg.norm(self.w) == 0:
            raise ValueError("receive beam must be nonzero")


@dataclass
class LinkReport:
    """All link metrics of one served pair; ratios linear, SEs in bits/s/Hz."""

    snr_dl: float
    snr_ul: float
    inr_dl: float
    inr_ul: float
    sinr_dl: float
    sinr_ul: float
    se_dl: float
    se_ul: float
    sse: float
    capacity: float
    nsse: float

    _DB_METRICS = ("snr_dl", "snr_ul", "inr_dl", "inr_ul", "sinr_dl", "sinr_ul")

    def rows(self, scene_id, pair_index):
        """(scene_id, pair_index, metric, linear value, dB value or '') rows."""
        for name in ("snr_dl", "snr_ul", "inr_dl", "inr_ul", "sinr_dl", "sinr_ul",
                     "se_dl", "se_ul", "sse", "capacity", "nsse"):
            val = getattr(self, name)
            db = to_db(val) if name in self._DB_METRICS and val > 0 else ""
            yield (scene_id, pair_index, name, val, db)


def capacity(user: UserPairChannel, budget: LinkBudget) -> float:
    """Interference-free sum capacity of one user pair, bits/s/Hz."""
    c_dl = math.log2(1.0 + budget.p_dl * np.linalg.norm(user.h_dl) ** 2 / budget.sigma2_dl)
    c_ul = math.log2(1.0 + budget.p_ul * np.linalg.norm(user.h_ul) ** 2 / budget.sigma2_ul)
    return c_dl + c_ul


def link_report(beams: BeamPair, user: UserPairChannel, si: SIChannel, budget: LinkBudget) -> LinkReport:
    """Evaluate one beam pair against one user pair.

    The receive-beam scale cancels everywhere, and the per-antenna transmit
    constraint caps SNR_DL at its upper bound, so nsse lands in [0, 1];
    this is asserted on every evaluation.
    """
    f, w = np.asarray(beams.f), np.asarray(beams.w)
    nt = f.shape[0]
    w_norm2 = float(np.linalg.norm(w) ** 2)
    if w_norm2 == 0:
        raise ValueError("receive beam must be nonzero")

    snr_dl = budget.p_dl * abs(np.vdot(user.h_dl, f)) ** 2 / (nt * budget.sigma2_dl)
    snr_ul = budget.p_ul * abs(np.vdot(w, user.h_ul)) ** 2 / (w_norm2 * budget.sigma2_ul)
    inr_ul = budget.p_dl * abs(np.vdot(w, si.h @ f)) ** 2 / (nt * w_norm2 * budget.sigma2_ul)
    inr_dl = budget.p_ul * abs(user.h_cross) ** 2 / budget.sigma2_dl

    sinr_dl = snr_dl / (1.0 + inr_dl)
    sinr_ul = snr_ul / (1.0 + inr_ul)
    se_dl = math.log2(1.0 + sinr_dl)
    se_ul = math.log2(1.0 + sinr_ul)
    sse = se_dl + se_ul
    cap = capacity(user, budget)
    nsse = sse / cap

    assert -1e-12 <= nsse <= 1.0 + 1e-9, f"nsse={nsse} escaped [0, 1]"
    nsse = min(max(nsse, 0.0), 1.0)
    return LinkReport(
        snr_dl=snr_dl, snr_ul=snr_ul, inr_dl=inr_dl, inr_ul=inr_ul,
        sinr_dl=sinr_dl, sinr_ul=sinr_ul, se_dl=se_dl, se_ul=se_ul,
        sse=sse, capacity=cap, nsse=nsse,
    )


def effective_nsse(nsse_mean: float, m: int, k: int, l: int) -> float:
    """Discount a mean normalized SSE by the probing overhead KL/(M+KL)."""
    if m < 0 or k < 1 or l < 1:
        raise ValueError("need m >= 0, k >= 1, l >= 1")
    return k * l / (m + k * l) * nsse_mean
