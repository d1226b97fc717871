"""Self-interference measurement model and transmit-beam normalization.

A probing measurement couples one transmit beam through the SI channel into
one receive beam, plus combined receiver noise. Receive probing beams are
used as given (only transmit beams carry a power constraint).
"""

import math
from dataclasses import dataclass

import numpy as np

from .channels import LinkBudget, SIChannel
from .metrics import POWER_TOL

#: linear INR target used to condition measurements to O(1) model inputs
Z_CONDITIONING_INR = 1e4


def normalize_tx_beam(f_raw: np.ndarray) -> np.ndarray:
    """Scale a transmit beam by its maximum entry magnitude.

    The result meets the per-antenna power constraint with max-magnitude
    exactly 1. Invariant under positive rescaling of the input.
    """
    peak = np.max(np.abs(f_raw))
    if peak == 0:
        raise ValueError("cannot normalize an all-zero transmit beam")
    return f_raw / peak


@dataclass
class ProbingCodebooks:
    """Stacked transmit/receive probing beams, shapes (nt, M) and (nr, M)."""

    f_cb: np.ndarray
    w_cb: np.ndarray

    def __post_init__(self):
        if self.f_cb.ndim != 2 or self.w_cb.ndim != 2:
            raise ValueError("codebooks must be 2-D (elements x M)")
        if self.f_cb.shape[1] != self.w_cb.shape[1]:
            raise ValueError("transmit and receive codebooks must have equal M")
        if self.f_cb.size and np.max(np.abs(self.f_cb)) > 1.0 + POWER_TOL:
            raise ValueError("a transmit probing beam violates the per-antenna constraint")

    @property
    def m(self) -> int:
        return self.f_cb.shape[1]


@dataclass
class MeasurementRecord:
    """The M probing measurements plus provenance.

    ``scale_applied`` is the input-conditioning divisor the policy model
    applies to z before ingesting it (z itself is stored raw).
    """

    z: np.ndarray
    noise_seed: int
    scale_applied: float = 1.0

    def __post_init__(self):
        self.z = np.asarray(self.z)
        if self.z.ndim != 1:
            raise ValueError("z must be a vector of length M")


def conditioning_scale(budget: LinkBudget) -> float:
    """Divisor bringing measurements to O(1): sqrt(sigma2_ul * INR bound)."""
    return math.sqrt(budget.sigma2_ul * Z_CONDITIONING_INR)


def measure(
    cb: ProbingCodebooks,
    si: SIChannel,
    budget: LinkBudget,
    noise_seed: int,
    include_noise: bool = True,
) -> MeasurementRecord:
    """Collect the M self-interference measurements.

    z_m = sqrt(P_DL/Nt) * w_m^H H f_m + w_m^H n_m with n_m i.i.d.
    circularly-symmetric complex Gaussian of covariance sigma2_ul * I,
    evaluated in vectorized diagonal form. Deterministic given noise_seed.
    """
    nr, nt = si.h.shape
    if cb.f_cb.shape[0] != nt or cb.w_cb.shape[0] != nr:
        raise ValueError(
            f"codebook shapes {cb.f_cb.shape}/{cb.w_cb.shape} do not match SI channel {si.h.shape}"
        )
    z = math.sqrt(budget.p_dl / nt) * np.einsum(
        "rm,rt,tm->m", cb.w_cb.conj(), si.h, cb.f_cb, optimize=True
    )
    if include_noise:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=int(noise_seed), spawn_key=(3,)))
        n = rng.standard_normal((nr, cb.m)) + 1j * rng.standard_normal((nr, cb.m))
        n *= math.sqrt(budget.sigma2_ul / 2.0)
        z = z + np.einsum("rm,rm->m", cb.w_cb.conj(), n)
    return MeasurementRecord(z=z, noise_seed=int(noise_seed), scale_applied=conditioning_scale(budget))
