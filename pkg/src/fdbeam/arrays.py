"""Uniform planar array geometry, steering vectors, and DFT codebooks.

Both base-station apertures (transmit and receive) are modeled as uniform
planar arrays lying in the x-z plane with boresight along +y. The receive
aperture is offset horizontally (along x) from the transmit aperture.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

#: Carrier wavelength at 28 GHz, in meters.
DEFAULT_WAVELENGTH = SPEED_OF_LIGHT / 28e9


@dataclass(frozen=True)
class ArrayConfig:
    """Geometry of the transmit and receive apertures.

    Parameters
    ----------
    nt, nr : int
        Number of transmit / receive elements.
    tx_shape, rx_shape : (rows, cols)
        UPA factorization of each aperture; rows*cols must equal the
        element count.
    spacing : float
        Element pitch in wavelengths.
    separation : float
        Horizontal center-to-center distance between the two apertures,
        in wavelengths.
    wavelength : float
        Carrier wavelength in meters.
    """

    nt: int = 16
    nr: int = 16
    tx_shape: tuple[int, int] = (4, 4)
    rx_shape: tuple[int, int] = (4, 4)
    spacing: float = 0.5
    separation: float = 10.0
    wavelength: float = DEFAULT_WAVELENGTH

    def __post_init__(self):
        if self.tx_shape[0] * self.tx_shape[1] != self.nt:
            raise ValueError(f"tx_shape {self.tx_shape} does not factor nt={self.nt}")
        if self.rx_shape[0] * self.rx_shape[1] != self.nr:
            raise ValueError(f"rx_shape {self.rx_shape} does not factor nr={self.nr}")
        if self.spacing <= 0 or self.separation <= 0 or self.wavelength <= 0:
            raise ValueError("spacing, separation and wavelength must be positive")

    def shape(self, which: str) -> tuple[int, int]:
        return self.tx_shape if which == "tx" else self.rx_shape

    def count(self, which: str) -> int:
        return self.nt if which == "tx" else self.nr


def _check_which(which: str) -> None:
    if which not in ("tx", "rx"):
        raise ValueError(f"which must be 'tx' or 'rx', got {which!r}")


def aperture_center(cfg: ArrayConfig, which: str) -> np.ndarray:
    """Center of the requested aperture in meters (tx at the origin)."""
    _check_which(which)
    if which == "tx":
        return np.zeros(3)
    return np.array([cfg.separation * cfg.wavelength, 0.0, 0.0])


@lru_cache(maxsize=128)
def _grid_offsets(cfg: ArrayConfig, which: str) -> np.ndarray:
    rows, cols = cfg.shape(which)
    pitch = cfg.spacing * cfg.wavelength
    x = (np.arange(cols) - (cols - 1) / 2.0) * pitch
    z = (np.arange(rows) - (rows - 1) / 2.0) * pitch
    zz, xx = np.meshgrid(z, x, indexing="ij")
    pos = np.stack([xx.ravel(), np.zeros(rows * cols), zz.ravel()], axis=1)
    pos.setflags(write=False)
    return pos


def element_positions(cfg: ArrayConfig, which: str) -> np.ndarray:
    """Element coordinates of one aperture, shape (n, 3), in meters.

    Elements are laid out row-major on a (rows, cols) grid in the x-z
    plane: columns step along x, rows along z, each aperture centered on
    its own center.
    """
    _check_which(which)
    return _grid_offsets(cfg, which) + aperture_center(cfg, which)


def direction_unit_vector(azimuth: float, elevation: float) -> np.ndarray:
    """Unit propagation direction for (azimuth, elevation) in radians.

    Azimuth is measured in the x-y plane from boresight (+y) toward +x;
    elevation from the x-y plane toward +z.
    """
    caz, saz = np.cos(azimuth), np.sin(azimuth)
    cel, sel = np.cos(elevation), np.sin(elevation)
    return np.array([saz * cel, caz * cel, sel])


def steering_vector(cfg: ArrayConfig, which: str, azimuth: float, elevation: float) -> np.ndarray:
    """Far-field array response of one aperture, shape (n,), unit-modulus.

    Entry phase is the wavenumber dot product of the element offset (from
    the aperture centroid) with the unit direction vector.
    """
    _check_which(which)
    rel = _grid_offsets(cfg, which)  # grid offsets are centroid-relative
    u = direction_unit_vector(azimuth, elevation)
    phase = (2.0 * np.pi / cfg.wavelength) * (rel @ u)
    return np.exp(1j * phase)


def dft_codebook(n: int, shape: tuple[int, int]) -> np.ndarray:
    """n x n DFT codebook matching a (rows, cols) UPA factorization.

    Kronecker product of 1-D DFT matrices; columns are mutually orthogonal
    with unit-modulus entries (Gram matrix n*I).
    """
    rows, cols = shape
    if rows * cols != n:
        raise ValueError(f"shape {shape} does not factor n={n}")

    def dft(k: int) -> np.ndarray:
        j, m = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
        return np.exp(-2j * np.pi * j * m / k)

    return np.kron(dft(rows), dft(cols))
