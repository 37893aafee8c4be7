"""Geometry, devices, subcarriers and materials for a multi-BS sensing scene.

Conventions
-----------
* Lengths in meters, frequencies in Hz, conductivity in S/m, angles in radians.
* Grid index ``m = row * n_side + col``.  Column 0 is the left edge (smallest
  x) and row 0 the top edge (largest y), so ``values.reshape(n_side, n_side)``
  is an image with the usual orientation.
* Array angles are measured from the array boresight, positive towards the
  array axis.  Element ``i`` of an ``N``-element ULA sits at
  ``center - (i - (N - 1) / 2) * d * axis``, which makes the far-field response
  to a source at angle ``theta`` proportional to ``steering_vector(theta)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
EPS0 = 8.8541878128e-12


@dataclass(frozen=True)
class GridRegion:
    """Square region ``center ± half_extent`` sampled on an ``n_side`` lattice."""

    center: tuple[float, float]
    half_extent: float
    n_side: int

    def __post_init__(self):
        if self.half_extent <= 0:
            raise ValueError("half_extent must be positive")
        if self.n_side < 1:
            raise ValueError("n_side must be >= 1")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    @property
    def M(self) -> int:
        return self.n_side * self.n_side

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_extent / self.n_side

    @property
    def cell_area(self) -> float:
        return self.spacing**2

    @property
    def points(self) -> np.ndarray:
        """(M, 2) sampling-point coordinates in grid-index order."""
        offs = -self.half_extent + (np.arange(self.n_side) + 0.5) * self.spacing
        cx, cy = self.center
        col, row = np.meshgrid(np.arange(self.n_side), np.arange(self.n_side))
        x = cx + offs[col.ravel()]
        y = cy - offs[row.ravel()]
        return np.column_stack([x, y])

    @property
    def corners(self) -> np.ndarray:
        cx, cy = self.center
        h = self.half_extent
        return np.array([[cx - h, cy - h], [cx + h, cy - h], [cx + h, cy + h], [cx - h, cy + h]])

    def contains(self, xy) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        d = np.abs(xy - np.asarray(self.center))
        return np.all(d <= self.half_extent, axis=-1)


@dataclass(frozen=True)
class MaterialSpec:
    name: str
    eps_r: float
    sigma: float

    def __post_init__(self):
        if self.eps_r < 1:
            raise ValueError(f"{self.name}: eps_r must be >= 1")
        if self.sigma < 0:
            raise ValueError(f"{self.name}: sigma must be >= 0")


AIR = MaterialSpec("air", 1.0, 0.0)


@dataclass(frozen=True)
class TargetMap:
    """Per-pixel material labels; label 0 is air, label ``j > 0`` is ``material_db[j - 1]``."""

    labels: np.ndarray
    material_db: tuple[MaterialSpec, ...]

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int).ravel()
        if labels.min(initial=0) < 0 or labels.max(initial=0) > len(self.material_db):
            raise ValueError("label out of range of the material database")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "material_db", tuple(self.material_db))

    @property
    def eps_r(self) -> np.ndarray:
        table = np.array([1.0] + [m.eps_r for m in self.material_db])
        return table[self.labels]

    @property
    def sigma(self) -> np.ndarray:
        table = np.array([0.0] + [m.sigma for m in self.material_db])
        return table[self.labels]

    @property
    def target_mask(self) -> np.ndarray:
        return self.labels > 0

    def property_vector(self, omega_c: float) -> np.ndarray:
        """Stacked ``[eps_r - 1, sigma / (omega_c * eps0)]``."""
        return np.concatenate([self.eps_r - 1.0, self.sigma / (omega_c * EPS0)])


def _ula_positions(center, n, spacing, axis_angle) -> np.ndarray:
    axis = np.array([np.cos(axis_angle), np.sin(axis_angle)])
    idx = np.arange(n) - (n - 1) / 2.0
    return np.asarray(center, dtype=float)[None, :] - idx[:, None] * spacing * axis[None, :]


def facing_angle(position, target=(0.0, 0.0)) -> float:
    """Boresight angle of an array at ``position`` pointing at ``target``."""
    d = np.asarray(target, dtype=float) - np.asarray(position, dtype=float)
    return float(np.arctan2(d[1], d[0]))


@dataclass(frozen=True)
class UEConfig:
    position: tuple[float, float]
    n_t: int
    antenna_spacing: float
    power_budget: float
    min_region_power: float = 0.0
    orientation: float = 0.0  # boresight angle

    def __post_init__(self):
        if self.n_t < 1:
            raise ValueError("n_t must be >= 1")
        if self.power_budget <= 0:
            raise ValueError("power_budget must be positive")
        if self.min_region_power < 0:
            raise ValueError("min_region_power must be >= 0")

    @property
    def antenna_positions(self) -> np.ndarray:
        return _ula_positions(self.position, self.n_t, self.antenna_spacing, self.orientation + np.pi / 2)


@dataclass(frozen=True)
class BSConfig:
    position: tuple[float, float]
    n_r: int
    antenna_spacing: float
    orientation: float  # boresight angle; array axis is orientation + pi/2

    def __post_init__(self):
        if self.n_r < 1:
            raise ValueError("n_r must be >= 1")

    @property
    def antenna_positions(self) -> np.ndarray:
        return _ula_positions(self.position, self.n_r, self.antenna_spacing, self.orientation + np.pi / 2)

    def arrival_angle(self, xy) -> np.ndarray:
        """Angle(s) from boresight under which point(s) ``xy`` are seen."""
        d = np.atleast_2d(np.asarray(xy, dtype=float)) - np.asarray(self.position)
        bore = np.array([np.cos(self.orientation), np.sin(self.orientation)])
        axis = np.array([-bore[1], bore[0]])
        return np.arctan2(d @ axis, d @ bore)


@dataclass(frozen=True)
class SubcarrierGrid:
    """OFDM comb centered on ``f_c``: ``f_k = f_c + (k - (K + 1) / 2) * delta_f`` for k = 1..K."""

    f_c: float
    delta_f: float
    K: int

    def __post_init__(self):
        if self.K < 1 or self.f_c <= 0 or self.delta_f < 0:
            raise ValueError("invalid subcarrier grid")
        if self.frequencies.min() <= 0:
            raise ValueError("subcarrier frequencies must be positive")

    @property
    def frequencies(self) -> np.ndarray:
        k = np.arange(1, self.K + 1)
        return self.f_c + (k - (self.K + 1) / 2.0) * self.delta_f

    @property
    def omegas(self) -> np.ndarray:
        return 2 * np.pi * self.frequencies

    @property
    def wavenumbers(self) -> np.ndarray:
        return self.omegas / SPEED_OF_LIGHT

    @property
    def wavelengths(self) -> np.ndarray:
        return SPEED_OF_LIGHT / self.frequencies

    @property
    def omega_c(self) -> float:
        return 2 * np.pi * self.f_c


def steering_vector(theta, n_r: int, wavelength: float, spacing: float) -> np.ndarray:
    """Unit-norm ULA response; a 1-D ``theta`` gives one row per angle."""
    if n_r < 1 or wavelength <= 0:
        raise ValueError("need n_r >= 1 and wavelength > 0")
    theta = np.asarray(theta, dtype=float)
    i = np.arange(n_r)
    phase = -2j * np.pi / wavelength * spacing * np.multiply.outer(np.sin(theta), i)
    return np.exp(phase) / np.sqrt(n_r)


def angular_spread(bs: BSConfig, region: GridRegion) -> tuple[float, float]:
    """Smallest angle interval containing the four corners of ``region``."""
    if region.contains(bs.position)[0]:
        raise ValueError("BS lies inside the sensing region; angular spread undefined")
    ang = bs.arrival_angle(region.corners)
    return float(ang.min()), float(ang.max())


def receiver_beamformer(bs: BSConfig, region: GridRegion, wavelength: float,
                        n_theta: int | None = None) -> np.ndarray:
    """Average of ``a a^H`` over the angular spread (midpoint rule, 16 * N_r nodes by default)."""
    lo, hi = angular_spread(bs, region)
    if hi - lo <= 0:
        a = steering_vector(lo, bs.n_r, wavelength, bs.antenna_spacing)
        return np.outer(a, a.conj())
    n_theta = n_theta or 16 * bs.n_r
    nodes = lo + (np.arange(n_theta) + 0.5) * (hi - lo) / n_theta
    A = steering_vector(nodes, bs.n_r, wavelength, bs.antenna_spacing)
    P = A.T @ A.conj() / n_theta
    return 0.5 * (P + P.conj().T)


def random_ue_positions(rng: np.random.Generator, count: int, region: GridRegion,
                        radius: float, margin: float = 0.0) -> np.ndarray:
    """Uniform draws in the disk of ``radius`` around the region center, rejecting the region."""
    out = []
    c = np.asarray(region.center)
    while len(out) < count:
        r = radius * np.sqrt(rng.random())
        phi = 2 * np.pi * rng.random()
        p = c + r * np.array([np.cos(phi), np.sin(phi)])
        if np.any(np.abs(p - c) > region.half_extent + margin):
            out.append(p)
    return np.array(out)


@dataclass(frozen=True)
class Scene:
    """Everything the forward model needs, independent of the target."""

    region: GridRegion
    subcarriers: SubcarrierGrid
    ues: tuple[UEConfig, ...]
    bss: tuple[BSConfig, ...]
    n_pilots: int
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "ues", tuple(self.ues))
        object.__setattr__(self, "bss", tuple(self.bss))
        if self.n_pilots < 1:
            raise ValueError("n_pilots must be >= 1")

    @property
    def U(self) -> int:
        return len(self.ues)

    @property
    def L(self) -> int:
        return len(self.bss)

    def with_bss(self, idx: Sequence[int]) -> "Scene":
        return Scene(self.region, self.subcarriers, self.ues, tuple(self.bss[i] for i in idx),
                     self.n_pilots, self.extra)

    def with_subcarriers(self, K: int) -> "Scene":
        sc = SubcarrierGrid(self.subcarriers.f_c, self.subcarriers.delta_f, K)
        return Scene(self.region, sc, self.ues, self.bss, self.n_pilots, self.extra)
