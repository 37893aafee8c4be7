"""Linearized sensing systems built around the current contrast estimate.

Two representations are provided.  The dense one (``sensing_matrix``,
``realify``, ``stack``) follows the block definitions literally and is what the
small tests check.  ``NormalSystem`` keeps only ``E^T E``, ``E^T z`` and
``z^T z``, which is all the solvers need; it is assembled blockwise from the
Khatri-Rao factors without forming the tall matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .em_forward import ChannelSet, Measurements, total_field


def chi_from_s(s: np.ndarray, omega_k: float, omega_c: float) -> np.ndarray:
    """Contrast at angular frequency ``omega_k`` from the stacked property vector."""
    s = np.asarray(s, dtype=float)
    M = s.size // 2
    return s[:M] + 1j * (omega_c / omega_k) * s[M:]


def khatri_rao(B: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product; column m is ``kron(B[:, m], C[:, m])``."""
    if B.shape[1] != C.shape[1]:
        raise ValueError("Khatri-Rao factors need the same number of columns")
    return (B[:, None, :] * C[None, :, :]).reshape(-1, B.shape[1])


def field_factor(chi: np.ndarray, H1bar: np.ndarray, G: np.ndarray | None) -> np.ndarray:
    """``H1bar^T (I - G diag chi)^-T``, shape (U*I, M).  ``G=None`` means the Born limit."""
    if G is None or not np.any(chi):
        return H1bar.T.copy()
    return total_field(G, chi, H1bar).T


def sensing_matrix(chi: np.ndarray, H1bar: np.ndarray, PH2: np.ndarray, G: np.ndarray) -> np.ndarray:
    return khatri_rao(field_factor(chi, H1bar, G), PH2)


def born_init(H1bar: np.ndarray, PH2: np.ndarray) -> np.ndarray:
    return khatri_rao(H1bar.T, PH2)


@dataclass(frozen=True)
class SensingBlock:
    D: np.ndarray
    E: np.ndarray
    z: np.ndarray


@dataclass(frozen=True)
class StackedSystem:
    E: np.ndarray
    z: np.ndarray


def realify(D: np.ndarray, omega_k: float, omega_c: float, y: np.ndarray | None = None) -> SensingBlock:
    w = omega_c / omega_k
    E = np.block([[D.real, -w * D.imag], [D.imag, w * D.real]])
    if y is None:
        y = np.zeros(D.shape[0], dtype=complex)
    z = np.concatenate([y.real, y.imag])
    return SensingBlock(D, E, z)


def stack(blocks: Sequence[SensingBlock]) -> StackedSystem:
    cols = {b.E.shape[1] for b in blocks}
    if len(cols) != 1:
        raise ValueError(f"mismatched column counts {sorted(cols)}")
    return StackedSystem(np.vstack([b.E for b in blocks]), np.concatenate([b.z for b in blocks]))


@dataclass
class NormalSystem:
    """Least-squares data term ``0.5 ||z - E s||^2`` in normal-equation form."""

    gram: np.ndarray
    rhs: np.ndarray
    zz: float
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_dense(cls, E: np.ndarray, z: np.ndarray) -> "NormalSystem":
        return cls(E.T @ E, E.T @ z, float(z @ z))

    @classmethod
    def zeros(cls, n: int) -> "NormalSystem":
        return cls(np.zeros((n, n)), np.zeros(n), 0.0)

    @property
    def n(self) -> int:
        return self.rhs.size

    def add_block(self, B: np.ndarray, C: np.ndarray, y: np.ndarray, w: float):
        """Accumulate the realified block of ``D = B o C`` with weight ``w = omega_c / omega_k``.

        Uses ``D^H D = (B^H B) * (C^H C)`` (elementwise) and
        ``D^H y = sum_i conj(B[i]) * (C^H Y)[:, i]`` with ``Y`` the (N_r, U*I) reshape of ``y``.
        """
        self.cache.clear()
        M = B.shape[1]
        gamma = (B.conj().T @ B) * (C.conj().T @ C)
        Y = y.reshape(C.shape[0], B.shape[0], order="F")
        dy = np.einsum("jm,mj->m", B.conj(), C.conj().T @ Y)
        g = self.gram
        g[:M, :M] += gamma.real
        g[:M, M:] -= w * gamma.imag
        g[M:, :M] += w * gamma.imag
        g[M:, M:] += w * w * gamma.real
        self.rhs[:M] += dy.real
        self.rhs[M:] += w * dy.imag
        self.zz += float(np.vdot(y, y).real)

    def residual_sq(self, s: np.ndarray) -> float:
        """``||z - E s||^2`` (clipped at 0 against round-off)."""
        return max(self.zz - 2 * s @ self.rhs + s @ self.gram @ s, 0.0)

    def scaled(self, c: float) -> "NormalSystem":
        """System for ``(c E, c z)``."""
        return NormalSystem(self.gram * c * c, self.rhs * c * c, self.zz * c * c)


def build_normal_system(channels: ChannelSet, meas: Measurements, pilots: np.ndarray,
                        l_index: int, s: np.ndarray | None = None, born: bool = False,
                        factors: list | None = None) -> NormalSystem:
    """Stacked real system of BS ``l_index`` linearized at ``s``.

    ``factors`` may carry precomputed ``field_factor`` outputs per subcarrier;
    they do not depend on the BS and are shared across BSs.
    """
    scene = channels.scene
    omegas = scene.subcarriers.omegas
    omega_c = scene.subcarriers.omega_c
    M = scene.region.M
    sys_ = NormalSystem.zeros(2 * M)
    for k in range(channels.K):
        if factors is not None:
            B = factors[k]
        else:
            B = linearized_factor(channels, pilots, k, s, born)
        C = channels.beamformed_h2(k, l_index)
        sys_.add_block(B, C, meas.y[k, l_index], omega_c / omegas[k])
    return sys_


def linearized_factor(channels: ChannelSet, pilots: np.ndarray, k: int,
                      s: np.ndarray | None, born: bool = False) -> np.ndarray:
    H1bar = channels.incident(k, pilots)
    if born or s is None or not np.any(s):
        return H1bar.T.copy()
    sc = channels.scene.subcarriers
    chi = chi_from_s(s, sc.omegas[k], sc.omega_c)
    return field_factor(chi, H1bar, channels.greens(k))


def dense_stacked_system(channels: ChannelSet, meas: Measurements, pilots: np.ndarray,
                         l_index: int, s: np.ndarray | None = None, born: bool = False) -> StackedSystem:
    """Literal ``(E~_l, z~_l)``; only for small problems."""
    sc = channels.scene.subcarriers
    blocks = []
    for k in range(channels.K):
        B = linearized_factor(channels, pilots, k, s, born)
        D = khatri_rao(B, channels.beamformed_h2(k, l_index))
        blocks.append(realify(D, sc.omegas[k], sc.omega_c, meas.y[k, l_index]))
    return stack(blocks)
