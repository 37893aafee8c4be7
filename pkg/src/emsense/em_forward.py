"""2D TM scattering model: Green's function, MoM matrix, Lippmann-Schwinger solve,
radiation operators and measurement synthesis.

Time convention is ``exp(+j omega t)``, so outgoing waves use Hankel functions of
the second kind and the free-space kernel is ``-(j/4) H0^(2)(k |r - r'|)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla
from scipy.special import hankel2

from .scene import GridRegion, Scene, UEConfig, BSConfig, receiver_beamformer

COND_LIMIT = 1e12


class SingularSystemError(np.linalg.LinAlgError):
    """The Lippmann-Schwinger system is (numerically) singular for the given contrast."""


def greens_2d(k, r, r_prime):
    """Free-space 2D Helmholtz Green's function between point sets ``r`` and ``r_prime``.

    Broadcasts over leading dimensions; the last axis holds (x, y).
    """
    d = np.linalg.norm(np.asarray(r, dtype=float) - np.asarray(r_prime, dtype=float), axis=-1)
    if np.any(d == 0):
        raise ValueError("coincident points; use greens_self_term for the singular cell")
    return -0.25j * hankel2(0, k * d)


def greens_self_term(k: float, cell_area: float) -> complex:
    """``k^2`` times the integral of the kernel over the cell's equivalent circle.

    With ``a = sqrt(cell_area / pi)`` this is ``-(j/2) [pi k a H1^(2)(k a) - 2j]``.
    """
    a = np.sqrt(cell_area / np.pi)
    return complex(-0.5j * (np.pi * k * a * hankel2(1, k * a) - 2j))


def _offset_indices(n_side: int):
    idx = np.arange(n_side * n_side)
    rows, cols = np.divmod(idx, n_side)
    di = np.abs(rows[:, None] - rows[None, :]).astype(np.intp)
    dj = np.abs(cols[:, None] - cols[None, :]).astype(np.intp)
    return di, dj


def discretize_greens(grid: GridRegion, k: float) -> np.ndarray:
    """MoM matrix of ``k^2 G`` on the grid (pulse basis, point matching).

    The lattice is translation invariant, so the kernel is evaluated once per
    distinct (|drow|, |dcol|) offset and gathered.
    """
    n = grid.n_side
    h = grid.spacing
    oi, oj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    dist = h * np.hypot(oi, oj)
    table = np.empty((n, n), dtype=complex)
    table[0, 0] = greens_self_term(k, grid.cell_area)
    nz = dist > 0
    table[nz] = k * k * grid.cell_area * (-0.25j) * hankel2(0, k * dist[nz])
    di, dj = _offset_indices(n)
    return table[di, dj]


def _factor(A: np.ndarray):
    lu, piv = sla.lu_factor(A, check_finite=False)
    anorm = np.linalg.norm(A, 1)
    gecon = sla.get_lapack_funcs("gecon", (lu,))
    rcond, info = gecon(lu, anorm, norm="1")
    if info != 0 or not np.isfinite(rcond) or rcond < 1.0 / COND_LIMIT:
        raise SingularSystemError(
            f"Lippmann-Schwinger system ill-conditioned (cond ~ {1 / max(rcond, 1e-300):.3g}); "
            "contrast is not physical for this discretization")
    return lu, piv


def ls_operator(G: np.ndarray, chi: np.ndarray) -> np.ndarray:
    """``I - G diag(chi)``."""
    A = -G * np.asarray(chi)[None, :]
    A[np.diag_indices_from(A)] += 1.0
    return A


def total_field(G: np.ndarray, chi: np.ndarray, E_i: np.ndarray) -> np.ndarray:
    """Solve ``(I - G diag chi) E_t = E_i``; ``E_i`` may hold several columns."""
    chi = np.asarray(chi)
    if not np.any(chi):
        return np.array(E_i, dtype=complex, copy=True)
    lu_piv = _factor(ls_operator(G, chi))
    return sla.lu_solve(lu_piv, E_i, check_finite=False)


def contrast_source(chi: np.ndarray, E_t: np.ndarray) -> np.ndarray:
    chi = np.asarray(chi)
    return chi[:, None] * E_t if np.ndim(E_t) == 2 else chi * E_t


def scattering_operator(G: np.ndarray, chi: np.ndarray) -> np.ndarray:
    """Closed-form ``X = diag(chi) (I - G diag chi)^-1`` mapping incident field to contrast source."""
    chi = np.asarray(chi)
    M = len(chi)
    return contrast_source(chi, total_field(G, chi, np.eye(M, dtype=complex)))


def radiation_ue(grid: GridRegion, ue: UEConfig, k: float) -> np.ndarray:
    """(M, N_t) map from UE antenna weights to the incident field on the grid."""
    ant = ue.antenna_positions
    if np.any(grid.contains(ant)):
        raise ValueError("UE antenna inside the sensing region")
    return greens_2d(k, grid.points[:, None, :], ant[None, :, :])


def radiation_bs(grid: GridRegion, bs: BSConfig, k: float) -> np.ndarray:
    """(N_r, M) map from the contrast source to the BS array.

    Carries the ``k^2 * cell_area`` factor of the integral operator, so that
    ``H2 @ J`` is the scattered field radiated by the discretized source.
    """
    ant = bs.antenna_positions
    if np.any(grid.contains(ant)):
        raise ValueError("BS antenna inside the sensing region")
    return k * k * grid.cell_area * greens_2d(k, ant[:, None, :], grid.points[None, :, :])


def forward_channel(H2: np.ndarray, chi: np.ndarray, G: np.ndarray, H1: np.ndarray) -> np.ndarray:
    """Scattering-path channel ``H2 diag(chi) (I - G diag chi)^-1 H1``."""
    chi = np.asarray(chi)
    if not np.any(chi):
        return np.zeros((H2.shape[0], H1.shape[1]), dtype=complex)
    return H2 @ contrast_source(chi, total_field(G, chi, H1))


@dataclass(frozen=True)
class ChannelSet:
    """Per-subcarrier operators of a scene.

    H1: (K, U, M, N_t), H2: (K, L, N_r, M), P: (K, L, N_r, N_r).  Green's
    matrices are rebuilt on demand (cheap) rather than stored.
    """

    scene: Scene
    H1: np.ndarray
    H2: np.ndarray
    P: np.ndarray

    @classmethod
    def build(cls, scene: Scene) -> "ChannelSet":
        grid = scene.region
        ks = scene.subcarriers.wavenumbers
        lams = scene.subcarriers.wavelengths
        H1 = np.stack([np.stack([radiation_ue(grid, ue, k) for ue in scene.ues]) for k in ks])
        H2 = np.stack([np.stack([radiation_bs(grid, bs, k) for bs in scene.bss]) for k in ks])
        P = np.stack([np.stack([receiver_beamformer(bs, grid, lam) for bs in scene.bss]) for lam in lams])
        return cls(scene, H1, H2, P)

    @property
    def K(self) -> int:
        return self.H1.shape[0]

    def greens(self, k_index: int) -> np.ndarray:
        return discretize_greens(self.scene.region, self.scene.subcarriers.wavenumbers[k_index])

    def beamformed_h2(self, k_index: int, l_index: int) -> np.ndarray:
        return self.P[k_index, l_index] @ self.H2[k_index, l_index]

    def incident(self, k_index: int, pilots: np.ndarray) -> np.ndarray:
        """Effective incident fields ``[H1_{k,1} W_{k,1}, ..., H1_{k,U} W_{k,U}]`` (M, U*I)."""
        return np.concatenate([self.H1[k_index, u] @ pilots[k_index, u]
                               for u in range(self.H1.shape[1])], axis=1)

    def subset(self, bs_idx) -> "ChannelSet":
        bs_idx = list(bs_idx)
        return ChannelSet(self.scene.with_bss(bs_idx), self.H1, self.H2[:, bs_idx], self.P[:, bs_idx])

    def with_channels(self, H1=None, H2=None) -> "ChannelSet":
        return replace(self, H1=self.H1 if H1 is None else H1, H2=self.H2 if H2 is None else H2)


@dataclass(frozen=True)
class Measurements:
    """Beamformed pilot observations ``y[k, l]`` of length U*I*N_r.

    Element order is ``vec([Y_{k,l,1}, ..., Y_{k,l,U}])`` (column-major), i.e.
    index ``(u * I + i) * N_r + r``.
    """

    y: np.ndarray
    clean: np.ndarray
    snr_db: float | None
    noise_std: float

    @property
    def empirical_snr_db(self) -> float:
        noise = np.sum(np.abs(self.y - self.clean) ** 2)
        return float(10 * np.log10(np.sum(np.abs(self.clean) ** 2) / noise))

    def subset(self, bs_idx) -> "Measurements":
        bs_idx = list(bs_idx)
        return Measurements(self.y[:, bs_idx], self.clean[:, bs_idx], self.snr_db, self.noise_std)


def check_pilot_power(scene: Scene, pilots: np.ndarray, rtol: float = 1e-9):
    for u, ue in enumerate(scene.ues):
        power = np.sum(np.abs(pilots[:, u]) ** 2, axis=(-2, -1))
        if np.any(power > ue.power_budget * (1 + rtol)):
            raise ValueError(f"UE {u}: pilot power {power.max():.4g} exceeds budget {ue.power_budget:.4g}")


def synthesize_measurements(channels: ChannelSet, s_true: np.ndarray, pilots: np.ndarray,
                            snr_db: float | None, seed: int) -> Measurements:
    """Noiseless beamformed observations plus calibrated, beamformed CSCG noise.

    ``pilots`` has shape (K, U, N_t, I).  White noise ``n`` is drawn per
    (k, l) from a stream derived from ``seed`` and observed as ``P n``; a single
    global scale makes total signal power over total noise power equal
    ``10^(snr_db / 10)``.  ``snr_db=None`` (or inf) disables noise.
    """
    from .sensing import chi_from_s

    scene = channels.scene
    check_pilot_power(scene, pilots)
    omegas = scene.subcarriers.omegas
    omega_c = scene.subcarriers.omega_c
    K, L = channels.K, scene.L
    n_r = channels.H2.shape[2]
    ui = scene.U * scene.n_pilots
    clean = np.zeros((K, L, ui * n_r), dtype=complex)
    noise = np.zeros_like(clean)
    for k in range(K):
        chi = chi_from_s(s_true, omegas[k], omega_c)
        if np.any(chi):
            J = contrast_source(chi, total_field(channels.greens(k), chi, channels.incident(k, pilots)))
        else:
            J = None
        for l in range(L):
            if J is not None:
                clean[k, l] = (channels.P[k, l] @ (channels.H2[k, l] @ J)).ravel(order="F")
            rng = np.random.default_rng([seed, k, l])
            w = (rng.standard_normal((n_r, ui)) + 1j * rng.standard_normal((n_r, ui))) / np.sqrt(2)
            noise[k, l] = (channels.P[k, l] @ w).ravel(order="F")
    if snr_db is None or not np.isfinite(snr_db):
        return Measurements(clean, clean.copy(), None, 0.0)
    p_sig = np.sum(np.abs(clean) ** 2)
    p_noise = np.sum(np.abs(noise) ** 2)
    scale = np.sqrt(p_sig / 10 ** (snr_db / 10) / p_noise) if p_sig > 0 else 0.0
    return Measurements(clean + scale * noise, clean, float(snr_db), float(scale))
