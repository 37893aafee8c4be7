"""Low-coherence multi-subcarrier pilot design for one UE.

For subcarrier k the UE picks ``W`` (N_t x I) and a scale ``xi`` to minimize

    p(W, xi) = ||W^H H^H H W - xi I||_F^2 + gamma ||A^H H W||_F^2
    s.t.  ||W||_F^2 <= P,   I xi >= P_min

where ``H`` maps antenna weights to the incident field on the grid and ``A``
collects the patterns already designed for lower subcarriers.  Solved by
projected gradient descent on ``dp/dW*`` with Armijo backtracking.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


def pilot_objective(W, xi, H1, A=None, gamma=1.0) -> float:
    HW = H1 @ W
    gram = HW.conj().T @ HW
    first = np.linalg.norm(gram - xi * np.eye(W.shape[1])) ** 2
    if A is None or A.size == 0 or gamma == 0:
        return float(first)
    return float(first + gamma * np.linalg.norm(A.conj().T @ HW) ** 2)


def wirtinger_grad(W, xi, H1, A=None, gamma=1.0) -> np.ndarray:
    """``dp/dW*``; the real gradient w.r.t. (Re W, Im W) is ``2 Re g + 2j Im g``."""
    R = H1.conj().T @ H1
    RW = R @ W
    g = 2.0 * RW @ (W.conj().T @ RW - xi * np.eye(W.shape[1]))
    if A is not None and A.size and gamma:
        AH = A.conj().T @ H1
        g = g + gamma * (AH.conj().T @ (AH @ W))
    return g


def project_power(W: np.ndarray, P: float) -> np.ndarray:
    nrm2 = np.linalg.norm(W) ** 2
    return W if nrm2 <= P else W * np.sqrt(P / nrm2)


def mutual_coherence(X: np.ndarray) -> float:
    """Largest normalized inner product between distinct columns."""
    n = np.linalg.norm(X, axis=0)
    C = np.abs(X.conj().T @ X) / np.outer(n, n)
    np.fill_diagonal(C, 0.0)
    return float(C.max()) if C.size > 1 else 0.0


@dataclass(frozen=True)
class PilotParams:
    gamma: float = 1.0
    armijo_c: float = 1e-4
    armijo_beta: float = 0.5
    step0: float = 1.0
    max_iters: int = 500
    rel_tol: float = 1e-8
    restarts: int = 3
    min_power_fraction: float = 0.5  # floor on region power, relative to a full-power random pilot


@dataclass
class PilotMatrix:
    W: np.ndarray
    xi: float
    objective: float
    history: list = field(default_factory=list, repr=False)
    steps: list = field(default_factory=list, repr=False)  # (p_before, p_after, alpha, ||W+ - W||^2)
    infeasible: bool = False


class _Quadratics:
    """``H^H H`` and ``H^H A A^H H`` precomputed; the objective then lives in N_t dimensions."""

    def __init__(self, H, A, gamma):
        self.R = H.conj().T @ H
        if A is not None and A.size and gamma:
            AH = A.conj().T @ H
            self.C = gamma * (AH.conj().T @ AH)
        else:
            self.C = None

    def first(self, W, xi):
        G = W.conj().T @ self.R @ W
        return float(np.linalg.norm(G - xi * np.eye(W.shape[1])) ** 2)

    def value(self, W, xi):
        v = self.first(W, xi)
        if self.C is not None:
            v += float(np.real(np.sum(W.conj() * (self.C @ W))))
        return v

    def grad(self, W, xi):
        RW = self.R @ W
        g = 2.0 * RW @ (W.conj().T @ RW - xi * np.eye(W.shape[1]))
        if self.C is not None:
            g = g + self.C @ W
        return g

    def region_power(self, W):
        return float(np.real(np.sum(W.conj() * (self.R @ W))))


def _run_pgd(q: _Quadratics, W, P, P_min, I, params: PilotParams) -> PilotMatrix:
    xi = max(P_min / I, q.region_power(W) / I)
    p = q.value(W, xi)
    hist = [p]
    steps = []
    for _ in range(params.max_iters):
        g = q.grad(W, xi)
        alpha = params.step0
        accepted = False
        for _ in range(60):
            W_try = project_power(W - alpha * g, P)
            p_try = q.value(W_try, xi)
            d2 = float(np.linalg.norm(W_try - W) ** 2)
            if p_try <= p - params.armijo_c / alpha * d2:
                accepted = True
                break
            alpha *= params.armijo_beta
        if not accepted or d2 == 0:
            break
        steps.append((p, p_try, alpha, d2))
        W = W_try
        xi = max(P_min / I, q.region_power(W) / I)
        p_new = q.value(W, xi)
        hist.append(p_new)
        done = abs(p - p_new) <= params.rel_tol * max(abs(p), 1e-300)
        p = p_new
        if done:
            break
    return PilotMatrix(W, xi, p, hist, steps)


def pgd_design(H1: np.ndarray, A: np.ndarray | None, P: float, P_min: float, n_pilots: int,
               params: PilotParams = PilotParams(), rng: np.random.Generator | None = None) -> PilotMatrix:
    """Best of ``params.restarts`` projected-gradient runs from random full-power starts.

    The problem is solved in units where ``||H1||_2 = 1`` and ``P = 1``; the
    objective is homogeneous, so results map back exactly.
    """
    if P <= 0 or P_min < 0:
        raise ValueError("need P > 0 and P_min >= 0")
    rng = rng or np.random.default_rng()
    n_t = H1.shape[1]
    h = np.linalg.norm(H1, 2)
    Hn = H1 / h
    An = None if A is None or A.size == 0 else A / (h * np.sqrt(P))
    q = _Quadratics(Hn, An, params.gamma)
    Pmin_n = P_min / (h * h * P)
    # the largest reachable region power is P * ||H1||_2^2, i.e. 1 in these units
    infeasible = Pmin_n > 1.0 + 1e-12
    best = None
    for _ in range(max(params.restarts, 1)):
        W0 = rng.standard_normal((n_t, n_pilots)) + 1j * rng.standard_normal((n_t, n_pilots))
        W0 /= np.linalg.norm(W0)
        res = _run_pgd(q, W0, 1.0, Pmin_n, n_pilots, params)
        if best is None or res.objective < best.objective:
            best = res
    scale = h * h * P
    out = PilotMatrix(best.W * np.sqrt(P), best.xi * scale, best.objective * scale**2,
                      [v * scale**2 for v in best.history],
                      [(a * scale**2, b * scale**2, al / scale, d * P) for a, b, al, d in best.steps],
                      infeasible=infeasible)
    if out.infeasible:
        log.warning("minimum region power looks unreachable under the power budget")
    return out


def region_power_floor(H1: np.ndarray, P: float, P_min: float, params: PilotParams) -> float:
    """Effective minimum region power: the UE's own floor or a fraction of a random full-power pilot's."""
    return max(P_min, params.min_power_fraction * P * np.linalg.norm(H1) ** 2 / H1.shape[1])


def design_all(H1_per_k, P: float, P_min: float, n_pilots: int, params: PilotParams = PilotParams(),
               rng: np.random.Generator | None = None) -> list[PilotMatrix]:
    """Sequential design over subcarriers for one UE; ``A`` grows by I columns per step."""
    rng = rng or np.random.default_rng()
    out = []
    A = None
    for H in H1_per_k:
        floor = region_power_floor(H, P, P_min, params)
        res = pgd_design(H, A, P, floor, n_pilots, params, rng)
        out.append(res)
        pattern = H @ res.W
        A = pattern if A is None else np.concatenate([A, pattern], axis=1)
    return out


def random_pilots(n_t: int, n_pilots: int, P: float, rng: np.random.Generator) -> np.ndarray:
    W = rng.standard_normal((n_t, n_pilots)) + 1j * rng.standard_normal((n_t, n_pilots))
    return W * np.sqrt(P) / np.linalg.norm(W)


def save_pilots(path, pilots: np.ndarray):
    """Text dump: a dimension header, then one row per (k, u, antenna) of I (re, im) pairs."""
    K, U, n_t, I = pilots.shape
    flat = pilots.reshape(K * U * n_t, I)
    pairs = np.empty((flat.shape[0], 2 * I))
    pairs[:, 0::2] = flat.real
    pairs[:, 1::2] = flat.imag
    header = f"emsense-pilots v1\n{K} {U} {n_t} {I}"
    np.savetxt(path, pairs, fmt="%.17g", header=header, comments="# ")


def load_pilots(path) -> np.ndarray:
    with open(path) as fh:
        fh.readline()
        dims = tuple(int(x) for x in fh.readline().lstrip("# ").split())
    pairs = np.loadtxt(path, ndmin=2)
    K, U, n_t, I = dims
    flat = pairs[:, 0::2] + 1j * pairs[:, 1::2]
    return flat.reshape(K, U, n_t, I)
