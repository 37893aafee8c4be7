"""Per-BS proximal agent for the nonnegative mixed l(1,2) reconstruction problem.

The agent evaluates

    F(s) = argmin_{v >= 0}  ||v - s||^2 / (2 sigma2 zeta) + 0.5 ||z - E v||^2 + lam ||v||_{1,2}

by ADMM on the splitting ``v = a``: ``v`` carries the quadratic data term (a
linear solve against the cached inverse of ``E^T E + I / eta``), ``a`` carries
the group penalty, the nonnegativity constraint and the proximity term.
Groups pair entry ``m`` (permittivity part) with entry ``m + M`` (conductivity
part).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .sensing import NormalSystem

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProxParams:
    lam: float
    zeta: float = 1.0
    sigma2: float = 1.0
    eta: float = 1.0
    tol: float = 1e-8
    max_iters: int = 2000
    threshold: str = "exact"  # "exact" nonnegative group prox, or "shrink_first": shrink, then clamp

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0 < self.zeta <= 1:
            raise ValueError("zeta must lie in (0, 1]")
        if self.sigma2 <= 0 or self.eta <= 0:
            raise ValueError("sigma2 and eta must be positive")
        if self.threshold not in ("exact", "shrink_first"):
            raise ValueError("threshold must be 'exact' or 'shrink_first'")

    @property
    def prox_weight(self) -> float:
        """``1 / (sigma2 * zeta)``; 0 when sigma2 is infinite (plain MAP solve)."""
        return 0.0 if np.isinf(self.sigma2) else 1.0 / (self.sigma2 * self.zeta)


def group_norms(s: np.ndarray) -> np.ndarray:
    M = s.size // 2
    return np.hypot(s[:M], s[M:])


def map_cost(E, z, s, lam: float) -> float:
    """``0.5 ||z - E s||^2 + lam ||s||_{1,2}``; ``E`` may be a ``NormalSystem`` (then ``z`` is ignored)."""
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("s must be elementwise nonnegative")
    if isinstance(E, NormalSystem):
        fid = 0.5 * E.residual_sq(s)
    else:
        r = z - E @ s
        fid = 0.5 * float(r @ r)
    return fid + lam * float(group_norms(s).sum())


def group_threshold(c, tau: float) -> np.ndarray:
    """Group shrinkage followed by a nonnegative clamp.

    ``c`` has shape (2,) or (..., 2).  Returns ``max(0, (1 - tau / max(||c||, tau)) c)``.
    """
    c = np.asarray(c, dtype=float)
    nrm = np.linalg.norm(c, axis=-1, keepdims=True)
    denom = np.maximum(nrm, tau)
    with np.errstate(invalid="ignore", divide="ignore"):
        factor = np.where(denom > 0, 1.0 - tau / denom, 0.0)
    return np.maximum(0.0, factor * c)


def nonneg_group_prox(c, tau: float) -> np.ndarray:
    """Exact prox of ``tau ||.||_2`` plus the nonnegativity indicator: clamp, then shrink."""
    return group_threshold(np.maximum(np.asarray(c, dtype=float), 0.0), tau)


def _apply_threshold(flat: np.ndarray, tau: float, kind: str) -> np.ndarray:
    M = flat.size // 2
    pairs = np.column_stack([flat[:M], flat[M:]])
    out = nonneg_group_prox(pairs, tau) if kind == "exact" else group_threshold(pairs, tau)
    return np.concatenate([out[:, 0], out[:, 1]])


def prox_objective(system: NormalSystem, s_ref: np.ndarray, v: np.ndarray, params: ProxParams) -> float:
    d = v - s_ref
    return 0.5 * params.prox_weight * float(d @ d) + map_cost(system, None, v, params.lam)


def default_lambda(system: NormalSystem, fraction: float = 0.05) -> float:
    """``fraction`` of the largest group norm of ``E^T z``."""
    return fraction * float(group_norms(system.rhs).max(initial=0.0))


class SolveOperator:
    """Cached ``(E^T E + I / eta)^-1``, formed once from a Cholesky factor."""

    def __init__(self, gram: np.ndarray, eta: float):
        A = gram + np.eye(gram.shape[0]) / eta
        cf = sla.cho_factor(A, lower=False, check_finite=False)
        self.inverse = sla.cho_solve(cf, np.eye(gram.shape[0]), check_finite=False)
        self.inverse = 0.5 * (self.inverse + self.inverse.T)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.inverse @ x


def solve_operator(system: NormalSystem, eta: float) -> SolveOperator:
    op = system.cache.get(("solve", eta))
    if op is None:
        op = system.cache[("solve", eta)] = SolveOperator(system.gram, eta)
    return op


@dataclass
class ADMMState:
    v: np.ndarray
    a: np.ndarray
    b: np.ndarray


@dataclass
class ProxResult:
    s: np.ndarray
    converged: bool
    iterations: int
    state: ADMMState = field(repr=False)
    objective: float = np.nan
    history: list = field(default_factory=list, repr=False)


def admm_prox(system: NormalSystem, s_ref: np.ndarray, params: ProxParams,
              state: ADMMState | None = None, track: bool = False) -> ProxResult:
    """Evaluate the agent's proximal map at ``s_ref``.

    ``state`` warm-starts the ADMM iterates (the result stays a function of the
    problem data; only the iteration count changes).  With ``track=True`` the
    returned result carries the per-iteration prox objective in ``history``.
    """
    s_ref = np.asarray(s_ref, dtype=float)
    if not np.all(np.isfinite(s_ref)) or not np.all(np.isfinite(system.rhs)):
        raise ValueError("non-finite input to admm_prox")
    eta = params.eta
    w = params.prox_weight
    solve = solve_operator(system, eta)
    if state is None:
        a = np.maximum(s_ref, 0.0)
        b = np.zeros_like(a)
    else:
        a, b = state.a.copy(), state.b.copy()
    tau = params.lam * eta / (1.0 + eta * w)
    v = a
    converged = False
    history = []
    n = 0
    for n in range(1, params.max_iters + 1):
        v = solve(system.rhs + (a - eta * b) / eta)
        c = (v + eta * b + eta * w * s_ref) / (1.0 + eta * w)
        a_new = _apply_threshold(c, tau, params.threshold)
        b = b + (v - a_new) / eta
        r_p = np.linalg.norm(v - a_new)
        r_a = np.linalg.norm(a_new - a)
        a = a_new
        if track:
            history.append(prox_objective(system, s_ref, np.maximum(v, 0.0), params))
        if max(r_p, r_a) <= params.tol * (1.0 + np.linalg.norm(a)):
            converged = True
            break
    if not converged:
        log.debug("admm_prox hit max_iters=%d", params.max_iters)
    out = np.maximum(v, 0.0)
    res = ProxResult(out, converged, n, ADMMState(v, a, b))
    if track:
        res.history = history
        res.objective = history[-1]
    return res


def solve_map(system: NormalSystem, lam: float, tol: float = 1e-8, max_iters: int = 5000,
              eta: float = 1.0) -> ProxResult:
    """Minimize the single-BS MAP cost (no proximity term)."""
    params = ProxParams(lam=lam, sigma2=np.inf, eta=eta, tol=tol, max_iters=max_iters)
    return admm_prox(system, np.zeros(system.n), params)
