"""Multi-agent consensus equilibrium across base stations, wrapped in a Born
iterative outer loop.

Each BS is an agent ``F_l`` (its proximal map).  The consensus equilibrium
``F(S*) = G(S*)`` is the fixed point of ``T = (2F - I)(2G - I)``, reached by
Mann iterations ``Q <- rho T(Q) + (1 - rho) Q``.  Only the 2M-vectors in ``S``
cross the BS/CPU boundary, which is what the overhead counter tracks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.sparse.linalg import eigsh

from .admm import ProxParams, admm_prox, default_lambda, solve_map
from .em_forward import ChannelSet, Measurements, SingularSystemError
from .sensing import NormalSystem, build_normal_system, linearized_factor

log = logging.getLogger(__name__)


def averaging(S: np.ndarray) -> np.ndarray:
    return np.repeat(S.mean(axis=1, keepdims=True), S.shape[1], axis=1)


def reflect_G(Q: np.ndarray) -> np.ndarray:
    """``(2G - I) Q``, i.e. right-multiplication by ``(2/L) 1 1^T - I``."""
    return 2.0 * Q.mean(axis=1, keepdims=True) - Q


class Agent:
    """Proximal map of one BS; keeps the last ADMM iterates as a warm start."""

    def __init__(self, system: NormalSystem, params: ProxParams, index: int = 0):
        self.system = system
        self.params = params
        self.index = index
        self.state = None
        self.admm_iterations = 0

    def __call__(self, s: np.ndarray) -> np.ndarray:
        try:
            res = admm_prox(self.system, s, self.params, self.state)
        except Exception as exc:
            raise RuntimeError(f"agent for BS {self.index} failed: {exc}") from exc
        self.state = res.state
        self.admm_iterations += res.iterations
        return res.s

    def update(self, system: NormalSystem):
        self.system = system


def agent_apply(agents: Sequence[Agent], S: np.ndarray) -> np.ndarray:
    return np.column_stack([agent(S[:, l]) for l, agent in enumerate(agents)])


@dataclass
class MannResult:
    s: np.ndarray
    S: np.ndarray
    Q: np.ndarray
    history: list
    converged: bool
    iterations: int
    consensus_residual: float = np.nan
    force_sum: float = np.nan


def mann_solve(agents: Sequence[Agent], S0: np.ndarray, rho: float = 0.5, eps: float | None = None,
               max_outer: int = 500, Q0: np.ndarray | None = None,
               on_iterate: Callable[[int, np.ndarray, float], None] | None = None,
               diagnostics: bool = True) -> MannResult:
    """Mann iterations on ``T = (2F - I)(2G - I)``.

    ``on_iterate(k, S, dQ)`` runs after each update with ``S = (2G - I) Q``; it
    may swap the agents' systems (the Born refresh).
    """
    if not 0 < rho < 1:
        raise ValueError("rho must lie in (0, 1)")
    n, L = S0.shape
    if eps is None:
        eps = 1e-6 * np.sqrt(n * L)
    Q = reflect_G(S0) if Q0 is None else Q0.copy()
    history = []
    converged = False
    k = 0
    for k in range(1, max_outer + 1):
        X = reflect_G(Q)
        T = 2.0 * agent_apply(agents, X) - X
        Q_new = rho * T + (1.0 - rho) * Q
        dQ = float(np.linalg.norm(Q_new - Q))
        Q = Q_new
        history.append(dQ)
        if on_iterate is not None:
            on_iterate(k, reflect_G(Q), dQ)
        if dQ < eps:
            converged = True
            break
    S = reflect_G(Q)
    res = MannResult(S.mean(axis=1), S, Q, history, converged, k)
    if diagnostics:
        FS = agent_apply(agents, S)
        res.consensus_residual = float(np.linalg.norm(FS - averaging(S)))
        res.force_sum = float(np.linalg.norm((FS - S).sum(axis=1)))
    if not converged:
        log.info("Mann iterations stopped at max_outer=%d (last dQ=%.3g)", max_outer, history[-1])
    return res


@dataclass(frozen=True)
class FusionParams:
    rho: float = 0.5
    eps: float | None = None  # defaults to 1e-6 * sqrt(2 M L)
    max_mann: int = 300
    n_bim: int = 5
    eps_bim: float = 1e-3
    refresh: str = "mann"  # "mann": refresh after each of the first n_bim Mann steps; "converged": classic BIM
    linearize: str = "consensus"  # or "per_bs"
    sigma2: float = 1.0
    eta: float = 1.0
    lam_fraction: float = 0.05
    admm_tol: float = 1e-8
    admm_max_iters: int = 2000
    normalize: bool = True

    def __post_init__(self):
        if self.refresh not in ("mann", "converged"):
            raise ValueError("refresh must be 'mann' or 'converged'")
        if self.linearize not in ("consensus", "per_bs"):
            raise ValueError("linearize must be 'consensus' or 'per_bs'")


@dataclass
class FusionResult:
    s: np.ndarray
    mann_iterations: int
    bim_updates: int
    overhead: int
    log: list = field(default_factory=list)
    estimates: list = field(default_factory=list)
    converged: bool = False
    lambdas: tuple = ()
    admm_iterations: int = 0


class FusionProblem:
    """Per-BS linearized systems for a measured scene, rebuilt on demand."""

    def __init__(self, channels: ChannelSet, meas: Measurements, pilots: np.ndarray):
        self.channels = channels
        self.meas = meas
        self.pilots = pilots
        self.L = channels.scene.L
        self.M = channels.scene.region.M
        self.scale = 1.0

    def _factors(self, s):
        return [linearized_factor(self.channels, self.pilots, k, s) for k in range(self.channels.K)]

    def systems(self, s: np.ndarray | None) -> list[NormalSystem]:
        """Systems of all BSs linearized at one shared estimate (``None`` = Born)."""
        f = self._factors(s)
        out = [build_normal_system(self.channels, self.meas, self.pilots, l, factors=f) for l in range(self.L)]
        return [sys_.scaled(self.scale) for sys_ in out]

    def systems_per_bs(self, S: np.ndarray) -> list[NormalSystem]:
        out = []
        for l in range(self.L):
            f = self._factors(np.maximum(S[:, l], 0.0))
            out.append(build_normal_system(self.channels, self.meas, self.pilots, l, factors=f)
                       .scaled(self.scale))
        return out


def _largest_eig(gram: np.ndarray) -> float:
    if gram.shape[0] <= 64:
        return float(np.linalg.eigvalsh(gram)[-1])
    v0 = np.ones(gram.shape[0])  # fixed start vector keeps runs bit-reproducible
    return float(eigsh(gram, k=1, which="LA", return_eigenvectors=False, tol=1e-6, v0=v0)[0])


def _safe_systems(problem: FusionProblem, s_new: np.ndarray, s_old: np.ndarray):
    try:
        return problem.systems(s_new), s_new
    except SingularSystemError:
        damped = 0.5 * (s_new + s_old)
        log.warning("singular forward model at the current estimate; retrying with a damped update")
        return problem.systems(damped), damped


def bim_outer(problem: FusionProblem, params: FusionParams = FusionParams(),
              metric: Callable[[np.ndarray], float] | None = None) -> FusionResult:
    """Born-initialized consensus fusion with Born-iterative refreshes of the sensing systems."""
    M, L = problem.M, problem.L
    born = problem.systems(None)
    if params.normalize:
        top = max(_largest_eig(s.gram) for s in born)
        if top > 0:
            problem.scale = 1.0 / np.sqrt(top)
            born = [s.scaled(problem.scale) for s in born]
    lams = tuple(default_lambda(s, params.lam_fraction) for s in born)
    zeta = 1.0 / L
    agents = [Agent(sys_, ProxParams(lam=lams[l], zeta=zeta, sigma2=params.sigma2, eta=params.eta,
                                     tol=params.admm_tol, max_iters=params.admm_max_iters), l)
              for l, sys_ in enumerate(born)]
    s0 = solve_map(born[0], lams[0], tol=params.admm_tol, max_iters=params.admm_max_iters,
                   eta=params.eta).s
    S0 = np.repeat(s0[:, None], L, axis=1)
    result = FusionResult(s0, 0, 0, 0, lambdas=lams)
    log_rows = result.log

    def fidelity(s):
        return [0.5 * a.system.residual_sq(s) / problem.scale**2 for a in agents]

    state = {"outer": 0, "s_lin": np.zeros(2 * M), "refreshes": 0}

    def record(k, S, dQ):
        s_bar = S.mean(axis=1)
        row = {"outer": state["outer"], "mann": k, "dQ": dQ}
        for l, f in enumerate(fidelity(np.maximum(s_bar, 0.0))):
            row[f"fidelity_{l}"] = f
        if metric is not None:
            row["nmse_db"] = metric(np.maximum(s_bar, 0.0))
        log_rows.append(row)

    def refresh(S):
        if params.linearize == "per_bs":
            systems = problem.systems_per_bs(S)
        else:
            s_new = np.maximum(S.mean(axis=1), 0.0)
            systems, s_used = _safe_systems(problem, s_new, state["s_lin"])
            state["s_lin"] = s_used
        for agent, sys_ in zip(agents, systems):
            agent.update(sys_)
        state["refreshes"] += 1

    if params.refresh == "mann":
        def on_iterate(k, S, dQ):
            record(k, S, dQ)
            if k <= params.n_bim:
                refresh(S)

        mres = mann_solve(agents, S0, params.rho, params.eps, params.max_mann, on_iterate=on_iterate,
                          diagnostics=False)
        result.mann_iterations = mres.iterations
        result.estimates.append(np.maximum(mres.s, 0.0))
        result.converged = mres.converged
        s_star = mres.s
    else:
        Q = None
        s_star = s0
        for outer in range(max(params.n_bim, 1)):
            state["outer"] = outer
            mres = mann_solve(agents, S0, params.rho, params.eps, params.max_mann, Q0=Q,
                              on_iterate=record, diagnostics=False)
            Q = mres.Q
            result.mann_iterations += mres.iterations
            s_new = np.maximum(mres.s, 0.0)
            result.estimates.append(s_new)
            change = np.linalg.norm(s_new - s_star) / max(np.linalg.norm(s_new), 1e-300)
            s_star = s_new
            result.converged = mres.converged
            if outer + 1 < params.n_bim and change >= params.eps_bim and np.any(s_star):
                refresh(np.repeat(s_star[:, None], L, axis=1))
            else:
                break
    result.s = np.maximum(s_star, 0.0)
    result.bim_updates = state["refreshes"]
    result.overhead = 2 * M * result.mann_iterations
    result.admm_iterations = sum(a.admm_iterations for a in agents)
    return result
