"""Seeded end-to-end experiments: scene -> pilots -> measurements -> fusion -> metrics.

A sweep is the Cartesian product of the configured K, channel-error, SNR and
L lists.  Channels and pilots are built once per K, measurements once per
(K, SNR) from all BSs of the scene, and each L point fuses the first L BSs.
All randomness flows from ``ExperimentConfig.seed``, so a sweep point is a
pure function of the configuration.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .config import build_scene, load_scenario
from .em_forward import ChannelSet, synthesize_measurements
from .mace import FusionParams, FusionProblem, bim_outer
from .materials import accuracy, identify
from .pilots import PilotParams, design_all, random_pilots
from .scene import EPS0, GridRegion

log = logging.getLogger(__name__)

NMSE_FLOOR_DB = -300.0


def nmse(s_true: np.ndarray, s_est: np.ndarray, omega_c: float | None = None) -> float:
    """NMSE in dB of a reconstructed property vector.

    Both vectors are ``[eps_r - 1, sigma / (omega_c eps0)]``; the error is
    normalized by ``||eps_r||^2 + ||sigma||^2 / (omega_c eps0)^2`` of the truth
    (``eps_r`` itself, not the contrast).  ``omega_c`` is accepted for callers
    holding physical conductivities and does not change the value.
    """
    s_true = np.asarray(s_true, dtype=float)
    s_est = np.asarray(s_est, dtype=float)
    M = s_true.size // 2
    eps_t = s_true[:M] + 1.0
    den = float(eps_t @ eps_t + s_true[M:] @ s_true[M:])
    if den == 0:
        raise ValueError("zero-norm ground truth")
    num = float(np.sum((s_true - s_est) ** 2))
    if num == 0:
        return NMSE_FLOOR_DB
    return max(10.0 * np.log10(num / den), NMSE_FLOOR_DB)


def nmse_physical(eps_true, sigma_true, eps_est, sigma_est, omega_c: float) -> float:
    """Same metric from physical maps (conductivity in S/m)."""
    w = omega_c * EPS0
    num = np.sum((np.asarray(eps_true) - eps_est) ** 2) + np.sum((np.asarray(sigma_true) - sigma_est) ** 2) / w**2
    den = np.sum(np.asarray(eps_true) ** 2) + np.sum(np.asarray(sigma_true) ** 2) / w**2
    if den == 0:
        raise ValueError("zero-norm ground truth")
    return NMSE_FLOOR_DB if num == 0 else max(10.0 * np.log10(num / den), NMSE_FLOOR_DB)


def inject_channel_error(H: np.ndarray, target_nmse_db: float | None, seed) -> np.ndarray:
    """Add CSCG noise scaled so that ``||dH||^2 / ||H||^2`` equals the target exactly."""
    if target_nmse_db is None or not np.isfinite(target_nmse_db):
        return H.copy()
    rng = np.random.default_rng(seed)
    dH = rng.standard_normal(H.shape) + 1j * rng.standard_normal(H.shape)
    scale = np.linalg.norm(H) * 10 ** (target_nmse_db / 20) / np.linalg.norm(dH)
    return H + scale * dH


# --- image export ------------------------------------------------------------

def property_maps(s: np.ndarray, grid: GridRegion) -> tuple[np.ndarray, np.ndarray]:
    """(eps_r, sigma_scaled) images; pixel (row, col) holds grid index ``row * n_side + col``."""
    M = grid.M
    n = grid.n_side
    return (s[:M] + 1.0).reshape(n, n), s[M:].reshape(n, n)


def write_pgm(path, image: np.ndarray):
    """8-bit binary PGM, linearly scaled from the image min (0) to max (255)."""
    lo, hi = float(image.min()), float(image.max())
    q = np.zeros(image.shape, np.uint8) if hi <= lo else np.round(255 * (image - lo) / (hi - lo)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], np.uint8).reshape(h, w)


def export_images(s: np.ndarray, grid: GridRegion, out, stem: str = "estimate") -> dict:
    """Write ``<stem>_eps.pgm``, ``<stem>_sigma.pgm`` and full-precision CSV grids."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    eps, sig = property_maps(np.asarray(s, dtype=float), grid)
    files = {}
    for tag, img in (("eps", eps), ("sigma", sig)):
        files[f"{tag}_pgm"] = out / f"{stem}_{tag}.pgm"
        files[f"{tag}_csv"] = out / f"{stem}_{tag}.csv"
        write_pgm(files[f"{tag}_pgm"], img)
        np.savetxt(files[f"{tag}_csv"], img, fmt="%.17g", delimiter=",")
    return files


def load_images(eps_csv, sigma_csv) -> np.ndarray:
    """Inverse of the CSV part of ``export_images``: the stacked property vector."""
    eps = np.loadtxt(eps_csv, delimiter=",", ndmin=2)
    sig = np.loadtxt(sigma_csv, delimiter=",", ndmin=2)
    return np.concatenate([eps.ravel() - 1.0, sig.ravel()])


# --- configuration and reports -------------------------------------------------

@dataclass
class ExperimentConfig:
    scenario: str | dict = "desk"
    snr_db: list = field(default_factory=lambda: [30.0])
    K: list = field(default_factory=list)  # empty: the scenario's K
    L: list = field(default_factory=list)  # empty: all BSs of the scenario
    channel_error_db: list = field(default_factory=lambda: [None])  # None: perfect channel knowledge
    seed: int = 0
    pilots: dict = field(default_factory=dict)  # PilotParams fields, plus mode: designed | random
    fusion: dict = field(default_factory=dict)  # FusionParams fields
    classify: bool = True
    dbscan: dict = field(default_factory=dict)  # eps, min_pts
    output_dir: str | None = None
    export_images: bool = False

    def __post_init__(self):
        self.snr_db = [float(v) for v in self.snr_db]
        self.K = [int(v) for v in self.K]
        self.L = [int(v) for v in self.L]
        self.channel_error_db = [None if v is None or (isinstance(v, float) and np.isneginf(v)) else float(v)
                                 for v in self.channel_error_db]
        if any(k < 1 for k in self.K) or any(l < 1 for l in self.L):
            raise ValueError("K and L entries must be >= 1")
        mode = self.pilots.get("mode", "designed")
        if mode not in ("designed", "random"):
            raise ValueError("pilots.mode must be 'designed' or 'random'")
        FusionParams(**self.fusion)
        PilotParams(**{k: v for k, v in self.pilots.items() if k != "mode"})

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        d = yaml.safe_load(Path(path).read_text()) or {}
        if isinstance(d.get("scenario"), str) and not Path(d["scenario"]).is_absolute():
            cand = Path(path).parent / d["scenario"]
            if cand.exists():
                d["scenario"] = str(cand)
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o))


def config_hash(scenario: dict, cfg: ExperimentConfig, point: dict) -> str:
    """Hash of everything that determines one sweep point (output paths excluded)."""
    d = cfg.to_dict()
    for k in ("output_dir", "export_images", "scenario", "snr_db", "K", "L", "channel_error_db"):
        d.pop(k)
    return hashlib.sha256(_canonical({"scenario": scenario, "cfg": d, "point": point}).encode()).hexdigest()[:16]


TIMING_FIELDS = ("wall_time",)


@dataclass
class RunReport:
    config_hash: str
    snr_db: float
    K: int
    L: int
    channel_error_db: float | None
    status: str = "ok"
    error: str = ""
    nmse_db: float = float("nan")
    accuracy: float = float("nan")  # over target pixels
    accuracy_all: float = float("nan")  # over all pixels
    n_clusters: int = 0
    air_distance: float = float("nan")
    mann_iterations: int = 0
    admm_iterations: int = 0
    bim_updates: int = 0
    overhead: int = 0
    converged: bool = False
    estimate_sha: str = ""
    wall_time: float = 0.0

    def digest(self) -> str:
        d = {k: v for k, v in dataclasses.asdict(self).items() if k not in TIMING_FIELDS}
        return hashlib.sha256(_canonical(d).encode()).hexdigest()

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]


def append_reports(path, reports) -> None:
    """Append rows to a CSV (header written when the file is new)."""
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RunReport.columns())
        if new:
            w.writeheader()
        for r in reports:
            w.writerow(dataclasses.asdict(r))


def read_reports(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


# --- sweep -------------------------------------------------------------------

def make_pilots(channels: ChannelSet, cfg: ExperimentConfig, seed: int) -> tuple[np.ndarray, list]:
    """(K, U, N_t, I) pilots; each UE designs its own from an independent seeded stream."""
    scene = channels.scene
    K, I = channels.K, scene.n_pilots
    n_t = max(ue.n_t for ue in scene.ues)
    out = np.zeros((K, scene.U, n_t, I), dtype=complex)
    flags = []
    mode = cfg.pilots.get("mode", "designed")
    params = PilotParams(**{k: v for k, v in cfg.pilots.items() if k != "mode"})
    for u, ue in enumerate(scene.ues):
        rng = np.random.default_rng([seed, 1000 + u])
        if mode == "random":
            for k in range(K):
                out[k, u] = random_pilots(ue.n_t, I, ue.power_budget, rng)
            continue
        designs = design_all([channels.H1[k, u] for k in range(K)], ue.power_budget, ue.min_region_power, I,
                             params, rng)
        for k, d in enumerate(designs):
            out[k, u] = d.W
            flags.append(d.infeasible)
    return out, flags


class _Cache:
    def __init__(self):
        self.store = {}

    def get(self, key, build):
        if key not in self.store:
            self.store[key] = build()
        return self.store[key]


def run_point(scene, target, channels, pilots, meas, L: int, err_db, cfg: ExperimentConfig,
              chash: str, out_dir: Path | None) -> tuple[RunReport, np.ndarray]:
    omega_c = scene.subcarriers.omega_c
    s_true = target.property_vector(omega_c)
    est_channels = channels
    if err_db is not None:
        est_channels = channels.with_channels(
            inject_channel_error(channels.H1, err_db, [cfg.seed, 7, 1]),
            inject_channel_error(channels.H2, err_db, [cfg.seed, 7, 2]))
    idx = list(range(L))
    problem = FusionProblem(est_channels.subset(idx), meas.subset(idx), pilots)
    fparams = FusionParams(**cfg.fusion)
    res = bim_outer(problem, fparams, metric=lambda s: nmse(s_true, s))
    rep = RunReport(chash, meas.snr_db if meas.snr_db is not None else float("inf"), channels.K, L, err_db)
    rep.nmse_db = nmse(s_true, res.s)
    rep.mann_iterations = res.mann_iterations
    rep.admm_iterations = res.admm_iterations
    rep.bim_updates = res.bim_updates
    rep.overhead = res.overhead
    rep.converged = bool(res.converged)
    rep.estimate_sha = hashlib.sha256(np.ascontiguousarray(res.s).tobytes()).hexdigest()[:16]
    if cfg.classify:
        _, cls, _ = identify(res.s, target.material_db, omega_c, cfg.dbscan.get("eps"),
                             int(cfg.dbscan.get("min_pts", 4)))
        rep.accuracy = accuracy(cls.pixel_labels, target)
        rep.accuracy_all = accuracy(cls.pixel_labels, target, include_air=True)
        rep.n_clusters = int(len(cls.cluster_materials))
        rep.air_distance = cls.air_distance
    if out_dir is not None:
        point_dir = out_dir / chash
        point_dir.mkdir(parents=True, exist_ok=True)
        if cfg.export_images:
            export_images(res.s, scene.region, point_dir)
        with (point_dir / "convergence.csv").open("w", newline="") as fh:
            if res.log:
                w = csv.DictWriter(fh, fieldnames=list(res.log[0]))
                w.writeheader()
                w.writerows(res.log)
    return rep, res.s


def run_experiment(cfg: ExperimentConfig, keep_estimates: bool = False):
    """Run every sweep point; failures are logged and reported with ``status='error'``.

    Returns the list of RunReports (and the estimates when ``keep_estimates``).
    """
    scenario = load_scenario(cfg.scenario)
    base_scene, _ = build_scene(scenario)
    Ks = cfg.K or [base_scene.subcarriers.K]
    Ls = cfg.L or [base_scene.L]
    out_dir = Path(cfg.output_dir) if cfg.output_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    cache = _Cache()
    reports, estimates = [], []
    for K in Ks:
        for err_db in cfg.channel_error_db:
            for snr in cfg.snr_db:
                for L in Ls:
                    point = {"K": K, "L": L, "snr_db": snr, "channel_error_db": err_db, "seed": cfg.seed}
                    chash = config_hash(scenario, cfg, point)
                    t0 = time.perf_counter()
                    try:
                        if L > base_scene.L:
                            raise ValueError(f"L={L} exceeds the {base_scene.L} BSs of the scenario")
                        scene, target = cache.get(("scene", K), lambda: build_scene(scenario, K))
                        channels = cache.get(("ch", K), lambda: ChannelSet.build(scene))
                        pilots, _ = cache.get(("pilots", K), lambda: make_pilots(channels, cfg, cfg.seed))
                        s_true = target.property_vector(scene.subcarriers.omega_c)
                        meas = cache.get(("meas", K, snr), lambda: synthesize_measurements(
                            channels, s_true, pilots, snr, cfg.seed))
                        rep, s_est = run_point(scene, target, channels, pilots, meas, L, err_db, cfg, chash,
                                               out_dir)
                    except Exception as exc:  # one bad point must not stop the sweep
                        log.exception("sweep point %s failed", point)
                        rep = RunReport(chash, snr, K, L, err_db, status="error", error=f"{type(exc).__name__}: {exc}")
                        s_est = None
                    rep.wall_time = time.perf_counter() - t0
                    log.info("K=%d err=%s snr=%g L=%d -> nmse %.2f dB (%s, %.1fs)", K, err_db, snr, L,
                             rep.nmse_db, rep.status, rep.wall_time)
                    reports.append(rep)
                    estimates.append(s_est)
                    if out_dir is not None:
                        append_reports(out_dir / "reports.csv", [rep])
    return (reports, estimates) if keep_estimates else reports
