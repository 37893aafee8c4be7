"""Material identification from reconstructed (eps_r, sigma) maps.

Pixels become 2-D features ``(eps_r, sigma / (omega_c eps0))``.  They are
clustered by DBSCAN under the Mahalanobis metric of the pixel covariance, the
cluster nearest to air ``(1, 0)`` is taken as background, and every other
cluster is labeled with the closest database material.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.cluster import DBSCAN

from .scene import AIR, EPS0, MaterialSpec, TargetMap

AIR_POINT = np.array([1.0, 0.0])


def load_material_db(path=None) -> tuple[MaterialSpec, ...]:
    """Read a ``name,eps_r,sigma`` table (``#`` lines are comments); default is the bundled one."""
    if path is None:
        text = resources.files("emsense.data").joinpath("materials.csv").read_text()
    else:
        text = Path(path).read_text()
    rows = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    reader = csv.DictReader(rows)
    return tuple(MaterialSpec(r["name"].strip(), float(r["eps_r"]), float(r["sigma"])) for r in reader)


def material_index(db, name: str) -> int:
    for i, m in enumerate(db):
        if m.name == name:
            return i
    raise KeyError(f"material {name!r} not in database")


def pixel_features(s: np.ndarray) -> np.ndarray:
    """(M, 2) features from the stacked property vector ``[eps_r - 1, sigma / (omega_c eps0)]``."""
    s = np.asarray(s, dtype=float)
    M = s.size // 2
    return np.column_stack([s[:M] + 1.0, s[M:]])


def material_features(db, omega_c: float) -> np.ndarray:
    return np.array([[m.eps_r, m.sigma / (omega_c * EPS0)] for m in db]).reshape(-1, 2)


def mahalanobis(x, y, cov_inv) -> float:
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return float(np.sqrt(max(d @ np.asarray(cov_inv) @ d, 0.0)))


def covariance_inverse(features: np.ndarray, rcond: float = 1e-12) -> np.ndarray:
    """Inverse sample covariance; a near-singular estimate gets ``1e-9 * trace`` added to its diagonal."""
    cov = np.atleast_2d(np.cov(features, rowvar=False))
    w = np.linalg.eigvalsh(cov)
    if w[0] <= rcond * max(w[-1], 0.0) or w[-1] <= 0:
        cov = cov + 1e-9 * max(np.trace(cov), 1.0) * np.eye(cov.shape[0])
    return np.linalg.inv(cov)


def whiten(features: np.ndarray, cov_inv: np.ndarray) -> np.ndarray:
    """Map features so that Euclidean distance equals Mahalanobis distance."""
    Lc = np.linalg.cholesky(cov_inv)
    return features @ Lc


def kth_neighbor_distances(points: np.ndarray, k: int = 4) -> np.ndarray:
    """Distance of every point to its k-th nearest other point, sorted ascending."""
    D = cdist(points, points)
    np.fill_diagonal(D, np.inf)
    k = min(k, len(points) - 1)
    return np.sort(np.partition(D, k - 1, axis=1)[:, k - 1])


def knee_eps(points: np.ndarray, k: int = 4) -> float:
    """Knee of the sorted k-NN distance curve.

    Both axes are scaled to [0, 1] and the knee is the point farthest below the
    chord joining the curve's end points.
    """
    d = kth_neighbor_distances(points, k)
    span = d[-1] - d[0]
    if span <= 0:
        return float(d[-1]) if d[-1] > 0 else 1e-12
    x = np.linspace(0.0, 1.0, d.size)
    y = (d - d[0]) / span
    i = int(np.argmax(x - y))
    return float(max(d[i], 1e-12))


@dataclass
class ClusterResult:
    labels: np.ndarray
    centroids: np.ndarray
    counts: np.ndarray
    eps: float = np.nan
    min_pts: int = 4

    @property
    def n_clusters(self) -> int:
        return len(self.counts)


def dbscan(features: np.ndarray, eps: float, min_pts: int = 4, cov_inv: np.ndarray | None = None) -> ClusterResult:
    """DBSCAN with Euclidean (``cov_inv=None``) or Mahalanobis distance.

    ``min_pts`` counts the point itself.  Noise gets label -1; cluster ids follow
    the order in which clusters are first met in the input.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("need eps > 0 and min_pts >= 1")
    X = np.asarray(features, dtype=float)
    Z = X if cov_inv is None else whiten(X, cov_inv)
    raw = DBSCAN(eps=eps, min_samples=min_pts).fit_predict(Z)
    labels = np.full(len(X), -1)
    order = [c for c in dict.fromkeys(raw.tolist()) if c >= 0]
    for new, old in enumerate(order):
        labels[raw == old] = new
    centroids = np.array([X[labels == c].mean(axis=0) for c in range(len(order))]).reshape(-1, X.shape[1])
    counts = np.array([np.sum(labels == c) for c in range(len(order))], dtype=int)
    return ClusterResult(labels, centroids, counts, eps, min_pts)


@dataclass
class Classification:
    pixel_labels: np.ndarray  # 0 = air, j > 0 = db[j - 1], -1 = outlier
    cluster_materials: np.ndarray  # per cluster, same convention
    air_cluster: int
    air_distance: float
    air_only: bool


def classify(clusters: ClusterResult, db, cov_inv: np.ndarray, omega_c: float) -> Classification:
    """Air cluster by proximity to (1, 0); the rest by nearest database material (ties: lower index)."""
    if clusters.n_clusters == 0:
        return Classification(np.where(clusters.labels >= 0, 0, -1), np.zeros(0, int), -1, np.inf, True)
    d_air = np.array([mahalanobis(c, AIR_POINT, cov_inv) for c in clusters.centroids])
    air = int(np.argmin(d_air))
    feats = material_features([AIR, *db], omega_c)
    mats = np.empty(clusters.n_clusters, dtype=int)
    for c, centroid in enumerate(clusters.centroids):
        if c == air:
            mats[c] = 0
            continue
        dist = [mahalanobis(centroid, f, cov_inv) for f in feats[1:]]
        mats[c] = int(np.argmin(dist)) + 1
    pixel = np.where(clusters.labels >= 0, mats[np.maximum(clusters.labels, 0)], -1)
    return Classification(pixel, mats, air, float(d_air[air]), clusters.n_clusters == 1)


def accuracy(pixel_labels: np.ndarray, truth: TargetMap, include_air: bool = False) -> float:
    """Fraction of correctly labeled pixels, over target pixels (or all pixels with ``include_air``)."""
    mask = np.ones_like(truth.target_mask) if include_air else truth.target_mask
    if not np.any(mask):
        raise ValueError("no target pixels to score")
    return float(np.mean(np.asarray(pixel_labels)[mask] == truth.labels[mask]))


def identify(s: np.ndarray, db, omega_c: float, eps: float | None = None, min_pts: int = 4):
    """Full pipeline on a property vector: features, covariance, eps knee, DBSCAN, labels."""
    X = pixel_features(s)
    cov_inv = covariance_inverse(X)
    if eps is None:
        eps = knee_eps(whiten(X, cov_inv), min_pts)
    clusters = dbscan(X, eps, min_pts, cov_inv)
    return clusters, classify(clusters, db, cov_inv, omega_c), cov_inv
