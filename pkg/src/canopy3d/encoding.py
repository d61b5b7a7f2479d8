"""Descriptor-set encodings: k-means/BoVW and GMM/Fisher Vector.

Both encoders turn a variable-size set of local descriptors into one
fixed-length vector.  Fitting is deterministic given a seed, and both
encoders canonicalize row order so the output is bit-identical under any
permutation of the input descriptors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import ModelBundleError, PipelineError

DEFAULT_GMM_K = 16
DEFAULT_BOVW_K = 64
DEFAULT_VAR_FLOOR = 1e-4
_LL_TOL = 1e-9


@dataclass(frozen=True)
class Codebook:
    centroids: np.ndarray                    # (K, D)
    objective_trace: Tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=float)
        if c.ndim != 2 or c.shape[0] < 2:
            raise ValueError("codebook needs at least 2 centroids")
        if len(np.unique(c, axis=0)) != len(c):
            raise ValueError("codebook centroids must be distinct")
        c.flags.writeable = False
        object.__setattr__(self, "centroids", c)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray                      # (K,)
    means: np.ndarray                        # (K, D)
    variances: np.ndarray                    # (K, D) diagonal
    loglik_trace: Tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.asarray(self.means, dtype=float)
        v = np.asarray(self.variances, dtype=float)
        if abs(w.sum() - 1.0) > 1e-9 or np.any(w <= 0):
            raise ValueError("mixture weights must be positive and sum to 1")
        if m.shape != v.shape or m.shape[0] != len(w):
            raise ValueError("weights, means, variances must align")
        if np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise ValueError("variances must be positive and finite")
        for arr in (w, m, v):
            arr.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _canonical_rows(descriptors: np.ndarray) -> np.ndarray:
    """Sort rows lexicographically so encodings are permutation-invariant."""
    descriptors = np.asarray(descriptors, dtype=float)
    if descriptors.ndim != 2 or len(descriptors) == 0:
        raise ValueError("descriptors must be a non-empty 2D array")
    return descriptors[np.lexsort(descriptors.T[::-1])]


# ---------------------------------------------------------------------------
# k-means / BoVW

def _plus_plus_init(data: np.ndarray, k: int, rng) -> np.ndarray:
    centers = np.empty((k, data.shape[1]))
    centers[0] = data[rng.integers(len(data))]
    closest = np.sum((data - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            centers[j] = data[rng.integers(len(data))]
        else:
            centers[j] = data[rng.choice(len(data), p=closest / total)]
        closest = np.minimum(closest,
                             np.sum((data - centers[j]) ** 2, axis=1))
    return centers


def fit_kmeans(descriptors: np.ndarray, k: int, seed: int = 0,
               max_iter: int = 100) -> Codebook:
    """Lloyd's algorithm with k-means++ seeding.

    The recorded objective trace (sum of squared distances, measured after
    each assignment) is non-increasing; empty clusters are re-seeded to the
    point currently farthest from its assigned centroid.
    """
    data = np.asarray(descriptors, dtype=float)
    if data.ndim != 2:
        raise ValueError("descriptors must be 2D")
    m = len(data)
    if m < k:
        raise PipelineError(f"need at least {k} descriptors, got {m}")
    rng = np.random.default_rng(seed)
    centers = _plus_plus_init(data, k, rng)

    trace = []
    labels = None
    for _ in range(max_iter):
        d2 = np.sum((data[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = d2.argmin(axis=1)
        point_cost = d2[np.arange(m), new_labels]
        trace.append(float(point_cost.sum()))

        counts = np.bincount(new_labels, minlength=k)
        empties = np.nonzero(counts == 0)[0]
        if empties.size:
            order = np.argsort(-point_cost, kind="stable")
            for slot, cluster in enumerate(empties):
                centers[cluster] = data[order[slot]]
            continue    # re-assign against the re-seeded centers

        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        for j in range(k):
            centers[j] = data[labels == j].mean(axis=0)

    return Codebook(centers, tuple(trace))


def encode_bovw(codebook: Codebook, descriptors: np.ndarray) -> np.ndarray:
    """Hard-assignment histogram over the codebook, L1-normalized."""
    rows = _canonical_rows(descriptors)
    if rows.shape[1] != codebook.dim:
        raise PipelineError(
            f"descriptor dim {rows.shape[1]} != codebook dim {codebook.dim}")
    d2 = np.sum((rows[:, None, :] - codebook.centroids[None, :, :]) ** 2,
                axis=2)
    counts = np.bincount(d2.argmin(axis=1), minlength=codebook.k)
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# GMM / Fisher Vector

def _log_gaussians(data: np.ndarray, gmm_w, gmm_mu, gmm_var) -> np.ndarray:
    """(n, K) log of weighted component densities."""
    const = -0.5 * np.sum(np.log(2.0 * np.pi * gmm_var), axis=1)   # (K,)
    diff = data[:, None, :] - gmm_mu[None, :, :]
    mahal = np.sum(diff ** 2 / gmm_var[None, :, :], axis=2)
    return np.log(gmm_w)[None, :] + const[None, :] - 0.5 * mahal


def _loglik(log_joint: np.ndarray) -> float:
    peak = log_joint.max(axis=1, keepdims=True)
    return float((peak[:, 0] + np.log(np.exp(log_joint - peak).sum(axis=1))).sum())


def fit_gmm(descriptors: np.ndarray, k: int, seed: int = 0,
            max_iter: int = 100,
            var_floor: float = DEFAULT_VAR_FLOOR) -> GmmModel:
    """Diagonal-covariance EM initialized from k-means.

    The log-likelihood trace is non-decreasing (within 1e-9; a violation
    caused by the variance floor reverts the step and stops).  The floor is
    var_floor times the per-dimension data variance.
    """
    data = np.asarray(descriptors, dtype=float)
    m = len(data)
    if m < 10 * k:
        warnings.warn(f"only {m} descriptors for {k} components; "
                      "GMM may be poorly determined")
    floor = np.maximum(var_floor * data.var(axis=0), 1e-12)

    km = fit_kmeans(data, k, seed=seed) if k >= 2 else None
    if km is None:
        mu = data.mean(axis=0, keepdims=True)
        var = np.maximum(data.var(axis=0, keepdims=True), floor)
        w = np.ones(1)
    else:
        mu = km.centroids.copy()
        d2 = np.sum((data[:, None, :] - mu[None, :, :]) ** 2, axis=2)
        labels = d2.argmin(axis=1)
        counts = np.bincount(labels, minlength=k)
        w = counts / m
        var = np.empty_like(mu)
        for j in range(k):
            member = data[labels == j]
            var[j] = np.maximum(member.var(axis=0) if len(member) else 0.0,
                                floor)

    trace = []
    prev = (w, mu, var)
    for _ in range(max_iter + 1):
        log_joint = _log_gaussians(data, w, mu, var)
        ll = _loglik(log_joint)
        if not np.isfinite(ll):
            raise PipelineError(
                "GMM fitting diverged: non-finite log-likelihood "
                f"(weights min {w.min():.3e}, variance min {var.min():.3e})")
        if trace and ll < trace[-1] - _LL_TOL:
            w, mu, var = prev            # floor broke monotonicity; revert
            break
        trace.append(ll)
        if len(trace) >= 2 and \
                trace[-1] - trace[-2] < 1e-8 * max(1.0, abs(ll)):
            break
        prev = (w.copy(), mu.copy(), var.copy())

        peak = log_joint.max(axis=1, keepdims=True)
        resp = np.exp(log_joint - peak)
        resp /= resp.sum(axis=1, keepdims=True)
        nk = resp.sum(axis=0)
        if np.any(nk <= 0):
            raise PipelineError("GMM fitting produced an empty component "
                                f"(occupancies {nk})")
        w = nk / m
        mu = resp.T @ data / nk[:, None]
        sq = resp.T @ (data ** 2) / nk[:, None]
        var = np.maximum(sq - mu ** 2, floor)

    return GmmModel(w, mu, var, tuple(trace))


def fv_raw(gmm: GmmModel, rows: np.ndarray) -> np.ndarray:
    """Unnormalized Fisher Vector [mean block ‖ variance block]."""
    n = len(rows)
    log_joint = _log_gaussians(rows, gmm.weights, gmm.means, gmm.variances)
    peak = log_joint.max(axis=1, keepdims=True)
    resp = np.exp(log_joint - peak)
    resp /= resp.sum(axis=1, keepdims=True)      # (n, K)

    sigma = np.sqrt(gmm.variances)               # (K, D)
    diff = (rows[:, None, :] - gmm.means[None, :, :]) / sigma[None, :, :]
    g_mu = np.einsum("nk,nkd->kd", resp, diff) / (
        n * np.sqrt(gmm.weights)[:, None])
    g_sigma = np.einsum("nk,nkd->kd", resp, diff ** 2 - 1.0) / (
        n * np.sqrt(2.0 * gmm.weights)[:, None])
    return np.concatenate([g_mu.ravel(), g_sigma.ravel()])


def encode_fv(gmm: GmmModel, descriptors: np.ndarray) -> np.ndarray:
    """Improved Fisher Vector: signed square-root then L2 normalization."""
    rows = _canonical_rows(descriptors)
    if rows.shape[1] != gmm.dim:
        raise PipelineError(
            f"descriptor dim {rows.shape[1]} != GMM dim {gmm.dim}")
    raw = fv_raw(gmm, rows)
    powered = np.sign(raw) * np.sqrt(np.abs(raw))
    norm = np.linalg.norm(powered)
    if norm == 0:
        warnings.warn("all-zero Fisher Vector")
        return powered
    return powered / norm


# ---------------------------------------------------------------------------
# model file IO

def _write_rows(fh, arr):
    for row in np.atleast_2d(arr):
        fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def _read_rows(lines, start, count, dim, path):
    out = np.empty((count, dim))
    for r in range(count):
        vals = lines[start + r].split()
        if len(vals) != dim:
            raise ModelBundleError(
                f"{path}: row {start + r + 1} has {len(vals)} values, "
                f"expected {dim}")
        out[r] = [float(v) for v in vals]
    return out


def save_gmm(gmm: GmmModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"GMMV1 {gmm.k} {gmm.dim}\n")
        _write_rows(fh, gmm.weights)
        _write_rows(fh, gmm.means)
        _write_rows(fh, gmm.variances)


def load_gmm(path) -> GmmModel:
    path = Path(path)
    lines = path.read_text().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 3 or head[0] != "GMMV1":
        raise ModelBundleError(f"{path}: expected GMMV1 header")
    k, d = int(head[1]), int(head[2])
    if len(lines) < 1 + 1 + 2 * k:
        raise ModelBundleError(f"{path}: truncated GMM file")
    weights = _read_rows(lines, 1, 1, k, path)[0]
    means = _read_rows(lines, 2, k, d, path)
    variances = _read_rows(lines, 2 + k, k, d, path)
    return GmmModel(weights, means, variances)


def save_codebook(codebook: Codebook, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"KMV1 {codebook.k} {codebook.dim}\n")
        _write_rows(fh, codebook.centroids)


def load_codebook(path) -> Codebook:
    path = Path(path)
    lines = path.read_text().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 3 or head[0] != "KMV1":
        raise ModelBundleError(f"{path}: expected KMV1 header")
    k, d = int(head[1]), int(head[2])
    if len(lines) < 1 + k:
        raise ModelBundleError(f"{path}: truncated codebook file")
    return Codebook(_read_rows(lines, 1, k, d, path))
