"""Cluster-masking surrogate explanations for the point-set encoders.

A cloud is split into spatial clusters with k-means; random subsets of
clusters are dropped, the encoder is queried on each perturbed cloud, and a
cosine-weighted linear regression of the responses on the keep/drop masks
assigns one coefficient per cluster.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .validation import check_points

logger = logging.getLogger(__name__)


@dataclass
class Segmentation:
    k: int
    assignment: np.ndarray
    centroids: np.ndarray
    objective_history: list[float] = field(default_factory=list)
    n_iter: int = 0

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)


def _sq_dist(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [points[rng.integers(len(points))]]
    closest = _sq_dist(points, np.array(centroids))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(len(points))
        else:
            idx = int(rng.choice(len(points), p=closest / total))
        centroids.append(points[idx])
        closest = np.minimum(closest, _sq_dist(points, points[idx][None])[:, 0])
    return np.array(centroids)


def _repair_empty(points, assignment, centroids, k) -> np.ndarray:
    assignment = assignment.copy()
    for c in range(k):
        sizes = np.bincount(assignment, minlength=k)
        if sizes[c] > 0:
            continue
        donor = int(np.argmax(sizes))
        members = np.flatnonzero(assignment == donor)
        d = np.sum((points[members] - centroids[donor]) ** 2, axis=1)
        assignment[members[int(np.argmax(d))]] = c
    return assignment


def kmeans(points, k: int, seed: int = 0, max_iters: int = 100) -> Segmentation:
    """Lloyd iterations from k-means++ seeds until the assignment stops changing."""
    pts = check_points(points)
    V = len(pts)
    if k < 1 or k > V:
        raise ValueError(f"k={k} must be in [1, V={V}]")
    rng = np.random.Generator(np.random.Philox(seed))
    centroids = _kmeans_pp(pts, k, rng)
    assignment = _repair_empty(pts, np.argmin(_sq_dist(pts, centroids), axis=1), centroids, k)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        centroids = np.stack([pts[assignment == c].mean(axis=0) for c in range(k)])
        history.append(float(np.sum((pts - centroids[assignment]) ** 2)))
        new = np.argmin(_sq_dist(pts, centroids), axis=1)
        new = _repair_empty(pts, new, centroids, k)
        if np.array_equal(new, assignment):
            break
        assignment = new
    return Segmentation(k, assignment, centroids, history, n_iter)


def sample_masks(k: int, n_samples: int, seed: int = 0) -> np.ndarray:
    """``(n_samples, k)`` Bernoulli(0.5) keep-masks; row 0 keeps everything, none drops everything."""
    if n_samples < k + 2:
        raise ValueError(f"need n_samples >= k + 2 = {k + 2} for an over-determined surrogate")
    rng = np.random.Generator(np.random.Philox(seed))
    masks = np.ones((n_samples, k), dtype=np.int64)
    for i in range(1, n_samples):
        row = rng.integers(0, 2, size=k)
        while not row.any():
            row = rng.integers(0, 2, size=k)
        masks[i] = row
    return masks


def perturb(x, seg: Segmentation, mask) -> np.ndarray:
    """Drop the points whose cluster is masked out, keeping survivor order."""
    pts = check_points(x)
    mask = np.asarray(mask)
    if mask.shape != (seg.k,):
        raise ValueError(f"mask length {mask.shape} != k={seg.k}")
    keep = mask[seg.assignment].astype(bool)
    if not keep.any():
        raise ValueError("mask removes every point")
    return pts[keep]


def model_response(x_pert, x_orig, encoder, mode="latent_similarity") -> float:
    """Scalar read-out of ``encoder`` on a perturbed cloud.

    ``mode`` is ``"latent_similarity"`` (negated code distance to the
    unperturbed cloud's code) or ``("component", i)`` / ``"component:i"``.
    """
    code = np.asarray(encoder(check_points(x_pert))).ravel()
    if mode == "latent_similarity":
        ref = np.asarray(encoder(check_points(x_orig))).ravel()
        return -float(np.linalg.norm(code - ref))
    if isinstance(mode, str) and mode.startswith("component:"):
        mode = ("component", int(mode.split(":", 1)[1]))
    if isinstance(mode, tuple) and mode[0] == "component":
        i = int(mode[1])
        if not 0 <= i < code.size:
            raise IndexError(f"component {i} out of range for code of width {code.size}")
        return float(code[i])
    raise ValueError(f"unknown response mode {mode!r}")


def cosine_weight(mask, reference=None) -> float:
    mask = np.asarray(mask, dtype=np.float64)
    ref = np.ones_like(mask) if reference is None else np.asarray(reference, dtype=np.float64)
    norm = np.linalg.norm(mask) * np.linalg.norm(ref)
    if norm == 0:
        raise ValueError("cosine weight undefined for an all-zero mask")
    return float(mask @ ref / norm)


@dataclass
class ImportanceMap:
    coefficients: np.ndarray
    intercept: float
    per_vertex: np.ndarray | None = None
    assignment: np.ndarray | None = None

    def attach(self, seg: Segmentation) -> "ImportanceMap":
        return ImportanceMap(self.coefficients, self.intercept, self.coefficients[seg.assignment],
                             seg.assignment)


class RankDeficientError(np.linalg.LinAlgError):
    pass


def fit_surrogate(masks, responses, weights, jitter: float = 1e-10) -> ImportanceMap:
    """Weighted least squares of responses on masks, with an intercept."""
    M = np.asarray(masks, dtype=np.float64)
    y = np.asarray(responses, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    n, k = M.shape
    if n <= k + 1:
        raise ValueError(f"need more than k + 1 = {k + 1} samples, got {n}")
    A = np.hstack([np.ones((n, 1)), M])
    Aw = A * w[:, None]
    gram = A.T @ Aw
    if np.linalg.matrix_rank(gram + jitter * np.eye(k + 1), tol=1e-9 * max(1.0, np.abs(gram).max())) < k + 1:
        raise RankDeficientError("surrogate design is rank deficient; draw more perturbation samples")
    beta = np.linalg.solve(gram + jitter * np.eye(k + 1), Aw.T @ y)
    return ImportanceMap(beta[1:], float(beta[0]))


def importance_colors(values, flip: bool = False) -> np.ndarray:
    """Blue for the most positive value, red for the most negative, white at zero."""
    v = np.asarray(values, dtype=np.float64)
    if flip:
        v = -v
    peak = np.abs(v).max() if v.size else 0.0
    t = v / peak if peak > 0 else np.zeros_like(v)
    rgb = np.full((len(v), 3), 255.0)
    pos, neg = t > 0, t < 0
    rgb[pos, 0] = 255.0 * (1 - t[pos])
    rgb[pos, 1] = 255.0 * (1 - t[pos])
    rgb[neg, 1] = 255.0 * (1 + t[neg])
    rgb[neg, 2] = 255.0 * (1 + t[neg])
    return np.rint(rgb).astype(np.int64)


def export_importance(x, imap: ImportanceMap, path, flip_colors: bool = False) -> None:
    """ASCII PLY with per-vertex colour and a ``quality`` scalar."""
    pts = check_points(x)
    if imap.per_vertex is None or len(imap.per_vertex) != len(pts):
        raise ValueError("importance map has no per-vertex values for this cloud")
    colors = importance_colors(imap.per_vertex, flip_colors)
    header = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
              "property double x", "property double y", "property double z",
              "property uchar red", "property uchar green", "property uchar blue",
              "property double quality", "end_header"]
    rows = [f"{p[0]!r} {p[1]!r} {p[2]!r} {c[0]} {c[1]} {c[2]} {q!r}"
            for p, c, q in zip(pts.tolist(), colors.tolist(), imap.per_vertex.tolist())]
    try:
        Path(path).write_text("\n".join(header + rows) + "\n")
    except OSError as err:
        raise OSError(f"cannot write importance PLY to {path}: {err}") from err


def export_importance_csv(imap: ImportanceMap, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vertex_id", "cluster_id", "importance"])
        for v, (c, q) in enumerate(zip(imap.assignment, imap.per_vertex)):
            w.writerow([v, int(c), repr(float(q))])


def read_ply_vertex_count(path) -> int:
    for line in Path(path).read_text().splitlines():
        if line.startswith("element vertex"):
            return int(line.split()[-1])
        if line == "end_header":
            break
    raise ValueError(f"{path}: no vertex element in PLY header")


class SurrogateExplainer(BaseEstimator):
    """Explain one encoder's response to a single cloud.

    ``encoder`` maps a ``(V, 3)`` array to a code vector.
    """

    def __init__(self, encoder=None, k: int = 12, n_samples: int = 256, mode="latent_similarity",
                 seed: int = 0, max_iters: int = 100):
        self.encoder = encoder
        self.k = k
        self.n_samples = n_samples
        self.mode = mode
        self.seed = seed
        self.max_iters = max_iters

    def fit(self, x, y=None):
        pts = check_points(x)
        self.segmentation_ = kmeans(pts, self.k, self.seed, self.max_iters)
        self.masks_ = sample_masks(self.k, self.n_samples, self.seed)
        self.responses_ = np.array([model_response(perturb(pts, self.segmentation_, m), pts,
                                                   self.encoder, self.mode) for m in self.masks_])
        self.weights_ = np.array([cosine_weight(m) for m in self.masks_])
        self.importance_ = fit_surrogate(self.masks_, self.responses_, self.weights_).attach(self.segmentation_)
        self.coef_ = self.importance_.coefficients
        self.intercept_ = self.importance_.intercept
        return self

    def transform(self, x=None):
        return self.importance_.per_vertex
