"""Point clouds, meshes, distance-matrix reconstruction loss and metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .validation import check_points, check_same_size

logger = logging.getLogger(__name__)


class MeshParseError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        self.points = check_points(self.points)

    @property
    def V(self) -> int:
        return self.points.shape[0]


@dataclass
class Mesh:
    cloud: PointCloud
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        if not isinstance(self.cloud, PointCloud):
            self.cloud = PointCloud(self.cloud)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= self.cloud.V):
            raise ValueError(f"face index out of range for V={self.cloud.V}")
        self.faces = faces

    @property
    def points(self) -> np.ndarray:
        return self.cloud.points

    @property
    def V(self) -> int:
        return self.cloud.V


def pairwise_distances(x) -> np.ndarray:
    """Symmetric ``(V, V)`` matrix of Euclidean distances between points."""
    if isinstance(x, dc.Tensor):
        return dc.pairwise_distance(x)
    p = check_points(x)
    diff = p[:, None, :] - p[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def recon_loss_batch(Y, X) -> dc.Tensor:
    """Per-sample ``||D(y) - D(x)||_F^2`` for batches ``(B, V, 3)``.

    ``Y`` may be a recorded tensor; ``X`` is treated as a constant target.
    """
    X = np.asarray(getattr(X, "data", X), dtype=np.float64)
    Y = Y if isinstance(Y, dc.Tensor) else dc.Tensor(Y)
    if Y.shape != X.shape:
        raise dc.DimensionError(f"recon_loss: shapes differ {Y.shape} vs {X.shape}")
    diff = dc.sub(dc.pairwise_distance(Y), dc.pairwise_distance(dc.Tensor(X)).data)
    sq = dc.mul(diff, diff)
    return dc.sum_over_axis(dc.sum_over_axis(sq, -1), -1)


def recon_loss(y, x):
    """Squared Frobenius distance between the distance matrices of two clouds.

    Returns a float for array inputs and a scalar tensor when ``y`` is a tensor.
    """
    if isinstance(y, dc.Tensor):
        x = check_points(x)
        if y.shape != x.shape:
            raise dc.DimensionError(f"recon_loss: shapes differ {y.shape} vs {x.shape}")
        return dc.reshape(recon_loss_batch(dc.reshape(y, (1,) + y.shape), x[None]), ())
    y, x = check_points(y, "y"), check_points(x, "x")
    check_same_size(y, x, "recon_loss")
    d = pairwise_distances(y) - pairwise_distances(x)
    return float(np.sum(d * d))


def pmd(y, x) -> float:
    """Mean squared distance between index-corresponding points."""
    y, x = check_points(y, "y"), check_points(x, "x")
    check_same_size(y, x, "pmd")
    return float(np.mean(np.sum((y - x) ** 2, axis=1)))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def chamfer(y, x) -> float:
    """Mean of the two directed average squared nearest-neighbour distances."""
    try:
        y, x = check_points(y, "y"), check_points(x, "x")
    except ValueError as err:
        raise dc.ContractError(f"chamfer: {err}") from None
    d = _sq_dists(y, x)
    return float(0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean()))


def procrustes_align(y, x, allow_reflection: bool = False) -> np.ndarray:
    """Rigidly move ``y`` onto ``x`` (least squares over rotations and translations)."""
    y, x = check_points(y, "y"), check_points(x, "x")
    check_same_size(y, x, "procrustes_align")
    my, mx = y.mean(axis=0), x.mean(axis=0)
    yc, xc = y - my, x - mx
    if not np.any(yc) or not np.any(xc):
        return y - my + mx
    u, _, vt = np.linalg.svd(yc.T @ xc)
    if not allow_reflection and np.linalg.det(u @ vt) < 0:
        u[:, -1] *= -1
    rot = u @ vt
    return yc @ rot + mx


# ----------------------------------------------------------------------------
# OBJ


def save_obj(mesh, path) -> None:
    if not isinstance(mesh, Mesh):
        mesh = Mesh(PointCloud(mesh))
    lines = [f"v {p[0]!r} {p[1]!r} {p[2]!r}" for p in mesh.points.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> Mesh:
    """Read ``v`` and triangular ``f`` records; other record types are skipped."""
    verts, faces, skipped = [], [], set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                try:
                    verts.append([float(t) for t in parts[1:4]])
                except ValueError:
                    raise MeshParseError(f"{path}:{lineno}: bad vertex record {line.strip()!r}") from None
                if len(parts) < 4:
                    raise MeshParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
            elif tag == "f":
                if len(parts) != 4:
                    raise MeshParseError(f"{path}:{lineno}: only triangular faces are supported")
                try:
                    faces.append([int(t.split("/")[0]) - 1 for t in parts[1:]])
                except ValueError:
                    raise MeshParseError(f"{path}:{lineno}: bad face record {line.strip()!r}") from None
            else:
                skipped.add(tag)
    if skipped:
        logger.warning("%s: ignored record types %s", path, sorted(skipped))
    if not verts:
        raise MeshParseError(f"{path}: no vertices")
    faces_arr = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces_arr.size and (faces_arr.min() < 0 or faces_arr.max() >= len(verts)):
        raise MeshParseError(f"{path}: face index out of range for {len(verts)} vertices")
    return Mesh(PointCloud(np.asarray(verts)), faces_arr)
