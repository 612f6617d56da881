"""Procedural quadruped meshes with a known shape/deformation factorisation.

Every instance shares one template topology: a capped torso cylinder along
x and four open limb tubes hanging from hip/shoulder joints. Shape factors
scale the parts; deformation factors swing each limb about its joint's
y-axis. Because both factors are explicit, the exact result of transferring
one instance's pose onto another's identity is available as ground truth.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Mesh, PointCloud, load_obj, save_obj

logger = logging.getLogger(__name__)

TORSO_LENGTH = (0.8, 1.6)
LIMB_LENGTH = (0.4, 1.0)
RADIUS = (0.05, 0.25)
ANGLE = (-math.pi / 2, math.pi / 2)
N_BINS = 3
N_LIMBS = 4
# joint placement as fractions of (torso_length, torso_radius, torso_radius)
_JOINTS = np.array([[0.35, 0.6, -0.6], [0.35, -0.6, -0.6], [-0.35, 0.6, -0.6], [-0.35, -0.6, -0.6]])

SPLITS = ("train", "test-unseen-identity", "test-unseen-deform", "test-unseen-both")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeFactors:
    torso_length: float
    limb_length: float
    torso_radius: float
    limb_radius: float

    def validate(self) -> None:
        checks = [("torso_length", TORSO_LENGTH), ("limb_length", LIMB_LENGTH),
                  ("torso_radius", RADIUS), ("limb_radius", RADIUS)]
        for name, (lo, hi) in checks:
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")

    def to_dict(self) -> dict:
        return {"torso_length": self.torso_length, "limb_length": self.limb_length,
                "torso_radius": self.torso_radius, "limb_radius": self.limb_radius}


def angle_bin(angle: float) -> int:
    lo, hi = ANGLE
    b = int((angle - lo) / (hi - lo) * N_BINS)
    return min(max(b, 0), N_BINS - 1)


@dataclass(frozen=True)
class DeformFactors:
    angles: tuple[float, float, float, float]

    def validate(self) -> None:
        if len(self.angles) != N_LIMBS:
            raise ValueError(f"need {N_LIMBS} limb angles, got {len(self.angles)}")
        for a in self.angles:
            if not ANGLE[0] <= a <= ANGLE[1]:
                raise ValueError(f"limb angle {a} outside [-pi/2, pi/2]")

    @property
    def deform_class(self) -> int:
        return sum(angle_bin(a) * N_BINS ** k for k, a in enumerate(self.angles))


@dataclass(frozen=True)
class Template:
    """Fixed topology plus each vertex's part-local parameterisation."""

    segments: int
    torso_rings: int
    limb_rings: int
    part: np.ndarray        # 0 torso, 1..4 limbs
    axial: np.ndarray       # position along the part axis in [0, 1]
    ring_dir: np.ndarray    # (V, 2) unit cross-section direction, zero for cap centres
    faces: np.ndarray

    @property
    def V(self) -> int:
        return len(self.part)

    @property
    def F(self) -> int:
        return len(self.faces)


def _template_size(m: int, n_t: int, n_l: int) -> int:
    return m * (n_t + N_LIMBS * n_l) + 2


def build_template(V_target: int = 128) -> Template:
    """Template whose vertex count is as close as possible to ``V_target``."""
    if V_target < 50:
        raise ValueError(f"V_target={V_target} too small to mesh five parts (need >= 50)")
    best = None
    for m in range(4, 13):
        for n_l in range(2, 40):
            for n_t in range(2, 80):
                v = _template_size(m, n_t, n_l)
                score = (abs(v - V_target), abs(m - 6), abs(n_t - 2 * n_l), -n_l)
                if best is None or score < best[0]:
                    best = (score, m, n_t, n_l)
    _, m, n_t, n_l = best

    part, axial, ring_dir, faces = [], [], [], []
    phis = 2 * math.pi * np.arange(m) / m
    dirs = np.stack([np.cos(phis), np.sin(phis)], axis=1)

    def tube(part_id: int, ts: np.ndarray) -> int:
        start = len(part)
        for t in ts:
            for d in dirs:
                part.append(part_id)
                axial.append(t)
                ring_dir.append(d)
        for r in range(len(ts) - 1):
            for k in range(m):
                a = start + r * m + k
                b = start + r * m + (k + 1) % m
                c, d = a + m, b + m
                faces.extend([(a, b, d), (a, d, c)])
        return start

    t0 = tube(0, np.linspace(0.0, 1.0, n_t))
    for end, ring0 in ((0.0, t0), (1.0, t0 + (n_t - 1) * m)):
        centre = len(part)
        part.append(0)
        axial.append(end)
        ring_dir.append((0.0, 0.0))
        for k in range(m):
            a, b = ring0 + k, ring0 + (k + 1) % m
            faces.append((centre, b, a) if end == 0.0 else (centre, a, b))
    for limb in range(1, N_LIMBS + 1):
        tube(limb, np.linspace(0.0, 1.0, n_l))

    return Template(m, n_t, n_l, np.array(part), np.array(axial, dtype=np.float64),
                    np.array(ring_dir, dtype=np.float64), np.array(faces, dtype=np.int64))


def _rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def joint_positions(shape: ShapeFactors) -> np.ndarray:
    return _JOINTS * np.array([shape.torso_length, shape.torso_radius, shape.torso_radius])


def instantiate(shape: ShapeFactors, deform: DeformFactors, template: Template | None = None) -> np.ndarray:
    """Vertex positions ``(V, 3)`` of the template posed and scaled by the factors."""
    shape.validate()
    deform.validate()
    tpl = template if template is not None else build_template()
    pts = np.zeros((tpl.V, 3))
    torso = tpl.part == 0
    pts[torso, 0] = (tpl.axial[torso] - 0.5) * shape.torso_length
    pts[torso, 1:] = tpl.ring_dir[torso] * shape.torso_radius
    joints = joint_positions(shape)
    for k in range(N_LIMBS):
        sel = tpl.part == k + 1
        local = np.zeros((int(sel.sum()), 3))
        local[:, :2] = tpl.ring_dir[sel] * shape.limb_radius
        local[:, 2] = -tpl.axial[sel] * shape.limb_length
        pts[sel] = local @ _rot_y(deform.angles[k]).T + joints[k]
    return pts


def sample_shape(rng: np.random.Generator) -> ShapeFactors:
    return ShapeFactors(float(rng.uniform(*TORSO_LENGTH)), float(rng.uniform(*LIMB_LENGTH)),
                        float(rng.uniform(*RADIUS)), float(rng.uniform(*RADIUS)))


def sample_deform(rng: np.random.Generator) -> DeformFactors:
    return DeformFactors(tuple(float(a) for a in rng.uniform(*ANGLE, size=N_LIMBS)))


# ----------------------------------------------------------------------------
# datasets


@dataclass
class MeshDataset:
    """Clouds with shared connectivity plus their instance/group/label metadata."""

    clouds: np.ndarray
    ids: list[str]
    groups: list[str]
    deform_classes: np.ndarray
    splits: list[str]
    faces: np.ndarray | None = None
    shape_factors: dict[str, ShapeFactors] = field(default_factory=dict)
    angles: dict[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        self.clouds = np.asarray(self.clouds, dtype=np.float64)
        self.deform_classes = np.asarray(self.deform_classes, dtype=np.int64)
        n = len(self.ids)
        if not (self.clouds.shape[0] == len(self.groups) == len(self.splits) == len(self.deform_classes) == n):
            raise DatasetError("dataset fields have inconsistent lengths")
        if len(set(self.ids)) != n:
            raise DatasetError("duplicate instance ids")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def V(self) -> int:
        return self.clouds.shape[1]

    def subset(self, *splits: str) -> "MeshDataset":
        keep = [i for i, s in enumerate(self.splits) if s in splits]
        return self.take(keep)

    def take(self, index) -> "MeshDataset":
        index = list(index)
        return MeshDataset(self.clouds[index], [self.ids[i] for i in index],
                           [self.groups[i] for i in index], self.deform_classes[index],
                           [self.splits[i] for i in index], self.faces,
                           self.shape_factors, self.angles)

    def index_of(self, instance_id: str) -> int:
        return self.ids.index(instance_id)

    def ground_truth(self, shape_id: str, deform_id: str, template: Template | None = None) -> np.ndarray:
        """Analytic transfer target: shape of ``shape_id`` posed like ``deform_id``."""
        shape = self.shape_factors[self.groups[self.index_of(shape_id)]]
        deform = DeformFactors(tuple(self.angles[deform_id]))
        tpl = template if template is not None else build_template(self.V)
        if tpl.V != self.V:
            raise DatasetError(f"template V={tpl.V} does not match dataset V={self.V}")
        return instantiate(shape, deform, tpl)


def make_dataset(n_groups: int = 8, n_deforms: int = 32, seed: int = 7, V_target: int = 128,
                 n_test_groups: int = 4, n_test_deforms: int = 8) -> MeshDataset:
    """In-memory synthetic dataset with all four splits.

    ``test-unseen-identity`` reuses training poses on new identities;
    ``test-unseen-deform`` poses training identities in fresh ways;
    ``test-unseen-both`` combines new identities with fresh poses.
    """
    if n_groups < 2:
        raise DatasetError("need at least 2 shape groups")
    if n_deforms < 2:
        raise DatasetError("need at least 2 instances per group")
    if n_test_deforms > n_groups * n_deforms:
        raise DatasetError(f"n_test_deforms={n_test_deforms} exceeds the {n_groups * n_deforms} training poses")
    rng = np.random.Generator(np.random.Philox(seed))
    tpl = build_template(V_target)
    shapes = {f"g{g:03d}": sample_shape(rng) for g in range(n_groups)}
    test_shapes = {f"u{g:03d}": sample_shape(rng) for g in range(n_test_groups)}

    records: list[tuple[str, str, DeformFactors, str]] = []
    for g in shapes:
        for d in range(n_deforms):
            records.append((f"{g}_d{d:03d}", g, sample_deform(rng), "train"))
    train_deforms = [r[2] for r in records]
    for g in test_shapes:
        picks = rng.choice(len(train_deforms), size=n_test_deforms, replace=False)
        for d, p in enumerate(sorted(picks)):
            records.append((f"{g}_s{d:03d}", g, train_deforms[p], "test-unseen-identity"))
    for g in shapes:
        for d in range(n_test_deforms):
            records.append((f"{g}_n{d:03d}", g, sample_deform(rng), "test-unseen-deform"))
    for g in test_shapes:
        for d in range(n_test_deforms):
            records.append((f"{g}_n{d:03d}", g, sample_deform(rng), "test-unseen-both"))

    all_shapes = {**shapes, **test_shapes}
    clouds = np.stack([instantiate(all_shapes[g], d, tpl) for _, g, d, _ in records])
    return MeshDataset(
        clouds=clouds,
        ids=[r[0] for r in records],
        groups=[r[1] for r in records],
        deform_classes=np.array([r[2].deform_class for r in records]),
        splits=[r[3] for r in records],
        faces=tpl.faces,
        shape_factors=all_shapes,
        angles={r[0]: r[2].angles for r in records},
    )


def generate_dataset(n_groups: int, n_deforms_per_group: int, seed: int, out_dir,
                     force: bool = False, V_target: int = 128, n_test_groups: int = 4,
                     n_test_deforms: int = 8) -> dict:
    """Write one OBJ per instance plus ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} exists and is not empty (use force to overwrite)")
    ds = make_dataset(n_groups, n_deforms_per_group, seed, V_target, n_test_groups, n_test_deforms)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, iid in enumerate(ds.ids):
        rel = f"meshes/{iid}.obj"
        save_obj(Mesh(PointCloud(ds.clouds[i]), ds.faces), out / rel)
        entries.append({
            "id": iid, "group": ds.groups[i], "deform_class": int(ds.deform_classes[i]),
            "split": ds.splits[i], "path": rel,
            "angles": list(ds.angles[iid]),
            "shape_factors": ds.shape_factors[ds.groups[i]].to_dict(),
        })
    manifest = {"V": ds.V, "F": int(len(ds.faces)), "seed": int(seed), "entries": entries}
    validate_manifest(manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def validate_manifest(manifest: dict) -> None:
    for key in ("V", "entries"):
        if key not in manifest:
            raise DatasetError(f"manifest missing {key!r}")
    ids = [e["id"] for e in manifest["entries"]]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise DatasetError(f"duplicate instance ids in manifest: {dup[:5]}")
    for e in manifest["entries"]:
        for key in ("id", "group", "path"):
            if key not in e:
                raise DatasetError(f"manifest entry {e.get('id', '?')} missing {key!r}")


def load_external(directory, manifest_path=None) -> MeshDataset:
    """Load meshes listed in a manifest (paths relative to ``directory``)."""
    directory = Path(directory)
    manifest_path = Path(manifest_path) if manifest_path else directory / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    validate_manifest(manifest)
    clouds, faces = [], None
    V = manifest.get("V")
    for e in manifest["entries"]:
        path = directory / e["path"]
        if not path.exists():
            raise FileNotFoundError(f"manifest references missing file {path}")
        mesh = load_obj(path)
        if V is not None and mesh.V != V:
            raise DatasetError(f"{path}: has V={mesh.V}, expected V={V}")
        V = mesh.V
        if faces is None:
            faces = mesh.faces
        clouds.append(mesh.points)
    groups = [e["group"] for e in manifest["entries"]]
    for g in sorted(set(groups)):
        if groups.count(g) == 1:
            logger.warning("group %s has a single instance; its shape code is underdetermined", g)
    shape_factors, angles = {}, {}
    for e in manifest["entries"]:
        if "shape_factors" in e:
            shape_factors[e["group"]] = ShapeFactors(**e["shape_factors"])
        if "angles" in e:
            angles[e["id"]] = tuple(e["angles"])
    return MeshDataset(
        clouds=np.stack(clouds),
        ids=[e["id"] for e in manifest["entries"]],
        groups=groups,
        deform_classes=np.array([e.get("deform_class", -1) for e in manifest["entries"]]),
        splits=[e.get("split", "train") for e in manifest["entries"]],
        faces=faces,
        shape_factors=shape_factors,
        angles=angles,
    )
