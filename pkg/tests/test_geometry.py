import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dilo import diffcore as dc
from dilo.geometry import (Mesh, MeshParseError, PointCloud, chamfer, load_obj, pairwise_distances, pmd,
                           procrustes_align, recon_loss, save_obj)

from .oracles import naive_chamfer, naive_distances, naive_pmd, naive_recon, random_rotation

clouds = arrays(np.float64, st.tuples(st.integers(2, 12), st.just(3)), elements=st.floats(-10, 10))


def test_distance_matrix_examples():
    np.testing.assert_allclose(pairwise_distances([[0, 0, 0], [1, 0, 0], [0, 2, 0]]),
                               [[0, 1, 2], [1, 0, math.sqrt(5)], [2, math.sqrt(5), 0]])
    np.testing.assert_array_equal(pairwise_distances([[1.0, 2.0, 3.0]]), [[0.0]])


def test_distance_matrix_matches_double_loop():
    x = np.random.default_rng(0).normal(size=(50, 3))
    np.testing.assert_allclose(pairwise_distances(x), naive_distances(x), atol=1e-12)


def test_recon_loss_examples():
    x = np.array([[0.0, 0, 0], [1, 0, 0]])
    assert recon_loss(x, x) == 0.0
    assert recon_loss(np.array([[0.0, 0, 0], [3, 0, 0]]), x) == pytest.approx(8.0)


def test_recon_loss_tensor_path_matches_float_path():
    rng = np.random.default_rng(1)
    y, x = rng.normal(size=(9, 3)), rng.normal(size=(9, 3))
    assert recon_loss(dc.Tensor(y), x).item() == pytest.approx(recon_loss(y, x), abs=1e-12)


def test_pmd_examples():
    assert pmd([[1.0, 2, 2]], [[0.0, 0, 0]]) == pytest.approx(9.0)
    x = np.array([[0.0, 0, 0], [5, 5, 5]])
    assert pmd(x + [1, 0, 0], x) == pytest.approx(1.0)
    assert pmd(x, x) == 0.0


def test_chamfer_examples():
    assert chamfer([[3.0, 0, 0]], [[0.0, 0, 0]]) == pytest.approx(9.0)
    assert chamfer([[0.0, 0, 0]], [[0.0, 0, 0], [2, 0, 0]]) == pytest.approx(1.0)
    x = np.random.default_rng(2).normal(size=(6, 3))
    assert chamfer(x, x) == 0.0


def test_chamfer_handles_unequal_sizes_and_rejects_empty():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(9, 3))
    assert chamfer(a, b) == pytest.approx(naive_chamfer(a, b))
    with pytest.raises(dc.ContractError):
        chamfer(np.zeros((0, 3)), b)


def test_pmd_size_mismatch():
    with pytest.raises(dc.DimensionError):
        pmd(np.zeros((3, 3)), np.zeros((4, 3)))


@settings(max_examples=30, deadline=None)
@given(clouds, st.integers(0, 2**31 - 1))
def test_metrics_match_naive_loops(x, seed):
    y = x + np.random.default_rng(seed).normal(size=x.shape)
    assert pmd(y, x) == pytest.approx(naive_pmd(y, x), abs=1e-6)
    assert chamfer(y, x) == pytest.approx(naive_chamfer(y, x), abs=1e-6)
    assert recon_loss(y, x) == pytest.approx(naive_recon(y, x), abs=1e-6, rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(clouds, st.integers(0, 2**31 - 1))
def test_recon_loss_is_rigid_invariant(x, seed):
    rng = np.random.default_rng(seed)
    moved = x @ random_rotation(rng).T + rng.normal(size=3) * 5
    assert recon_loss(moved, x) < 1e-9 * max(1.0, float(np.abs(x).max()) ** 2)


def test_procrustes_identity_and_rotation():
    x = np.random.default_rng(4).normal(size=(20, 3))
    np.testing.assert_allclose(procrustes_align(x, x), x, atol=1e-9)
    rz = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    np.testing.assert_allclose(procrustes_align(x @ rz.T, x), x, atol=1e-9)


def test_procrustes_reflection_only_when_allowed():
    x = np.random.default_rng(5).normal(size=(20, 3))
    mirrored = x * [-1, 1, 1]
    assert pmd(procrustes_align(mirrored, x), x) > 1e-3
    np.testing.assert_allclose(procrustes_align(mirrored, x, allow_reflection=True), x, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.3))
def test_alignment_never_increases_pmd(seed, noise):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(15, 3))
    y = x @ random_rotation(rng).T + rng.normal(size=3) + noise * rng.normal(size=x.shape)
    assert pmd(procrustes_align(y, x), x) <= pmd(y, x) + 1e-12


def test_obj_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(6)
    mesh = Mesh(PointCloud(rng.normal(size=(10, 3)) * 1e3), np.array([[0, 1, 2], [2, 3, 4]]))
    save_obj(mesh, tmp_path / "m.obj")
    back = load_obj(tmp_path / "m.obj")
    np.testing.assert_array_equal(back.points, mesh.points)
    np.testing.assert_array_equal(back.faces, mesh.faces)


def test_obj_tetrahedron(tmp_path):
    p = tmp_path / "tet.obj"
    p.write_text("# tet\nv 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nvn 0 0 1\n"
                 "f 1 2 3\nf 1 2 4\nf 1//1 3//1 4//1\nf 2 3 4\n")
    m = load_obj(p)
    assert (m.V, len(m.faces)) == (4, 4)


@pytest.mark.parametrize("body, needle", [
    ("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 5\n", "out of range"),
    ("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n", "triangular"),
    ("v 0 zero 0\n", ":1:"),
    ("# nothing\n", "no vertices"),
])
def test_obj_parse_errors(tmp_path, body, needle):
    p = tmp_path / "bad.obj"
    p.write_text(body)
    with pytest.raises(MeshParseError, match=needle):
        load_obj(p)


def test_mesh_rejects_bad_faces():
    with pytest.raises(ValueError):
        Mesh(PointCloud(np.zeros((3, 3))), np.array([[0, 1, 3]]))
