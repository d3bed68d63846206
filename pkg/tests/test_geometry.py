"""Rigid motion, point pair features, correspondences, and projections."""

import numpy as np
import pytest

from fdmpose import geometry as G
from fdmpose.geometry import Camera, PointCloud, SE3


def _unit_rows(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cloud(rng, n=64):
    pts = rng.uniform(-0.1, 0.1, (n, 3))
    return PointCloud(pts, _unit_rows(rng, n))


def test_se3_group_laws(rng):
    a = SE3.random(rng)
    b = SE3.random(rng)
    pts = rng.standard_normal((20, 3))
    assert np.allclose(a.compose(b).apply(pts), a.apply(b.apply(pts)))
    assert np.allclose(a.compose(a.inverse()).apply(pts), pts)
    assert np.allclose(SE3.identity().apply(pts), pts)


def test_se3_rotation_is_orthonormal(rng):
    for _ in range(20):
        R = G.random_rotation(rng)
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.isclose(np.linalg.det(R), 1.0)


def test_se3_line_roundtrip(rng):
    t = SE3.random(rng)
    back = SE3.from_line(t.to_line())
    assert np.allclose(back.rotation, t.rotation)
    assert np.allclose(back.translation, t.translation)


def test_rotation_geodesic(rng):
    R = G.random_rotation(rng)
    assert G.rotation_geodesic(R, R) < 1e-6  # arccos precision near 1
    th = 0.3
    Rz = np.array([[np.cos(th), -np.sin(th), 0],
                   [np.sin(th), np.cos(th), 0],
                   [0, 0, 1.0]])
    assert np.isclose(G.rotation_geodesic(R, R @ Rz), th, atol=1e-9)


def test_ppf_rigid_invariance(rng):
    # 100 random rigid motions leave the 4-vector unchanged to 1e-9
    p1, p2 = rng.standard_normal(3), rng.standard_normal(3)
    n1, n2 = _unit_rows(rng, 2)
    base = G.ppf(p1, n1, p2, n2)
    for _ in range(100):
        t = SE3.random(rng)
        R = t.rotation
        moved = G.ppf(t.apply(p1[None])[0], R @ n1, t.apply(p2[None])[0], R @ n2)
        assert np.abs(moved - base).max() < 1e-9


def test_ppf_components(rng):
    p1 = np.zeros(3)
    p2 = np.array([1.0, 0.0, 0.0])
    n1 = np.array([0.0, 0.0, 1.0])
    n2 = np.array([0.0, 1.0, 0.0])
    f = G.ppf(p1, n1, p2, n2)
    # angle(n1, d)=90deg, angle(n2, d)=90deg, angle(n1, n2)=90deg, |d|=1
    assert np.allclose(f, [np.pi / 2, np.pi / 2, np.pi / 2, 1.0])


def test_ppf_pairs_matches_scalar(rng):
    pa, pb = rng.standard_normal((3, 3)), rng.standard_normal((4, 3))
    na, nb = _unit_rows(rng, 3), _unit_rows(rng, 4)
    block = G.ppf_pairs(pa, na, pb, nb)
    assert block.shape == (3, 4, 4)
    for i in range(3):
        for j in range(4):
            assert np.allclose(block[i, j], G.ppf(pa[i], na[i], pb[j], nb[j]))


def test_fps_properties(rng):
    cloud = _cloud(rng, 100)
    idx = G.fps_sample(cloud, 10)
    assert len(idx) == 10
    assert len(np.unique(idx)) == 10
    # farthest-point sets spread: min pairwise distance exceeds random choice
    sel = cloud.points[idx]
    dmat = np.linalg.norm(sel[:, None] - sel[None], axis=2)
    np.fill_diagonal(dmat, np.inf)
    rnd = cloud.points[rng.choice(100, 10, replace=False)]
    dr = np.linalg.norm(rnd[:, None] - rnd[None], axis=2)
    np.fill_diagonal(dr, np.inf)
    assert dmat.min() >= dr.min()


def test_point_to_node(rng):
    nodes = rng.standard_normal((5, 3))
    dense = nodes[np.array([0, 0, 1, 2, 4, 4, 4])] + rng.normal(0, 1e-4, (7, 3))
    assign = G.point_to_node(dense, nodes)
    assert assign.num_nodes == 5
    assert list(assign.node_of_point) == [0, 0, 1, 2, 4, 4, 4]
    assert sorted(map(tuple, [assign.groups[i] for i in range(5)][0:1]))  # groups exist
    assert set(assign.groups[4].tolist()) == {4, 5, 6}


def test_dense_correspondences_mutual_nn(rng):
    P = rng.uniform(-0.1, 0.1, (50, 3))
    gt = SE3.random(rng, 0.2)
    Q = gt.apply(P)  # exact correspondents
    ip, iq = G.dense_correspondences(P, Q, gt, radius=0.001)
    assert np.array_equal(ip, iq)
    assert len(ip) == 50
    # radius gate: disjoint clouds give no pairs
    ip2, iq2 = G.dense_correspondences(P, Q + 10.0, gt, radius=0.001)
    assert len(ip2) == 0


def test_overlap_matrix_fractions():
    # 2 nodes each; node 0 of P has 2/2 points matched into Q node 0
    nodesP = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    nodesQ = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    denseP = np.array([[0.0, 0, 0], [0.1, 0, 0], [0.9, 0, 0], [1.0, 0, 0]])
    denseQ = denseP.copy()
    aP = G.point_to_node(denseP, nodesP)
    aQ = G.point_to_node(denseQ, nodesQ)
    corr_p = np.array([0, 1])
    corr_q = np.array([0, 1])
    v = G.overlap_matrix(aP, aQ, corr_p, corr_q)
    assert v.shape == (2, 2)
    assert np.isclose(v[0, 0], 1.0)  # both points of P node 0 matched
    assert v[1, 0] == 0.0 and v[1, 1] == 0.0


def test_project_unproject_roundtrip(rng):
    cam = Camera(fx=120.0, fy=120.0, cx=64.0, cy=64.0, width=128, height=128)
    pts = rng.uniform(-0.08, 0.08, (40, 3)) + np.array([0, 0, 0.4])
    uv, mask = G.project(cam, SE3.identity(), pts)
    assert mask.all()
    back = G.unproject(cam, uv, pts[:, 2])
    assert np.abs(back - pts).max() < 1e-12


def test_project_behind_camera_masked(rng):
    cam = Camera(fx=120.0, fy=120.0, cx=64.0, cy=64.0, width=128, height=128)
    pts = np.array([[0.0, 0.0, 0.4], [0.0, 0.0, -0.4]])
    _, mask = G.project(cam, SE3.identity(), pts)
    assert mask[0] and not mask[1]


def test_normalize_model_radius(rng):
    cloud = PointCloud(rng.uniform(0.0, 3.0, (200, 3)))
    out, rec = G.normalize_model(cloud)
    r = np.linalg.norm(out.points, axis=1).max()
    assert np.isclose(r, 0.1, atol=1e-12)
    assert np.allclose(out.points.mean(axis=0), 0.0, atol=1e-9)
    restored = out.points / rec.scale + rec.center if rec.scale != 0 else None
    assert np.allclose(out.points / rec.scale + rec.center, cloud.points)


def test_estimate_normals_plane(rng):
    pts = np.column_stack([rng.uniform(-1, 1, 200), rng.uniform(-1, 1, 200),
                           np.zeros(200)])
    cloud = PointCloud(pts)
    normals, degenerate = G.estimate_normals(cloud, k_neighbors=8,
                                             viewpoint=np.array([0.0, 0.0, 5.0]))
    nz = normals[:, 2]
    assert np.allclose(np.abs(nz), 1.0, atol=1e-9)
    assert (nz > 0).all()  # oriented toward the viewpoint
    assert not degenerate.any()


def test_ply_roundtrip(tmp_path, rng):
    cloud = _cloud(rng, 30)
    cloud = PointCloud(cloud.points, cloud.normals,
                       rng.uniform(0, 1, (30, 3)))
    path = tmp_path / "m.ply"
    G.save_ply(path, cloud)
    back = G.load_ply(path)
    assert np.allclose(back.points, cloud.points)
    assert np.allclose(back.normals, cloud.normals)
    assert np.abs(back.colors - cloud.colors).max() < 1.0 / 255


def test_degenerate_cloud_rejected():
    with pytest.raises((G.DegenerateGeometryError, ValueError)):
        G.normalize_model(PointCloud(np.zeros((10, 3))))
