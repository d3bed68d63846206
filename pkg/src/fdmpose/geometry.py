"""Point-cloud primitives: rigid transforms, camera projection, point pair
features, sampling, grouping, the node-overlap measure, and PLY I/O.

All operations are pure; clouds are treated as immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


class DegenerateGeometryError(ValueError):
    pass


@dataclass
class PointCloud:
    """Positions in meters, unit normals, optional per-point colors in [0,1]."""

    points: np.ndarray
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise ValueError(f"points must be N x 3 with N >= 1, got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise ValueError("points contain non-finite coordinates")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.points.shape:
                raise ValueError("normals shape must match points")
            norms = np.linalg.norm(self.normals, axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ValueError("normals must be unit length within 1e-6")
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
            if self.colors.shape != self.points.shape:
                raise ValueError("colors shape must match points")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class SE3:
    """Rigid transform: rotation matrix plus translation vector."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.ascontiguousarray(self.rotation, dtype=np.float64)
        self.translation = np.ascontiguousarray(self.translation, dtype=np.float64).reshape(3)
        R = self.rotation
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation is not a proper orthonormal matrix")

    @classmethod
    def identity(cls) -> "SE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def random(cls, rng: np.random.Generator, max_translation: float = 1.0) -> "SE3":
        return cls(random_rotation(rng), rng.uniform(-max_translation, max_translation, 3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def compose(self, other: "SE3") -> "SE3":
        """self after other: (self ∘ other)(p) = self(other(p))."""
        return SE3(self.rotation @ other.rotation,
                   self.rotation @ other.translation + self.translation)

    def inverse(self) -> "SE3":
        return SE3(self.rotation.T, -self.rotation.T @ self.translation)

    def to_line(self) -> str:
        vals = np.hstack([self.rotation, self.translation[:, None]]).reshape(-1)
        return " ".join(repr(float(v)) for v in vals)

    @classmethod
    def from_line(cls, line: str) -> "SE3":
        vals = np.array([float(v) for v in line.split()], dtype=np.float64)
        if vals.size != 12:
            raise ValueError(f"pose line must contain 12 numbers, got {vals.size}")
        m = vals.reshape(3, 4)
        return cls(m[:, :3], m[:, 3])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation via QR of a Gaussian matrix."""
    A = rng.standard_normal((3, 3))
    Q, R = np.linalg.qr(A)
    Q = Q @ np.diag(np.sign(np.diag(R)))
    if np.linalg.det(Q) < 0:
        Q[:, 2] = -Q[:, 2]
    return Q


def rotation_geodesic(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Angle in radians between two rotation matrices."""
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass
class Camera:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_line(self) -> str:
        return f"{self.fx!r} {self.fy!r} {self.cx!r} {self.cy!r} {self.width} {self.height}"

    @classmethod
    def from_line(cls, line: str) -> "Camera":
        f = line.split()
        return cls(float(f[0]), float(f[1]), float(f[2]), float(f[3]), int(f[4]), int(f[5]))


@dataclass
class NodeAssignment:
    """Nearest-node partition of a dense cloud."""

    node_of_point: np.ndarray
    groups: list = field(default_factory=list)

    @property
    def num_nodes(self) -> int:
        return len(self.groups)


# ---------------------------------------------------------------------------
# sampling and grouping


def fps_sample(cloud: PointCloud | np.ndarray, k: int, seed_index: int = 0) -> np.ndarray:
    """Farthest point sampling; deterministic, ties to the lowest index."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if k > pts.shape[0]:
        raise ValueError(f"cannot sample {k} points from {pts.shape[0]}")
    return kernels.fps(pts, k, seed_index)


def estimate_normals(cloud: PointCloud, k_neighbors: int,
                     viewpoint: np.ndarray | None = None):
    """PCA normals from k-nearest neighborhoods.

    Returns (normals, degenerate_flags). Normals are oriented toward
    ``viewpoint`` when given, else toward +z. A neighborhood whose covariance
    has rank < 2 is flagged degenerate (its normal is unreliable).
    """
    if k_neighbors < 3:
        raise ValueError("k_neighbors must be >= 3")
    pts = cloud.points
    k = min(k_neighbors, len(cloud))
    idx, _ = kernels.knn(pts, pts, k)
    nbrs = pts[idx]  # (N, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    w, v = np.linalg.eigh(cov)  # ascending eigenvalues
    normals = v[:, :, 0].copy()
    scale = np.maximum(w[:, 2], 1e-30)
    degenerate = w[:, 1] / scale < 1e-9
    direction = (viewpoint - pts) if viewpoint is not None else np.array([0.0, 0.0, 1.0])
    flip = np.einsum("ni,ni->n", normals, np.broadcast_to(direction, normals.shape)) < 0
    normals[flip] = -normals[flip]
    normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-30)
    return normals, degenerate


def ppf(p1, n1, p2, n2) -> np.ndarray:
    """Point pair feature (angle(n1,d), angle(n2,d), angle(n1,n2), |d|).

    Angles are in [0, pi]; invariant to rigid motion by construction.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    d = p2 - p1
    dist = np.linalg.norm(d)
    if dist == 0.0:
        raise DegenerateGeometryError("coincident points have no pair feature")
    return np.array([_angle(n1, d), _angle(n2, d), _angle(n1, n2), dist])


def _angle(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b)))


def ppf_pairs(pos_a, nrm_a, pos_b, nrm_b) -> np.ndarray:
    """All-pairs PPF block, shape (len(a), len(b), 4).

    Coincident pairs (e.g. the diagonal of a self block) get the zero feature.
    """
    d = pos_b[None, :, :] - pos_a[:, None, :]
    dist = np.linalg.norm(d, axis=2)
    safe = np.maximum(dist, 1e-300)[:, :, None]
    dn = d / safe
    a1 = _angles_batch(nrm_a[:, None, :], dn)
    a2 = _angles_batch(nrm_b[None, :, :], dn)
    a3 = _angles_batch(nrm_a[:, None, :], nrm_b[None, :, :])
    a3 = np.broadcast_to(a3, dist.shape).copy()
    out = np.stack([a1, a2, a3, dist], axis=2)
    out[dist == 0.0] = 0.0
    return out


def _angles_batch(a, b):
    cross = np.cross(np.broadcast_to(a, np.broadcast_shapes(a.shape, b.shape)),
                     np.broadcast_to(b, np.broadcast_shapes(a.shape, b.shape)))
    dot = (a * b).sum(axis=-1)
    return np.arctan2(np.linalg.norm(cross, axis=-1), dot)


def point_to_node(dense: PointCloud | np.ndarray, nodes: np.ndarray) -> NodeAssignment:
    """Assign each dense point to its nearest node; ties to the lowest index."""
    pts = dense.points if isinstance(dense, PointCloud) else np.asarray(dense, dtype=np.float64)
    nodes = np.asarray(nodes, dtype=np.float64)
    if nodes.size == 0:
        raise ValueError("nodes must be nonempty")
    idx, _ = kernels.nearest_neighbor(pts, nodes)
    groups = [np.nonzero(idx == i)[0] for i in range(nodes.shape[0])]
    return NodeAssignment(node_of_point=idx, groups=groups)


# ---------------------------------------------------------------------------
# correspondences and overlap (ground-truth side)


def dense_correspondences(P: np.ndarray, Q: np.ndarray, gt: SE3, radius: float):
    """Mutual nearest-neighbor pairs with |gt(p) - q| < radius.

    Returns (p_idx, q_idx) arrays; each dense point appears at most once.
    """
    Pt = gt.apply(np.asarray(P, dtype=np.float64))
    Q = np.asarray(Q, dtype=np.float64)
    p2q, d_pq = kernels.nearest_neighbor(Pt, Q)
    q2p, _ = kernels.nearest_neighbor(Q, Pt)
    pi = np.arange(Pt.shape[0])
    mutual = (q2p[p2q] == pi) & (d_pq < radius)
    return pi[mutual], p2q[mutual]


def overlap_matrix(assignP: NodeAssignment, assignQ: NodeAssignment,
                   corr_p: np.ndarray, corr_q: np.ndarray) -> np.ndarray:
    """Overlap V(i, j) for every node pair.

    V(i, j) = |{p in group_i with a correspondent in group_j}| / |group_i|.
    Rows with empty P groups are zero.
    """
    nP, nQ = assignP.num_nodes, assignQ.num_nodes
    counts = np.zeros((nP, nQ), dtype=np.float64)
    if corr_p.size:
        ni = assignP.node_of_point[corr_p]
        nj = assignQ.node_of_point[corr_q]
        np.add.at(counts, (ni, nj), 1.0)
    sizes = np.array([max(len(g), 1) for g in assignP.groups], dtype=np.float64)
    return counts / sizes[:, None]


def overlap(i: int, j: int, assignP: NodeAssignment, assignQ: NodeAssignment,
            P: np.ndarray, Q: np.ndarray, gt: SE3, radius: float) -> float:
    """Overlap fraction between P-node i and Q-node j under the ground truth."""
    if len(assignP.groups[i]) == 0:
        raise ValueError(f"P group {i} is empty")
    cp, cq = dense_correspondences(P, Q, gt, radius)
    return float(overlap_matrix(assignP, assignQ, cp, cq)[i, j])


# ---------------------------------------------------------------------------
# transforms and projection


def apply_se3(T: SE3, cloud: PointCloud) -> PointCloud:
    """Transform points by Rp + t and rotate normals."""
    normals = cloud.normals @ T.rotation.T if cloud.normals is not None else None
    return PointCloud(T.apply(cloud.points), normals, cloud.colors)


def project(camera: Camera, T: SE3, points: np.ndarray):
    """Project object-frame points through T into pixels.

    Returns (uv, mask); mask is False for points behind the camera or
    outside the image.
    """
    pc = T.apply(np.asarray(points, dtype=np.float64))
    z = pc[:, 2]
    front = z > 0.0
    zsafe = np.where(front, z, 1.0)
    u = camera.fx * pc[:, 0] / zsafe + camera.cx
    v = camera.fy * pc[:, 1] / zsafe + camera.cy
    uv = np.stack([u, v], axis=1)
    mask = front & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    uv[~front] = np.nan
    return uv, mask


def unproject(camera: Camera, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Back-project pixels with known depth into the camera frame."""
    uv = np.asarray(uv, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    x = (uv[:, 0] - camera.cx) * z / camera.fx
    y = (uv[:, 1] - camera.cy) * z / camera.fy
    return np.stack([x, y, z], axis=1)


@dataclass
class NormalizationRecord:
    """Similarity p_norm = scale * (p - center) mapping a model into the
    radius-0.1 sphere; needed to carry poses back to the original scale."""

    center: np.ndarray
    scale: float

    def is_identity(self, tol: float = 1e-12) -> bool:
        return abs(self.scale - 1.0) <= tol and np.abs(self.center).max() <= tol


NORMALIZED_RADIUS = 0.1


def normalize_model(cloud: PointCloud) -> tuple[PointCloud, NormalizationRecord]:
    """Center the cloud and scale its max radius to 0.1 m."""
    center = cloud.points.mean(axis=0)
    r = np.linalg.norm(cloud.points - center, axis=1).max()
    if r == 0.0:
        raise DegenerateGeometryError("all points coincide; cannot normalize")
    scale = NORMALIZED_RADIUS / r
    pts = (cloud.points - center) * scale
    return PointCloud(pts, cloud.normals, cloud.colors), NormalizationRecord(center, scale)


# ---------------------------------------------------------------------------
# PLY I/O (ASCII, x y z nx ny nz red green blue)


def save_ply(path, cloud: PointCloud) -> None:
    n = len(cloud)
    normals = cloud.normals if cloud.normals is not None else np.zeros_like(cloud.points)
    has_color = cloud.colors is not None
    header = [
        "ply", "format ascii 1.0", f"element vertex {n}",
        "property float x", "property float y", "property float z",
        "property float nx", "property float ny", "property float nz",
    ]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(header) + "\n")
        col = np.clip(np.round(cloud.colors * 255), 0, 255).astype(int) if has_color else None
        for i in range(n):
            row = " ".join(repr(float(v)) for v in cloud.points[i])
            row += " " + " ".join(repr(float(v)) for v in normals[i])
            if has_color:
                row += f" {col[i, 0]} {col[i, 1]} {col[i, 2]}"
            f.write(row + "\n")


def load_ply(path) -> PointCloud:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = 0
    props = []
    body_at = 0
    for k, line in enumerate(lines):
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("property"):
            props.append(line.split()[-1])
        elif line == "end_header":
            body_at = k + 1
            break
    vals = np.array([[float(v) for v in lines[body_at + i].split()] for i in range(n)])
    cols = {p: vals[:, k] for k, p in enumerate(props)}
    points = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    normals = None
    if "nx" in cols:
        normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
        if np.abs(np.linalg.norm(normals, axis=1) - 1.0).max() > 1e-6:
            normals = None  # zero normals written for a normal-less cloud
    colors = None
    if "red" in cols:
        colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1) / 255.0
    return PointCloud(points, normals, colors)
