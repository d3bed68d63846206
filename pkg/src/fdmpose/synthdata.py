"""Synthetic scene generation with exact ground truth.

Textured parametric shapes are sampled on their surfaces, placed in front of
a pinhole camera, and rendered with a point-splat z-buffer into a partial
depth cloud plus an RGB crop. Everything is seed-deterministic.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import (SE3, Camera, PointCloud, normalize_model, random_rotation,
                       save_ply, load_ply, unproject)

MAX_POINTS = 2048

DEFAULT_CAMERA = Camera(fx=120.0, fy=120.0, cx=64.0, cy=64.0, width=128, height=128)
DEFAULT_OBJECT_DEPTH = 0.4

WHITE = (1.0, 1.0, 1.0)
RED = (1.0, 0.0, 0.0)


@dataclass
class ShapeSpec:
    """A parametric primitive (or union of primitives) with face colors."""

    kind: str  # box | cylinder | tetrahedron | union
    dims: tuple = ()
    face_colors: tuple = ()
    parts: tuple = ()  # sub-specs for kind == "union"
    name: str = ""


def _quantize(c):
    # snap to the uchar grid so PLY/PPM round trips are exact
    return np.round(np.asarray(c, dtype=np.float64) * 255.0) / 255.0


# ---------------------------------------------------------------------------
# primitive surface samplers: return (points, normals, face_id) in local frame


def _sample_box(dims, n, rng):
    a, b, c = dims
    # faces: +x,-x,+y,-y,+z,-z
    areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, n)
    v = rng.uniform(-0.5, 0.5, n)
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    for f in range(6):
        m = face == f
        axis, sign = divmod(f, 2)
        s = 1.0 if sign == 0 else -1.0
        o1, o2 = [k for k in range(3) if k != axis]
        d = np.array([a, b, c])
        pts[m, axis] = s * d[axis] / 2
        pts[m, o1] = u[m] * d[o1]
        pts[m, o2] = v[m] * d[o2]
        nrm[m, axis] = s
    return pts, nrm, face


def _sample_cylinder(dims, n, rng):
    radius, height = dims
    side_area = 2 * np.pi * radius * height
    cap_area = np.pi * radius ** 2
    areas = np.array([side_area, cap_area, cap_area])
    face = rng.choice(3, size=n, p=areas / areas.sum())
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    m = face == 0
    theta = rng.uniform(0, 2 * np.pi, m.sum())
    pts[m, 0] = radius * np.cos(theta)
    pts[m, 1] = radius * np.sin(theta)
    pts[m, 2] = rng.uniform(-height / 2, height / 2, m.sum())
    nrm[m, 0] = np.cos(theta)
    nrm[m, 1] = np.sin(theta)
    for f, s in ((1, 1.0), (2, -1.0)):
        m = face == f
        r = radius * np.sqrt(rng.uniform(0, 1, m.sum()))
        theta = rng.uniform(0, 2 * np.pi, m.sum())
        pts[m, 0] = r * np.cos(theta)
        pts[m, 1] = r * np.sin(theta)
        pts[m, 2] = s * height / 2
        nrm[m, 2] = s
    return pts, nrm, face


_TETRA_VERTS = np.array([
    [1.0, 1.0, 1.0],
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
])
_TETRA_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


def _sample_tetrahedron(dims, n, rng):
    (edge,) = dims
    verts = _TETRA_VERTS * (edge / np.linalg.norm(_TETRA_VERTS[0] - _TETRA_VERTS[1]))
    face = rng.choice(4, size=n)
    pts = np.empty((n, 3))
    nrm = np.empty((n, 3))
    centroid = verts.mean(axis=0)
    for f in range(4):
        m = face == f
        a, b, c = verts[_TETRA_FACES[f]]
        r1 = np.sqrt(rng.uniform(0, 1, m.sum()))
        r2 = rng.uniform(0, 1, m.sum())
        pts[m] = (a * (1 - r1[:, None]) + b * (r1 * (1 - r2))[:, None]
                  + c * (r1 * r2)[:, None])
        fn = np.cross(b - a, c - a)
        fn /= np.linalg.norm(fn)
        if np.dot(fn, a - centroid) < 0:
            fn = -fn
        nrm[m] = fn
    return pts, nrm, face


_SAMPLERS = {
    "box": (_sample_box, 6),
    "cylinder": (_sample_cylinder, 3),
    "tetrahedron": (_sample_tetrahedron, 4),
}


def make_shape(spec: ShapeSpec, n_points: int = 512, seed: int = 0) -> PointCloud:
    """Area-uniform surface samples with analytic normals and face colors,
    normalized into the radius-0.1 sphere."""
    rng = np.random.default_rng(seed)
    pts, nrm, colors = _sample_spec(spec, n_points, rng)
    cloud = PointCloud(pts, nrm, _quantize(colors))
    normalized, _ = normalize_model(cloud)
    return normalized


def _sample_spec(spec: ShapeSpec, n: int, rng):
    if spec.kind == "union":
        if not spec.parts:
            raise ValueError("union spec needs parts")
        per = np.full(len(spec.parts), n // len(spec.parts))
        per[: n - per.sum()] += 1
        chunks = [_sample_spec_offset(sub, cnt, rng) for sub, cnt in zip(spec.parts, per)]
        pts = np.vstack([c[0] for c in chunks])
        nrm = np.vstack([c[1] for c in chunks])
        col = np.vstack([c[2] for c in chunks])
        return pts, nrm, col
    return _sample_spec_offset(spec, n, rng)


def _sample_spec_offset(spec: ShapeSpec, n: int, rng):
    if spec.kind not in _SAMPLERS:
        raise ValueError(f"unsupported primitive kind {spec.kind!r}")
    sampler, n_faces = _SAMPLERS[spec.kind]
    dims = spec.dims
    offset = np.zeros(3)
    if len(dims) and isinstance(dims[-1], (tuple, list, np.ndarray)):
        offset = np.asarray(dims[-1], dtype=np.float64)
        dims = dims[:-1]
    pts, nrm, face = sampler(dims, n, rng)
    face_colors = spec.face_colors or tuple(WHITE for _ in range(n_faces))
    if len(face_colors) != n_faces:
        raise ValueError(f"{spec.kind} expects {n_faces} face colors, got {len(face_colors)}")
    col = np.asarray(face_colors, dtype=np.float64)[face]
    return pts + offset, nrm, col


def _face_palette(rng, n_faces):
    # distinct saturated colors, quantized
    cols = rng.uniform(0.1, 1.0, size=(n_faces, 3))
    return tuple(tuple(_quantize(c)) for c in cols)


def shape_library(seed: int = 0) -> list[ShapeSpec]:
    """Eight parametric primitives with randomized dimensions and colors."""
    rng = np.random.default_rng(seed)

    def dims(*base):
        return tuple(float(b * rng.uniform(0.8, 1.25)) for b in base)

    specs = [
        ShapeSpec("box", dims(1.0, 0.7, 0.4), _face_palette(rng, 6), name="box"),
        ShapeSpec("box", dims(1.2, 0.3, 0.3), _face_palette(rng, 6), name="bar"),
        ShapeSpec("cylinder", dims(0.4, 1.0), _face_palette(rng, 3), name="cylinder"),
        ShapeSpec("cylinder", dims(0.7, 0.25), _face_palette(rng, 3), name="disk"),
        ShapeSpec("tetrahedron", dims(1.0), _face_palette(rng, 4), name="tetra"),
        tetx_spec(),
        ShapeSpec("union", parts=(
            ShapeSpec("box", dims(1.0, 0.5, 0.3) + ((0.0, 0.0, 0.0),), _face_palette(rng, 6)),
            ShapeSpec("box", dims(0.3, 0.5, 0.8) + ((0.4, 0.0, 0.4),), _face_palette(rng, 6)),
        ), name="lshape"),
        ShapeSpec("union", parts=(
            ShapeSpec("box", dims(0.9, 0.9, 0.3) + ((0.0, 0.0, 0.0),), _face_palette(rng, 6)),
            ShapeSpec("cylinder", dims(0.25, 0.9) + ((0.0, 0.0, 0.4),), _face_palette(rng, 3)),
        ), name="box_cylinder"),
    ]
    return specs


def tetx_spec() -> ShapeSpec:
    """Regular tetrahedron with one red face and three white faces."""
    return ShapeSpec("tetrahedron", (1.0,), (RED, WHITE, WHITE, WHITE), name="tetx")


# ---------------------------------------------------------------------------
# rendering


@dataclass
class SyntheticScene:
    cad: PointCloud
    depth_cloud: PointCloud
    crop: np.ndarray  # (H, W, 3) in [0, 1]
    camera: Camera
    gt_pose: SE3  # object -> camera
    shape_id: str = ""
    seed: int = 0
    cad_visible_index: np.ndarray | None = None  # CAD index per depth point


def render_view(cad: PointCloud, pose: SE3, camera: Camera,
                noise_sigma: float = 0.0, dropout_p: float = 0.0,
                seed: int = 0):
    """Point-splat z-buffer render.

    Returns (depth_cloud, crop, visible_index). The depth cloud lives in the
    camera frame; with zero noise its points coincide with the transformed
    CAD samples that won their pixels.
    """
    rng = np.random.default_rng(seed)
    pts_cam = pose.apply(cad.points)
    winner = kernels.zbuffer(pts_cam, camera.fx, camera.fy, camera.cx, camera.cy,
                             camera.width, camera.height)
    vis = winner[winner >= 0]
    if vis.size == 0:
        raise ValueError("no visible points: object is outside the camera frustum")
    if dropout_p > 0.0:
        keep = rng.uniform(size=vis.size) >= dropout_p
        if not keep.any():
            keep[0] = True
        dropped = vis[~keep]
        vis = vis[keep]
    crop = np.zeros((camera.height, camera.width, 3), dtype=np.float64)
    vmask = winner >= 0
    if cad.colors is not None:
        crop[vmask] = cad.colors[winner[vmask]]
        crop = _fill_splat_gaps(crop, vmask)
    p = pts_cam[vis]
    z = p[:, 2]
    u = camera.fx * p[:, 0] / z + camera.cx
    v = camera.fy * p[:, 1] / z + camera.cy
    if noise_sigma > 0.0:
        z = z + rng.normal(0.0, noise_sigma, size=z.shape)
    depth_pts = unproject(camera, np.stack([u, v], axis=1), z)
    normals = None
    if cad.normals is not None:
        normals = cad.normals[vis] @ pose.rotation.T
        # orient toward the sensor origin
        flip = np.einsum("ni,ni->n", normals, depth_pts) > 0
        normals[flip] = -normals[flip]
    colors = cad.colors[vis] if cad.colors is not None else None
    return PointCloud(depth_pts, normals, colors), crop, vis


def _fill_splat_gaps(crop: np.ndarray, filled: np.ndarray, rounds: int = 2) -> np.ndarray:
    """Close pinholes between point splats: each empty pixel takes the mean
    color of its filled 3x3 neighbors, repeated ``rounds`` times."""
    crop = crop.copy()
    filled = filled.copy()
    h, w = filled.shape
    for _ in range(rounds):
        acc = np.zeros_like(crop)
        cnt = np.zeros((h, w))
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di == 0 and dj == 0:
                    continue
                src = np.zeros_like(crop)
                msk = np.zeros((h, w), dtype=bool)
                lo_i, hi_i = max(di, 0), h + min(di, 0)
                lo_j, hi_j = max(dj, 0), w + min(dj, 0)
                src[lo_i:hi_i, lo_j:hi_j] = crop[lo_i - di:hi_i - di, lo_j - dj:hi_j - dj]
                msk[lo_i:hi_i, lo_j:hi_j] = filled[lo_i - di:hi_i - di, lo_j - dj:hi_j - dj]
                acc += src * msk[:, :, None]
                cnt += msk
        grow = (~filled) & (cnt > 0)
        crop[grow] = acc[grow] / cnt[grow][:, None]
        filled |= grow
    return crop


def random_object_pose(rng: np.random.Generator,
                       depth: float = DEFAULT_OBJECT_DEPTH,
                       jitter: float = 0.02) -> SE3:
    R = random_rotation(rng)
    t = np.array([rng.uniform(-jitter, jitter), rng.uniform(-jitter, jitter), depth])
    return SE3(R, t)


def generate_scene(spec: ShapeSpec, seed: int, camera: Camera = DEFAULT_CAMERA,
                   n_points: int = 512, noise_sigma: float = 0.0,
                   dropout_p: float = 0.0) -> SyntheticScene:
    if n_points > MAX_POINTS:
        raise ValueError(f"at most {MAX_POINTS} points per cloud")
    rng = np.random.default_rng(seed)
    cad = make_shape(spec, n_points, seed=int(rng.integers(2 ** 31)))
    pose = random_object_pose(rng)
    depth_cloud, crop, vis = render_view(cad, pose, camera, noise_sigma, dropout_p,
                                         seed=int(rng.integers(2 ** 31)))
    return SyntheticScene(cad=cad, depth_cloud=depth_cloud, crop=crop, camera=camera,
                          gt_pose=pose, shape_id=spec.name or spec.kind, seed=seed,
                          cad_visible_index=vis)


# ---------------------------------------------------------------------------
# on-disk dataset


def save_ppm(path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    data = np.clip(np.round(image * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8, count=w * h * 3)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def save_scene(scene_dir, scene: SyntheticScene) -> None:
    os.makedirs(scene_dir, exist_ok=True)
    try:
        save_ply(os.path.join(scene_dir, "cad.ply"), scene.cad)
        save_ply(os.path.join(scene_dir, "depth.ply"), scene.depth_cloud)
        save_ppm(os.path.join(scene_dir, "crop.ppm"), scene.crop)
        with open(os.path.join(scene_dir, "pose.txt"), "w", encoding="utf-8") as f:
            f.write(scene.gt_pose.to_line() + "\n")
        with open(os.path.join(scene_dir, "camera.txt"), "w", encoding="utf-8") as f:
            f.write(scene.camera.to_line() + "\n")
    except OSError as exc:
        raise OSError(f"failed writing scene to {scene_dir}: {exc}") from exc


def load_scene(scene_dir) -> SyntheticScene:
    try:
        cad = load_ply(os.path.join(scene_dir, "cad.ply"))
        depth_cloud = load_ply(os.path.join(scene_dir, "depth.ply"))
        crop = load_ppm(os.path.join(scene_dir, "crop.ppm"))
        with open(os.path.join(scene_dir, "pose.txt"), encoding="utf-8") as f:
            pose = SE3.from_line(f.readline())
        with open(os.path.join(scene_dir, "camera.txt"), encoding="utf-8") as f:
            camera = Camera.from_line(f.readline())
    except OSError as exc:
        raise OSError(f"failed reading scene from {scene_dir}: {exc}") from exc
    return SyntheticScene(cad=cad, depth_cloud=depth_cloud, crop=crop, camera=camera,
                          gt_pose=pose, shape_id=os.path.basename(str(scene_dir)))


@dataclass
class DatasetIndex:
    root: str
    entries: list = field(default_factory=list)  # (scene_dir, split, shape_name, seed)

    def scenes(self, split: str | None = None):
        return [e for e in self.entries if split is None or e[1] == split]


def generate_dataset(specs, n_scenes: int, out_dir,
                     split_ratios=(0.7, 0.15, 0.15), seed: int = 0,
                     n_points: int = 512, noise_sigma: float = 0.0,
                     dropout_p: float = 0.0,
                     camera: Camera = DEFAULT_CAMERA) -> DatasetIndex:
    """Write ``n_scenes`` scenes under ``out_dir`` with an index file.

    Per-scene seeds derive from ``seed`` so regeneration is bit-identical;
    splits are assigned by scene count and have disjoint (shape, seed) pairs.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    n_train = int(round(split_ratios[0] * n_scenes))
    n_val = int(round(split_ratios[1] * n_scenes))
    index = DatasetIndex(root=str(out_dir))
    for i in range(n_scenes):
        spec = specs[i % len(specs)]
        scene_seed = seed * 1_000_003 + i
        scene = generate_scene(spec, scene_seed, camera=camera, n_points=n_points,
                               noise_sigma=noise_sigma, dropout_p=dropout_p)
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        name = f"scene_{i:05d}"
        save_scene(os.path.join(out_dir, name), scene)
        index.entries.append((name, split, scene.shape_id, scene_seed))
    with open(os.path.join(out_dir, "index.txt"), "w", encoding="utf-8") as f:
        for name, split, shape_name, scene_seed in index.entries:
            f.write(f"{name} {split} {shape_name} {scene_seed}\n")
    return index


def load_dataset(root) -> DatasetIndex:
    index = DatasetIndex(root=str(root))
    path = os.path.join(root, "index.txt")
    try:
        with open(path, encoding="utf-8") as f:
            for line in f:
                name, split, shape_name, scene_seed = line.split()
                index.entries.append((name, split, shape_name, int(scene_seed)))
    except OSError as exc:
        raise OSError(f"failed reading dataset index {path}: {exc}") from exc
    return index
