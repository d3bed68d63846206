"""Match stage: coarse and fine correspondence extraction, Kabsch and RANSAC
pose solving, multi-hypothesis generation with 3D and photometric scoring,
ICP refinement, and pose evaluation metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import (Camera, DegenerateGeometryError, NodeAssignment,
                       PointCloud, SE3, project)
from .losses import augment_scores, fine_similarity, sinkhorn
from .tensor import Tensor, gather


class PoseEstimationError(RuntimeError):
    pass


class UnmatchedSceneError(RuntimeError):
    """Fine matching produced no usable correspondences for the scene."""


@dataclass
class CorrespondenceSet:
    pairs: np.ndarray  # (k, 2) indices into the two point sets
    scores: np.ndarray  # (k,) confidences, descending for matcher output
    src: np.ndarray | None = None  # (k, 3) P-side coordinates
    dst: np.ndarray | None = None  # (k, 3) Q-side coordinates

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if self.scores.shape[0] != self.pairs.shape[0]:
            raise ValueError("scores and pairs disagree in length")

    def __len__(self):
        return self.pairs.shape[0]

    def subset(self, idx) -> "CorrespondenceSet":
        idx = np.asarray(idx, dtype=np.int64)
        return CorrespondenceSet(self.pairs[idx], self.scores[idx],
                                 None if self.src is None else self.src[idx],
                                 None if self.dst is None else self.dst[idx])


@dataclass
class PoseHypothesis:
    pose: SE3
    inlier_count: int = 0
    score_3d: float = float("nan")  # meters, lower is better
    score_rgb: float = float("nan")  # [0, 1], higher is better
    combined: float = float("nan")  # defined after ranking
    converged: bool = True
    gen_order: int = 0  # position in the generation sequence (eta prefixes)


@dataclass
class HypothesisConfig:
    kappa: int = 128  # coarse correspondence pool size
    s: int = 64  # correspondences sampled per hypothesis
    eta: int = 20  # hypothesis count
    eta_accurate: int = 64  # hypothesis count in accurate mode
    ransac_iters: int = 500
    inlier_radius: float = 0.01  # meters
    chamfer_direction: str = "cad_to_depth"

    def __post_init__(self):
        if self.s > self.kappa:
            raise ValueError("s must not exceed kappa")
        if self.eta < 1:
            raise ValueError("eta must be at least 1")
        if self.chamfer_direction not in ("cad_to_depth", "depth_to_cad"):
            raise ValueError(f"unknown chamfer direction {self.chamfer_direction!r}")


# ---------------------------------------------------------------------------
# correspondence extraction


def _as_array(feats) -> np.ndarray:
    return feats.data if isinstance(feats, Tensor) else np.asarray(feats, dtype=np.float64)


def _normalize_rows(f: np.ndarray) -> np.ndarray:
    return f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)


def coarse_match(feats_p, feats_q, kappa: int, coords_p: np.ndarray | None = None,
                 coords_q: np.ndarray | None = None) -> CorrespondenceSet:
    """Top-kappa entries of the normalized-feature similarity matrix,
    descending; ties broken by row-major index."""
    fp = _normalize_rows(_as_array(feats_p))
    fq = _normalize_rows(_as_array(feats_q))
    sim = fp @ fq.T
    flat = sim.reshape(-1)
    if flat.size < kappa:
        warnings.warn(f"only {flat.size} candidate pairs for kappa={kappa}")
        kappa = flat.size
    order = np.argsort(-flat, kind="stable")[:kappa]
    rows, cols = np.divmod(order, sim.shape[1])
    pairs = np.stack([rows, cols], axis=1)
    return CorrespondenceSet(pairs, flat[order],
                             None if coords_p is None else coords_p[rows],
                             None if coords_q is None else coords_q[cols])


def fine_match(dense_p, dense_q, coarse: CorrespondenceSet,
               assign_p: NodeAssignment, assign_q: NodeAssignment,
               points_p: np.ndarray, points_q: np.ndarray, slack=1.0,
               top_k: int = 3, conf_min: float = 0.05,
               sinkhorn_iters: int = 100) -> CorrespondenceSet:
    """Point-level matches pooled over matched superpoint groups.

    Within each group pair, the Sinkhorn assignment of the fine similarity
    matrix is filtered to mutual top-``top_k`` entries above ``conf_min``."""
    fp = Tensor(_as_array(dense_p))
    fq = Tensor(_as_array(dense_q))
    best: dict = {}
    for i, j in {(int(i), int(j)) for i, j in coarse.pairs}:
        gp, gq = assign_p.groups[i], assign_q.groups[j]
        if gp.size == 0 or gq.size == 0:
            continue
        sim = fine_similarity(gather(fp, gp), gather(fq, gq))
        plan, _ = sinkhorn(augment_scores(sim, slack), iters=sinkhorn_iters)
        a = plan.data[:-1, :-1]
        if a.size == 0:
            continue
        krow = min(top_k, a.shape[1])
        kcol = min(top_k, a.shape[0])
        row_rank = np.argsort(-a, axis=1, kind="stable")[:, :krow]
        col_rank = np.argsort(-a, axis=0, kind="stable")[:kcol, :]
        in_row = np.zeros_like(a, dtype=bool)
        np.put_along_axis(in_row, row_rank, True, axis=1)
        in_col = np.zeros_like(a, dtype=bool)
        np.put_along_axis(in_col, col_rank, True, axis=0)
        rr, cc = np.nonzero(in_row & in_col & (a > conf_min))
        for r, c in zip(rr, cc):
            key = (int(gp[r]), int(gq[c]))
            if a[r, c] > best.get(key, (-1.0,))[0]:
                best[key] = (float(a[r, c]),)
    if not best:
        raise UnmatchedSceneError("no fine correspondences above the confidence floor")
    items = sorted(best.items(), key=lambda kv: (-kv[1][0], kv[0]))
    pairs = np.array([k for k, _ in items], dtype=np.int64)
    scores = np.array([v[0] for _, v in items])
    return CorrespondenceSet(pairs, scores, points_p[pairs[:, 0]], points_q[pairs[:, 1]])


# ---------------------------------------------------------------------------
# pose solving


def kabsch(src: np.ndarray, dst: np.ndarray) -> SE3:
    """Least-squares rigid transform T with T(src) ~ dst, via SVD of the
    cross-covariance with reflection correction."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape[0] < 3 or src.shape != dst.shape:
        raise ValueError("kabsch needs at least 3 matched 3D pairs")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateGeometryError("degenerate (collinear) point sample")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return SE3(r, cd - r @ cs)


def _kabsch_batch(src: np.ndarray, dst: np.ndarray):
    # src, dst: (B, m, 3); returns (R (B,3,3), t (B,3), valid (B,))
    cs = src.mean(axis=1, keepdims=True)
    cd = dst.mean(axis=1, keepdims=True)
    h = np.einsum("bmi,bmj->bij", src - cs, dst - cd)
    u, s, vt = np.linalg.svd(h)
    valid = s[:, 1] > 1e-12 * np.maximum(s[:, 0], 1e-300)
    v = np.transpose(vt, (0, 2, 1))
    det = np.linalg.det(np.einsum("bij,bkj->bik", v, u))
    fix = np.repeat(np.eye(3)[None], src.shape[0], axis=0)
    fix[:, 2, 2] = np.sign(det)
    r = np.einsum("bij,bjk,blk->bil", v, fix, u)
    t = cd[:, 0, :] - np.einsum("bij,bj->bi", r, cs[:, 0, :])
    return r, t, valid


def ransac_pose(corr: CorrespondenceSet, cfg: HypothesisConfig, seed: int = 0) -> PoseHypothesis:
    """Consensus pose from minimal 3-pair samples, refit on the best inlier
    set. Deterministic given the seed."""
    if corr.src is None or corr.dst is None:
        raise ValueError("correspondences carry no coordinates")
    n = len(corr)
    if n < 3:
        raise PoseEstimationError(f"need at least 3 correspondences, have {n}")
    rng = np.random.default_rng(seed)
    picks = np.argsort(rng.random((cfg.ransac_iters, n)), axis=1, kind="stable")[:, :3]
    r, t, valid = _kabsch_batch(corr.src[picks], corr.dst[picks])
    moved = np.einsum("bij,mj->bmi", r, corr.src) + t[:, None, :]
    dist = np.linalg.norm(moved - corr.dst[None], axis=2)
    inliers = (dist < cfg.inlier_radius).sum(axis=1)
    inliers[~valid] = -1
    best = int(np.argmax(inliers))
    if inliers[best] < 3:
        raise PoseEstimationError("no hypothesis reached 3 inliers")
    mask = dist[best] < cfg.inlier_radius
    try:
        pose = kabsch(corr.src[mask], corr.dst[mask])
        moved = pose.apply(corr.src)
        count = int((np.linalg.norm(moved - corr.dst, axis=1) < cfg.inlier_radius).sum())
    except DegenerateGeometryError:
        pose = SE3(r[best], t[best])
        count = int(inliers[best])
    return PoseHypothesis(pose=pose, inlier_count=count)


def generate_hypotheses(corr: CorrespondenceSet, cfg: HypothesisConfig,
                        seed: int = 0) -> list:
    """eta candidate poses, each solved on an s-sized random subsample of the
    correspondence pool."""
    n = len(corr)
    s = cfg.s
    if n < s:
        warnings.warn(f"pool has {n} < s={s} correspondences; using all per hypothesis")
        s = n
    rng = np.random.default_rng(seed)
    hyps = []
    for v in range(cfg.eta):
        idx = rng.choice(n, size=s, replace=False)
        try:
            h = ransac_pose(corr.subset(idx), cfg, seed=seed * 1_000_003 + v + 1)
        except (PoseEstimationError, DegenerateGeometryError):
            continue
        h.gen_order = v
        hyps.append(h)
    if not hyps:
        raise PoseEstimationError("every hypothesis was degenerate or inlier-free")
    return hyps


# ---------------------------------------------------------------------------
# scoring and refinement


def score_3d(h: PoseHypothesis, cad: PointCloud, depth: PointCloud,
             max_points: int = 512, direction: str = "cad_to_depth") -> float:
    """One-directional chamfer distance of the posed CAD model to the
    observation (meters; lower is better)."""
    if len(depth) == 0:
        raise ValueError("depth cloud is empty")
    pts = cad.points
    if pts.shape[0] > max_points:
        pts = pts[kernels.fps(pts, max_points, 0)]
    moved = h.pose.apply(pts)
    if direction == "cad_to_depth":
        _, d = kernels.nearest_neighbor(moved, depth.points)
    else:
        _, d = kernels.nearest_neighbor(depth.points, moved)
    return float(d.mean())


def photometric_score(h: PoseHypothesis, cad: PointCloud, crop: np.ndarray,
                      camera: Camera, occlusion_margin: float = 0.005) -> float:
    """Mean color agreement of visible projected CAD points with the RGB crop.

    Self-occluded points (behind the model's own nearest surface by more than
    ``occlusion_margin``) are excluded."""
    if cad.colors is None:
        raise ValueError("photometric scoring needs a colored CAD cloud")
    uv, mask = project(camera, h.pose, cad.points)
    hh, ww = crop.shape[:2]
    # floor matches the render z-buffer's pixel assignment convention
    u = np.floor(uv[:, 0]).astype(np.int64)
    v = np.floor(uv[:, 1]).astype(np.int64)
    ok = mask & (u >= 0) & (u < ww) & (v >= 0) & (v < hh)
    if not ok.any():
        return 0.0
    z = h.pose.apply(cad.points)[:, 2]
    # 2x2-binned self z-buffer so isolated backside splats cannot pass as
    # visible between the sparse front-surface samples
    bh, bw = (hh + 1) // 2, (ww + 1) // 2
    zbuf = np.full((bh, bw), np.inf)
    np.minimum.at(zbuf, (v[ok] // 2, u[ok] // 2), z[ok])
    ok &= z <= np.where(ok, zbuf[np.clip(v // 2, 0, bh - 1), np.clip(u // 2, 0, bw - 1)],
                        np.inf) + occlusion_margin
    if not ok.any():
        return 0.0
    diff = np.linalg.norm(cad.colors[ok] - crop[v[ok], u[ok]], axis=1)
    return float(np.mean(1.0 - diff / np.sqrt(3.0)))


def rank_hypotheses(hyps: list, rgb_scorer=None) -> list:
    """Sort by the mean of the inverted min-max-normalized 3D score and the
    RGB score; without an RGB scorer the order is ascending 3D score."""
    if not hyps:
        raise ValueError("no hypotheses to rank")
    s3 = np.array([h.score_3d for h in hyps])
    if np.isnan(s3).any():
        raise ValueError("rank_hypotheses requires score_3d on every hypothesis")
    span = s3.max() - s3.min()
    inv = 1.0 - (s3 - s3.min()) / span if span > 0 else np.ones_like(s3)
    for k, h in enumerate(hyps):
        if rgb_scorer is not None:
            h.score_rgb = float(rgb_scorer(h))
            h.combined = 0.5 * (inv[k] + h.score_rgb)
        else:
            h.combined = float(inv[k])
    return sorted(hyps, key=lambda h: (-h.combined, h.score_3d))


def icp_refine(h: PoseHypothesis, cad: PointCloud, depth: PointCloud,
               max_iters: int = 50, tol: float = 1e-9) -> PoseHypothesis:
    """Point-to-point ICP: associate each observed point with the nearest
    posed CAD point, refit with kabsch, repeat until the mean association
    error stops improving. The error sequence is non-increasing."""
    pose = h.pose
    prev = None
    converged = False
    for _ in range(max_iters):
        moved = pose.apply(cad.points)
        idx, d = kernels.nearest_neighbor(depth.points, moved)
        err = float(d.mean())
        if prev is not None and prev - err < tol * max(prev, 1e-12):
            converged = True
            break
        prev = err
        try:
            pose = kabsch(cad.points[idx], depth.points)
        except DegenerateGeometryError:
            break
    return PoseHypothesis(pose=pose, inlier_count=h.inlier_count,
                          score_3d=h.score_3d, score_rgb=h.score_rgb,
                          combined=h.combined, converged=converged,
                          gen_order=h.gen_order)


# ---------------------------------------------------------------------------
# metrics


def model_diameter(cad: PointCloud) -> float:
    pts = cad.points
    best = 0.0
    for i in range(0, pts.shape[0], 256):
        chunk = pts[i:i + 256]
        d2 = ((chunk[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def add_metric(t_est: SE3, t_gt: SE3, cad: PointCloud) -> float:
    """Mean displacement of model points between the two poses (meters)."""
    return float(np.linalg.norm(t_est.apply(cad.points) - t_gt.apply(cad.points),
                                axis=1).mean())


def add01d_recall(adds, diameters) -> float:
    """Fraction of scenes with ADD below 10% of the model diameter."""
    adds = np.asarray(adds, dtype=np.float64)
    diameters = np.asarray(diameters, dtype=np.float64)
    if adds.size == 0:
        return 0.0
    return float((adds < 0.1 * diameters).mean())


def hit_recall(hyp_lists, gts, cads) -> float:
    """Fraction of scenes where ANY hypothesis meets the ADD-0.1d criterion."""
    if not isinstance(cads, (list, tuple)):
        cads = [cads] * len(hyp_lists)
    hits = 0
    for hyps, gt, cad in zip(hyp_lists, gts, cads):
        diam = model_diameter(cad)
        if any(add_metric(h.pose, gt, cad) < 0.1 * diam for h in hyps):
            hits += 1
    return hits / len(hyp_lists) if hyp_lists else 0.0


def pose_result_line(scene_id: str, pose: SE3, combined: float, add: float) -> str:
    """One result record: scene id, 12 pose numbers, combined score, ADD."""
    return f"{scene_id} {pose.to_line()} {combined:.6f} {add:.6f}"


def parse_pose_result_line(line: str):
    parts = line.split()
    if len(parts) != 15:
        raise ValueError(f"expected 15 fields in pose result line, got {len(parts)}")
    return (parts[0], SE3.from_line(" ".join(parts[1:13])),
            float(parts[13]), float(parts[14]))
