"""Training objectives: overlap-weighted circle loss, the bridged coarse
matching loss that ties both point clouds to the RGB latent space, the
Sinkhorn-based fine matching loss, and the total objective."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import (Camera, NodeAssignment, PointCloud, SE3,
                       dense_correspondences, overlap_matrix)
from .networks import FeatureGrid, SuperpointSet
from .tensor import (Tensor, add, concatenate, div, exp, gather, l2_normalize,
                     log, matmul, mean, mul, neg, relu, reshape, sqrt,
                     sub, sum_, transpose)

GRID_STRIDE = 8  # superpixel cell size in pixels
NEGATIVE_CELL_CHEBYSHEV = 2  # cells farther than this are 2D negatives
OCCLUSION_MARGIN = 0.01  # meters behind the rendered depth that hides a point
COARSE_CORR_RADIUS = 0.01  # meters, correspondence radius for node overlaps
FINE_CORR_RADIUS = 0.005  # meters, radius for fine-level ground-truth pairs


@dataclass
class LossWeights:
    lam_b: float = 0.3  # bridge weight between 3D-3D and 3D-2D terms
    lam_c: float = 0.5  # coarse/fine balance
    tau_r: float = 0.1  # overlap threshold for positive node pairs
    delta_e: float = 0.1  # positive margin
    delta_f: float = 1.4  # negative margin
    gamma: float = 24.0  # scale hyper-parameter

    def __post_init__(self):
        if not (0.0 <= self.lam_b <= 1.0 and 0.0 <= self.lam_c <= 1.0):
            raise ValueError("lam_b and lam_c must lie in [0, 1]")
        if not (0.0 < self.tau_r < 1.0):
            raise ValueError("tau_r must lie in (0, 1)")
        if not self.delta_e < self.delta_f:
            raise ValueError("delta_e must be smaller than delta_f")


@dataclass
class PairSets:
    """Per-anchor positive and negative candidate masks."""
    pos_mask: np.ndarray  # (n_anchor, n_cand) in {0, 1}
    neg_mask: np.ndarray
    pos_weight: np.ndarray | None = None  # optional per-pair positive weights

    @property
    def E(self):
        return [np.nonzero(row)[0] for row in self.pos_mask]

    @property
    def F(self):
        return [np.nonzero(row)[0] for row in self.neg_mask]


@dataclass
class Supervision:
    gt_pose: SE3
    camera: Camera
    corr_p: np.ndarray  # fine-radius dense correspondences
    corr_q: np.ndarray
    overlaps: np.ndarray  # (nP', nQ') node overlap fractions
    kp_pairs: PairSets  # CAD superpoints vs grid cells
    kq_pairs: PairSets  # depth superpoints vs grid cells
    assign_p: NodeAssignment
    assign_q: NodeAssignment


@dataclass
class LossBreakdown:
    l_pq: Tensor
    l_kq: Tensor
    l_kp: Tensor
    l_coarse: Tensor
    l_fine: Tensor
    total: Tensor

    def floats(self) -> dict:
        return {k: float(getattr(self, k).data)
                for k in ("l_pq", "l_kq", "l_kp", "l_coarse", "l_fine", "total")}

    def to_line(self, step: int) -> str:
        f = self.floats()
        return (f"step {step} l_pq {f['l_pq']:.6f} l_kq {f['l_kq']:.6f} "
                f"l_kp {f['l_kp']:.6f} coarse {f['l_coarse']:.6f} "
                f"fine {f['l_fine']:.6f} total {f['total']:.6f}")


def _zero() -> Tensor:
    return Tensor(np.zeros(()))


# ---------------------------------------------------------------------------
# pair construction


def sample_pairs(super_p: SuperpointSet, super_q: SuperpointSet,
                 sup: Supervision, w: LossWeights) -> PairSets:
    """3D-3D candidate sets from node overlaps.

    E_i = {j : V(i,j) > tau_r}, F_i = {j : V(i,j) = 0}; anchors with empty E
    contribute no loss downstream."""
    v = sup.overlaps
    if v.shape != (super_p.coords.shape[0], super_q.coords.shape[0]):
        raise ValueError("overlap matrix shape does not match the superpoint sets")
    pos = (v > w.tau_r).astype(np.float64)
    negm = (v == 0.0).astype(np.float64)
    return PairSets(pos_mask=pos, neg_mask=negm, pos_weight=v)


def pair_sets_from_masks(v: np.ndarray, w: LossWeights) -> PairSets:
    return PairSets((v > w.tau_r).astype(np.float64), (v == 0.0).astype(np.float64), v)


# ---------------------------------------------------------------------------
# circle loss


def feature_distances(fa: Tensor, fb: Tensor) -> Tensor:
    """Pairwise L2 distances of L2-normalized feature rows, in [0, 2]."""
    na, nb = l2_normalize(fa), l2_normalize(fb)
    sim = matmul(na, transpose(nb))
    dsq = relu(sub(2.0, mul(sim, 2.0)))
    return sqrt(add(dsq, 1e-12))


def circle_loss(dist: Tensor, pairs: PairSets, w: LossWeights) -> Tensor:
    """Margin-based metric loss over per-anchor positive and negative sets.

    Per anchor i: log(1 + sum_E exp(v * b_e * (d - delta_e))
                        * sum_F exp(b_f * (delta_f - d)))
    with pair-adaptive scales b_e = gamma * max(0, d - delta_e) and
    b_f = gamma * max(0, delta_f - d), averaged over anchors that have at
    least one positive. The products equal gamma * relu(.)^2, which keeps the
    loss C1 and monotone in each pair distance."""
    anchors = pairs.pos_mask.any(axis=1)
    if not anchors.any():
        return _zero()
    pos_w = pairs.pos_weight if pairs.pos_weight is not None else np.ones_like(pairs.pos_mask)
    pe = relu(sub(dist, w.delta_e))
    ne = relu(sub(w.delta_f, dist))
    s_e = _masked_expsum(mul(mul(pe, pe), w.gamma * pos_w), pairs.pos_mask)
    s_f = _masked_expsum(mul(mul(ne, ne), w.gamma), pairs.neg_mask)
    per_anchor = log(add(mul(s_e, s_f), 1.0))  # (nA, 1)
    sel = anchors.astype(np.float64).reshape(-1, 1)
    return div(sum_(mul(per_anchor, sel)), float(anchors.sum()))


def _masked_expsum(arg: Tensor, mask: np.ndarray) -> Tensor:
    # sum_j mask * exp(arg), rowwise -> (nA, 1)
    term = mul(exp(arg), mask)
    ones = Tensor(np.ones((mask.shape[1], 1)))
    return matmul(term, ones)


def circle_loss_reference(d: np.ndarray, pos_mask, neg_mask, w: LossWeights,
                          pos_weight=None) -> float:
    """Scalar per-pair re-implementation used as an independence oracle."""
    import math
    n_anchor = 0
    total = 0.0
    pos_weight = pos_weight if pos_weight is not None else np.ones_like(d)
    for i in range(d.shape[0]):
        ej = np.nonzero(pos_mask[i])[0]
        fj = np.nonzero(neg_mask[i])[0]
        if ej.size == 0:
            continue
        n_anchor += 1
        se = 0.0
        for j in ej:
            be = w.gamma * max(0.0, d[i, j] - w.delta_e)
            se += math.exp(pos_weight[i, j] * be * (d[i, j] - w.delta_e))
        sf = 0.0
        for j in fj:
            bf = w.gamma * max(0.0, w.delta_f - d[i, j])
            sf += math.exp(bf * (w.delta_f - d[i, j]))
        total += math.log1p(se * sf)
    return total / n_anchor if n_anchor else 0.0


# ---------------------------------------------------------------------------
# bridged coarse matching loss


def bcm_loss(fp: SuperpointSet, fq: SuperpointSet, fk: FeatureGrid,
             sup: Supervision, w: LossWeights):
    """Coarse loss bridging 3D-3D matching through the RGB latent space.

    Returns (scalar, components dict). The scalar is
    lam_b * (L_p + L_q)/2 + (1 - lam_b) * (L_kq + L_kp)."""
    pairs_pq = sample_pairs(fp, fq, sup, w)
    d_pq = feature_distances(fp.features, fq.features)
    l_p = circle_loss(d_pq, pairs_pq, w)
    pairs_qp = PairSets(pairs_pq.pos_mask.T, pairs_pq.neg_mask.T,
                        sup.overlaps.T)
    l_q = circle_loss(transpose(d_pq), pairs_qp, w)
    l_pq = mul(add(l_p, l_q), 0.5)

    if not (sup.kq_pairs.pos_mask.any() or sup.kp_pairs.pos_mask.any()):
        warnings.warn("no visible superpoint projections; 2D bridge terms are zero")
    l_kq = circle_loss(feature_distances(fq.features, fk.features), sup.kq_pairs, w)
    l_kp = circle_loss(feature_distances(fp.features, fk.features), sup.kp_pairs, w)

    total = coarse_combination(l_pq, l_kq, l_kp, w)
    return total, {"l_pq": l_pq, "l_kq": l_kq, "l_kp": l_kp,
                   "l_p": l_p, "l_q": l_q}


def coarse_combination(l_pq, l_kq, l_kp, w: LossWeights) -> Tensor:
    """lam_b * L_pq + (1 - lam_b) * (L_kq + L_kp)."""
    as_t = lambda x: x if isinstance(x, Tensor) else Tensor(np.asarray(float(x)))
    l_pq, l_kq, l_kp = as_t(l_pq), as_t(l_kq), as_t(l_kp)
    return add(mul(l_pq, w.lam_b), mul(add(l_kq, l_kp), 1.0 - w.lam_b))


# ---------------------------------------------------------------------------
# Sinkhorn and the fine loss


def _logsumexp(x: Tensor, axis: int) -> Tensor:
    shift = x.data.max(axis=axis, keepdims=True)
    s = sum_(exp(sub(x, shift)), axis=axis)
    shp = list(x.shape)
    shp[axis] = 1
    return add(reshape(log(s), tuple(shp)), Tensor(shift))


def sinkhorn(scores: Tensor, iters: int = 100, tol: float = 1e-9):
    """Log-domain optimal transport on an augmented score matrix.

    ``scores`` is (a+1) x (b+1); the last row/column are slack. Row marginals
    are [1,...,1, b], column marginals [1,...,1, a], so each non-slack row and
    column carries unit mass and slack absorbs the rest. Differentiable
    through the iterations. Returns (assignment, converged)."""
    a1, b1 = scores.shape
    a, b = a1 - 1, b1 - 1
    if a < 1 or b < 1:
        raise ValueError("augmented score matrix must be at least 2x2")
    log_r = np.log(np.concatenate([np.ones(a), [float(b)]])).reshape(-1, 1)
    log_c = np.log(np.concatenate([np.ones(b), [float(a)]])).reshape(1, -1)
    u = Tensor(np.zeros((a1, 1)))
    v = Tensor(np.zeros((1, b1)))
    converged = False
    plan = None
    for _ in range(iters):
        u = sub(Tensor(log_r), _logsumexp(add(scores, v), axis=1))
        v = sub(Tensor(log_c), _logsumexp(add(scores, u), axis=0))
        plan = exp(add(add(scores, u), v))
        p = plan.data
        err = max(np.abs(p.sum(axis=1, keepdims=True) - np.exp(log_r)).max(),
                  np.abs(p.sum(axis=0, keepdims=True) - np.exp(log_c)).max())
        if err < tol:
            converged = True
            break
    return plan, converged


def augment_scores(scores: Tensor, slack) -> Tensor:
    """Append a slack row and column filled with the (scalar) slack score."""
    a, b = scores.shape
    if not isinstance(slack, Tensor):
        slack = Tensor(np.full((1, 1), float(slack)))
    col = matmul(Tensor(np.ones((a, 1))), slack)
    bottom = matmul(slack, Tensor(np.ones((1, b + 1))))
    return concatenate([concatenate([scores, col], axis=1), bottom], axis=0)


def fine_similarity(feats_a: Tensor, feats_b: Tensor) -> Tensor:
    """Scaled inner products of normalized fine features (temperature
    1/sqrt(fine_dim))."""
    na, nb = l2_normalize(feats_a), l2_normalize(feats_b)
    return mul(matmul(na, transpose(nb)), float(np.sqrt(feats_a.shape[1])))


def fine_loss(dense_p: Tensor, dense_q: Tensor, coarse_matches,
              sup: Supervision, w: LossWeights, slack=1.0,
              sinkhorn_iters: int = 100) -> Tensor:
    """Negative log-likelihood of ground-truth fine pairs under the Sinkhorn
    assignment of each matched superpoint group; unmatched group points are
    supervised onto the slack row/column."""
    corr = {}
    for p, q in zip(sup.corr_p, sup.corr_q):
        corr[int(p)] = int(q)
    group_losses = []
    for i, j in coarse_matches:
        gp = sup.assign_p.groups[int(i)]
        gq = sup.assign_q.groups[int(j)]
        if gp.size == 0 or gq.size == 0:
            continue
        qpos = {int(qi): col for col, qi in enumerate(gq)}
        rows, cols = [], []
        for row, pi in enumerate(gp):
            qi = corr.get(int(pi))
            if qi is not None and qi in qpos:
                rows.append(row)
                cols.append(qpos[qi])
        if not rows:
            continue
        sim = fine_similarity(gather(dense_p, gp), gather(dense_q, gq))
        plan, _ = sinkhorn(augment_scores(sim, slack), iters=sinkhorn_iters)
        a, b = len(gp), len(gq)
        flat_idx = []
        matched_rows, matched_cols = set(rows), set(cols)
        for r, c in zip(rows, cols):
            flat_idx.append(r * (b + 1) + c)
        for r in range(a):
            if r not in matched_rows:
                flat_idx.append(r * (b + 1) + b)  # slack column
        for c in range(b):
            if c not in matched_cols:
                flat_idx.append(a * (b + 1) + c)  # slack row
        picked = gather(reshape(plan, ((a + 1) * (b + 1), 1)),
                        np.asarray(flat_idx, dtype=np.int64))
        group_losses.append(neg(mean(log(picked))))
    if not group_losses:
        warnings.warn("fine loss has no supervised groups; returning zero")
        return _zero()
    total = group_losses[0]
    for g in group_losses[1:]:
        total = add(total, g)
    return mul(total, 1.0 / len(group_losses))


def gt_coarse_matches(sup: Supervision, w: LossWeights, limit: int | None = None):
    """Ground-truth coarse pairs (i, argmax_j V) for overlap above tau_r."""
    v = sup.overlaps
    out = []
    for i in range(v.shape[0]):
        j = int(np.argmax(v[i]))
        if v[i, j] > w.tau_r:
            out.append((i, j))
    if limit is not None and len(out) > limit:
        order = np.argsort([-v[i, j] for i, j in out], kind="stable")
        out = [out[k] for k in order[:limit]]
    return out


# ---------------------------------------------------------------------------
# total objective


def total_loss(coarse, fine, w: LossWeights, components=None) -> LossBreakdown:
    """Combine coarse and fine objectives: lam_c * coarse + (1-lam_c) * fine."""
    if isinstance(coarse, tuple):
        coarse, components = coarse
    coarse = coarse if isinstance(coarse, Tensor) else Tensor(np.asarray(float(coarse)))
    fine = fine if isinstance(fine, Tensor) else Tensor(np.asarray(float(fine)))
    comp = components or {}
    total = add(mul(coarse, w.lam_c), mul(fine, 1.0 - w.lam_c))
    return LossBreakdown(l_pq=comp.get("l_pq", _zero()), l_kq=comp.get("l_kq", _zero()),
                         l_kp=comp.get("l_kp", _zero()), l_coarse=coarse,
                         l_fine=fine, total=total)


# ---------------------------------------------------------------------------
# supervision construction


def depth_map_from_cloud(cloud_q: PointCloud, camera: Camera, h: int, w: int) -> np.ndarray:
    """Nearest-depth image from the observed points; inf where empty."""
    z = cloud_q.points[:, 2]
    front = z > 0.0
    u = np.clip(np.floor(camera.fx * cloud_q.points[:, 0] / np.where(front, z, 1.0)
                         + camera.cx).astype(np.int64), 0, w - 1)
    v = np.clip(np.floor(camera.fy * cloud_q.points[:, 1] / np.where(front, z, 1.0)
                         + camera.cy).astype(np.int64), 0, h - 1)
    depth = np.full((h, w), np.inf)
    np.minimum.at(depth, (v[front], u[front]), z[front])
    return depth


def _grid_pair_sets(points_cam: np.ndarray, camera: Camera, grid_h: int,
                    grid_w: int, depth_image: np.ndarray | None) -> PairSets:
    n = points_cam.shape[0]
    n_cells = grid_h * grid_w
    pos = np.zeros((n, n_cells))
    negm = np.zeros((n, n_cells))
    z = points_cam[:, 2]
    h_img, w_img = grid_h * GRID_STRIDE, grid_w * GRID_STRIDE
    gi_all, gj_all = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    gi_all, gj_all = gi_all.reshape(-1), gj_all.reshape(-1)
    for i in range(n):
        if z[i] <= 0.0:
            continue
        u = camera.fx * points_cam[i, 0] / z[i] + camera.cx
        v = camera.fy * points_cam[i, 1] / z[i] + camera.cy
        if not (0.0 <= u < w_img and 0.0 <= v < h_img):
            continue
        if depth_image is not None:
            pv = min(int(v), h_img - 1)
            pu = min(int(u), w_img - 1)
            if z[i] > depth_image[pv, pu] + OCCLUSION_MARGIN:
                continue  # occluded in this view
        ci, cj = int(v // GRID_STRIDE), int(u // GRID_STRIDE)
        pos[i, ci * grid_w + cj] = 1.0
        cheb = np.maximum(np.abs(gi_all - ci), np.abs(gj_all - cj))
        negm[i] = (cheb > NEGATIVE_CELL_CHEBYSHEV).astype(np.float64)
    return PairSets(pos_mask=pos, neg_mask=negm)


def build_supervision(sp_p: SuperpointSet, sp_q: SuperpointSet, grid: FeatureGrid,
                      cloud_p: PointCloud, cloud_q: PointCloud, gt: SE3,
                      camera: Camera, w: LossWeights,
                      coarse_radius: float = COARSE_CORR_RADIUS,
                      fine_radius: float = FINE_CORR_RADIUS,
                      depth_image: np.ndarray | None = None) -> Supervision:
    """Ground-truth correspondences, node overlaps, and 3D-2D pair sets."""
    cp_c, cq_c = dense_correspondences(cloud_p.points, cloud_q.points, gt, coarse_radius)
    cp_f, cq_f = dense_correspondences(cloud_p.points, cloud_q.points, gt, fine_radius)
    overlaps = overlap_matrix(sp_p.assignment, sp_q.assignment, cp_c, cq_c)
    if depth_image is None:
        depth_image = depth_map_from_cloud(cloud_q, camera,
                                           grid.grid_h * GRID_STRIDE,
                                           grid.grid_w * GRID_STRIDE)
    kp = _grid_pair_sets(gt.apply(sp_p.coords), camera, grid.grid_h, grid.grid_w,
                         depth_image)
    kq = _grid_pair_sets(sp_q.coords, camera, grid.grid_h, grid.grid_w, None)
    return Supervision(gt_pose=gt, camera=camera, corr_p=cp_f, corr_q=cq_f,
                       overlaps=overlaps, kp_pairs=kp, kq_pairs=kq,
                       assign_p=sp_p.assignment, assign_q=sp_q.assignment)
