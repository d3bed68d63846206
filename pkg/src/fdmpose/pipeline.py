"""Orchestration: the describe pass over one scene, the toy training loop,
inference (describe, match, hypothesize, rank, refine), and evaluation sweeps."""

from __future__ import annotations

import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud
from .losses import (LossBreakdown, LossWeights, Supervision, bcm_loss,
                     build_supervision, fine_loss, gt_coarse_matches, total_loss)
from .matchpose import (CorrespondenceSet, HypothesisConfig, PoseEstimationError,
                        PoseHypothesis, UnmatchedSceneError, add_metric,
                        coarse_match, fine_match, generate_hypotheses, hit_recall,
                        icp_refine, model_diameter, photometric_score,
                        rank_hypotheses, score_3d)
from .networks import (Context3D, FeatureGrid, NetConfig, SuperpointSet, decode_3d,
                       encode_2d, encode_3d, fuse, init_params,
                       positional_encoding_2d, precompute_3d_context)
from .synthdata import SyntheticScene
from .tensor import Graph, ParameterStore, Tensor


class NaNLossError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, step: int, breakdown: dict):
        self.step = step
        self.breakdown = breakdown
        super().__init__(f"non-finite loss at step {step}: {breakdown}")


@dataclass
class OptimizerConfig:
    learning_rate: float = 2e-3
    decay: float = 0.99  # exponential decay applied per epoch
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.learning_rate < 0.0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


@dataclass
class PipelineConfig:
    net: NetConfig = field(default_factory=NetConfig.desk_scale)
    loss: LossWeights = field(default_factory=LossWeights)
    hyp: HypothesisConfig = field(default_factory=HypothesisConfig)
    opt: OptimizerConfig = field(default_factory=OptimizerConfig)
    use_rgb: bool = True  # photometric verification during ranking
    use_icp: bool = True  # ICP refinement of the top hypothesis
    train_sinkhorn_iters: int = 30
    fine_groups_limit: int = 16  # supervised groups per training step

    @classmethod
    def desk_scale(cls) -> "PipelineConfig":
        return cls()

    @classmethod
    def paper_scale(cls) -> "PipelineConfig":
        return cls(net=NetConfig.paper_scale())


@dataclass
class DescribeResult:
    sp_p: SuperpointSet  # fused CAD superpoints
    sp_q: SuperpointSet  # fused depth superpoints
    grid: FeatureGrid  # fused superpixels
    dense_p: Tensor  # (N, fine_dim)
    dense_q: Tensor  # (M, fine_dim)
    raw_sp_p: SuperpointSet = None
    raw_sp_q: SuperpointSet = None
    raw_grid: FeatureGrid = None


@dataclass
class SceneResult:
    scene_id: str
    ok: bool
    add: float = float("nan")
    diameter: float = float("nan")
    combined: float = float("nan")
    pose: object = None
    hypotheses: list = field(default_factory=list)


@dataclass
class EvalReport:
    results: list
    recall: float
    hr: float
    eta_table: dict = field(default_factory=dict)  # eta -> (hr, top1 recall)
    grid_table: dict = field(default_factory=dict)  # (rgb, icp) -> recall
    timings: dict = field(default_factory=dict)

    def lines(self):
        out = [f"recall {self.recall:.4f}", f"hr {self.hr:.4f}"]
        for eta in sorted(self.eta_table):
            h, r = self.eta_table[eta]
            out.append(f"eta {eta} hr {h:.4f} top1 {r:.4f}")
        for (rgb, icp), r in sorted(self.grid_table.items()):
            out.append(f"grid rgb={int(rgb)} icp={int(icp)} recall {r:.4f}")
        for k, v in sorted(self.timings.items()):
            out.append(f"time_{k} {v:.3f}")
        return out


def describe(cad: PointCloud, depth_cloud: PointCloud, crop: np.ndarray,
             params: ParameterStore, cfg: PipelineConfig,
             ctx_p: Context3D | None = None,
             ctx_q: Context3D | None = None) -> DescribeResult:
    """Full feature pipeline: per-modality encoders, latent fusion, and dense
    3D decoding. Deterministic given parameters."""
    net = cfg.net
    sp_p = encode_3d(cad, params, net, "cad", ctx=ctx_p)
    sp_q = encode_3d(depth_cloud, params, net, "depth", ctx=ctx_q)
    grid = positional_encoding_2d(encode_2d(crop, params, net))
    fp, fq, fk = fuse(sp_p, sp_q, grid, params, net)
    dense_p = decode_3d(fp, params, net, "cad")
    dense_q = decode_3d(fq, params, net, "depth")
    return DescribeResult(sp_p=fp, sp_q=fq, grid=fk, dense_p=dense_p,
                          dense_q=dense_q, raw_sp_p=sp_p, raw_sp_q=sp_q,
                          raw_grid=grid)


# ---------------------------------------------------------------------------
# training


@dataclass
class _SceneCache:
    ctx_p: Context3D
    ctx_q: Context3D
    sup: Supervision
    coarse: list


def _prepare_scene(scene: SyntheticScene, params: ParameterStore,
                   cfg: PipelineConfig) -> _SceneCache:
    # supervision depends only on geometry, so it is computed once per scene
    ctx_p = precompute_3d_context(scene.cad, cfg.net)
    ctx_q = precompute_3d_context(scene.depth_cloud, cfg.net)
    sp_p = encode_3d(scene.cad, params, cfg.net, "cad", ctx=ctx_p)
    sp_q = encode_3d(scene.depth_cloud, params, cfg.net, "depth", ctx=ctx_q)
    grid = positional_encoding_2d(encode_2d(scene.crop, params, cfg.net))
    sup = build_supervision(sp_p, sp_q, grid, scene.cad, scene.depth_cloud,
                            scene.gt_pose, scene.camera, cfg.loss)
    coarse = gt_coarse_matches(sup, cfg.loss, limit=cfg.fine_groups_limit)
    return _SceneCache(ctx_p=ctx_p, ctx_q=ctx_q, sup=sup, coarse=coarse)


def scene_loss(scene: SyntheticScene, params: ParameterStore, cfg: PipelineConfig,
               cache: _SceneCache | None = None) -> LossBreakdown:
    """Total training objective for one scene (taped when inside a Graph)."""
    if cache is None:
        cache = _prepare_scene(scene, params, cfg)
    res = describe(scene.cad, scene.depth_cloud, scene.crop, params, cfg,
                   ctx_p=cache.ctx_p, ctx_q=cache.ctx_q)
    coarse_total, comps = bcm_loss(res.sp_p, res.sp_q, res.grid, cache.sup, cfg.loss)
    fine = fine_loss(res.dense_p, res.dense_q, cache.coarse, cache.sup, cfg.loss,
                     slack=params["match.slack"],
                     sinkhorn_iters=cfg.train_sinkhorn_iters)
    return total_loss((coarse_total, comps), fine, cfg.loss)


def train_toy(scenes: list, cfg: PipelineConfig, steps: int, seed: int = 0,
              out_dir: str | None = None, params: ParameterStore | None = None,
              log=None):
    """Adam on the total loss over a small scene set.

    Each step averages gradients over ``cfg.opt.batch_size`` scenes taken
    round-robin from the list; one epoch is a pass over the scene list and
    the learning rate decays exponentially per epoch. Returns
    (params, loss curve) where the curve is a list of (step, total) pairs."""
    if len(scenes) < 2:
        raise ValueError("toy training needs at least 2 scenes")
    if params is None:
        params = init_params(cfg.net, seed)
    caches = [None] * len(scenes)
    m = {n: np.zeros(params[n].shape) for n in params.names()}
    v = {n: np.zeros(params[n].shape) for n in params.names()}
    curve = []
    t_adam = 0
    bsz = cfg.opt.batch_size
    cursor = 0
    for step in range(steps):
        epoch = (step * bsz) // len(scenes)
        lr = cfg.opt.learning_rate * (cfg.opt.decay ** epoch)
        grads = {n: np.zeros(params[n].shape) for n in params.names()}
        batch_total = 0.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for _ in range(bsz):
                k = cursor % len(scenes)
                cursor += 1
                if caches[k] is None:
                    caches[k] = _prepare_scene(scenes[k], params, cfg)
                with Graph() as g:
                    bd = scene_loss(scenes[k], params, cfg, caches[k])
                    if not np.isfinite(bd.total.data):
                        raise NaNLossError(step, bd.floats())
                    g.backward(bd.total)
                    for n in params.names():
                        grads[n] += g.grad(params[n])
                batch_total += float(bd.total.data)
        if bsz > 1:
            for n in grads:
                grads[n] /= bsz
        t_adam += 1
        for n in params.names():
            m[n] = cfg.opt.beta1 * m[n] + (1 - cfg.opt.beta1) * grads[n]
            v[n] = cfg.opt.beta2 * v[n] + (1 - cfg.opt.beta2) * grads[n] ** 2
            mh = m[n] / (1 - cfg.opt.beta1 ** t_adam)
            vh = v[n] / (1 - cfg.opt.beta2 ** t_adam)
            if lr > 0.0:
                params[n].data -= lr * mh / (np.sqrt(vh) + cfg.opt.eps)
        curve.append((step, batch_total / bsz))
        if log is not None:
            log(bd.to_line(step))
        if out_dir is not None and (step + 1) % cfg.opt.checkpoint_every == 0:
            params.save(os.path.join(out_dir, "params.ckpt"))
    if out_dir is not None:
        params.save(os.path.join(out_dir, "params.ckpt"))
        with open(os.path.join(out_dir, "loss_curve.txt"), "w", encoding="utf-8") as f:
            for step, val in curve:
                f.write(f"{step},{val:.8f}\n")
    return params, curve


# ---------------------------------------------------------------------------
# inference and evaluation


def _match_scene(scene: SyntheticScene, params: ParameterStore, cfg: PipelineConfig,
                 cache_ctx=None) -> CorrespondenceSet:
    ctx_p, ctx_q = cache_ctx if cache_ctx is not None else (None, None)
    res = describe(scene.cad, scene.depth_cloud, scene.crop, params, cfg,
                   ctx_p=ctx_p, ctx_q=ctx_q)
    coarse = coarse_match(res.sp_p.features, res.sp_q.features, cfg.hyp.kappa,
                          coords_p=res.sp_p.coords, coords_q=res.sp_q.coords)
    return fine_match(res.dense_p, res.dense_q, coarse,
                      res.sp_p.assignment, res.sp_q.assignment,
                      scene.cad.points, scene.depth_cloud.points,
                      slack=float(params["match.slack"].data.ravel()[0]))


def infer(scene: SyntheticScene, params: ParameterStore, cfg: PipelineConfig,
          seed: int = 0, oracle: bool = False) -> tuple:
    """Describe, match, hypothesize, rank, and optionally refine one scene.

    Returns (ranked hypotheses, SceneResult). ``oracle`` injects ground-truth
    correspondences in place of learned matching."""
    sid = f"{scene.shape_id}_{scene.seed}"
    try:
        if oracle:
            corr = oracle_correspondences(scene)
        else:
            corr = _match_scene(scene, params, cfg)
        hyps = generate_hypotheses(corr, cfg.hyp, seed=seed)
    except (UnmatchedSceneError, PoseEstimationError):
        return [], SceneResult(scene_id=sid, ok=False,
                               diameter=model_diameter(scene.cad))
    for h in hyps:
        h.score_3d = score_3d(h, scene.cad, scene.depth_cloud,
                              direction=cfg.hyp.chamfer_direction)
    scorer = None
    if cfg.use_rgb:
        scorer = lambda h: photometric_score(h, scene.cad, scene.crop, scene.camera)
    ranked = rank_hypotheses(hyps, rgb_scorer=scorer)
    if cfg.use_icp:
        ranked[0] = icp_refine(ranked[0], scene.cad, scene.depth_cloud)
    best = ranked[0]
    diam = model_diameter(scene.cad)
    add = add_metric(best.pose, scene.gt_pose, scene.cad)
    return ranked, SceneResult(scene_id=sid, ok=True, add=add, diameter=diam,
                               combined=best.combined, pose=best.pose,
                               hypotheses=hyps)


def oracle_correspondences(scene: SyntheticScene) -> CorrespondenceSet:
    """Ground-truth point correspondences from the render's visibility map."""
    if scene.cad_visible_index is None:
        raise ValueError("scene carries no visibility index")
    vis = scene.cad_visible_index
    q = np.arange(len(scene.depth_cloud.points))
    return CorrespondenceSet(np.stack([vis, q], axis=1), np.ones(vis.size),
                             scene.cad.points[vis], scene.depth_cloud.points[q])


def evaluate(scenes: list, params: ParameterStore, cfg: PipelineConfig,
             seed: int = 0, eta_sweep=None, grid_ablation: bool = False,
             oracle: bool = False) -> EvalReport:
    """Aggregate inference over a scene list, with optional hypothesis-count
    sweep and verification/refinement ablation grid.

    The describe and matching passes run once per scene; the sweep reuses
    hypothesis prefixes and the grid reuses scores."""
    if not scenes:
        raise ValueError("evaluation split is empty")
    etas = sorted(set(eta_sweep or [])) or None
    eta_max = max([cfg.hyp.eta] + (etas or []))
    results = []
    eta_hits = {e: 0 for e in (etas or [])}
    eta_top1 = {e: 0 for e in (etas or [])}
    grid_hits = {k: 0 for k in
                 [(False, False), (True, False), (False, True), (True, True)]} \
        if grid_ablation else {}
    t0 = time.time()
    t_describe = 0.0
    for scene in scenes:
        hcfg = HypothesisConfig(kappa=cfg.hyp.kappa, s=cfg.hyp.s, eta=eta_max,
                                ransac_iters=cfg.hyp.ransac_iters,
                                inlier_radius=cfg.hyp.inlier_radius,
                                chamfer_direction=cfg.hyp.chamfer_direction)
        wide = PipelineConfig(net=cfg.net, loss=cfg.loss, hyp=hcfg, opt=cfg.opt,
                              use_rgb=cfg.use_rgb, use_icp=cfg.use_icp)
        td = time.time()
        ranked, res = infer(scene, params, wide, seed=seed, oracle=oracle)
        t_describe += time.time() - td
        hyps = res.hypotheses if res.ok else []
        # restate the headline result at the configured eta
        res = _result_at_eta(scene, hyps, cfg, cfg.hyp.eta, cfg.use_rgb, cfg.use_icp)
        results.append(res)
        diam = model_diameter(scene.cad)
        for e in (etas or []):
            prefix = hyps[:0] if not hyps else _by_generation(hyps)[:e]
            if any(add_metric(h.pose, scene.gt_pose, scene.cad) < 0.1 * diam
                   for h in prefix):
                eta_hits[e] += 1
            r = _result_at_eta(scene, hyps, cfg, e, cfg.use_rgb, cfg.use_icp)
            if r.ok and r.add < 0.1 * diam:
                eta_top1[e] += 1
        for (rgb, icp) in grid_hits:
            r = _result_at_eta(scene, hyps, cfg, cfg.hyp.eta, rgb, icp)
            if r.ok and r.add < 0.1 * r.diameter:
                grid_hits[(rgb, icp)] += 1
    n = len(scenes)
    adds = np.array([r.add if r.ok else np.inf for r in results])
    diams = np.array([r.diameter for r in results])
    recall = float((adds < 0.1 * diams).mean())
    hr = hit_recall([_by_generation(r.hypotheses)[:cfg.hyp.eta] for r in results],
                    [s.gt_pose for s in scenes], [s.cad for s in scenes])
    report = EvalReport(results=results, recall=recall, hr=hr,
                        eta_table={e: (eta_hits[e] / n, eta_top1[e] / n)
                                   for e in (etas or [])},
                        grid_table={k: v / n for k, v in grid_hits.items()},
                        timings={"total": time.time() - t0, "describe": t_describe})
    return report


def _by_generation(hyps: list) -> list:
    # hypotheses in their original (generation) order, independent of ranking
    return sorted(hyps, key=lambda h: h.gen_order)


def _result_at_eta(scene: SyntheticScene, hyps: list, cfg: PipelineConfig,
                   eta: int, use_rgb: bool, use_icp: bool) -> SceneResult:
    sid = f"{scene.shape_id}_{scene.seed}"
    subset = _by_generation(hyps)[:eta]
    if not subset:
        return SceneResult(scene_id=sid, ok=False, diameter=model_diameter(scene.cad))
    scorer = None
    if use_rgb:
        scorer = lambda h: photometric_score(h, scene.cad, scene.crop, scene.camera)
    ranked = rank_hypotheses([PoseHypothesis(pose=h.pose, inlier_count=h.inlier_count,
                                             score_3d=h.score_3d)
                              for h in subset], rgb_scorer=scorer)
    best = ranked[0]
    if use_icp:
        best = icp_refine(best, scene.cad, scene.depth_cloud)
    return SceneResult(scene_id=sid, ok=True,
                       add=add_metric(best.pose, scene.gt_pose, scene.cad),
                       diameter=model_diameter(scene.cad), combined=best.combined,
                       pose=best.pose, hypotheses=list(hyps))
