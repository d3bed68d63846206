"""Loss arithmetic, circle loss oracle, Sinkhorn, and supervision built
from synthetic scenes."""

import numpy as np
import pytest

from fdmpose import losses as L
from fdmpose.losses import (LossWeights, PairSets, augment_scores,
                            circle_loss, circle_loss_reference,
                            feature_distances, fine_loss, fine_similarity,
                            gt_coarse_matches, sinkhorn, total_loss)
from fdmpose.tensor import Tensor, grad_check, sum_


W = LossWeights()


def _pairsets(rng, na, nb, p_pos=0.2):
    pos = (rng.uniform(size=(na, nb)) < p_pos).astype(np.float64)
    neg = ((rng.uniform(size=(na, nb)) < 0.5) * (1 - pos)).astype(np.float64)
    return PairSets(pos, neg, rng.uniform(0.2, 1.0, (na, nb)))


def test_weights_invariants():
    with pytest.raises(ValueError):
        LossWeights(lam_b=1.5)
    with pytest.raises(ValueError):
        LossWeights(tau_r=0.0)
    with pytest.raises(ValueError):
        LossWeights(delta_e=2.0, delta_f=1.0)


def test_total_loss_arithmetic():
    # coarse mix: 0.3 * 1 + (1 - 0.3) * (1 + 1) = 1.7 with unit components
    comp = {"l_pq": Tensor(np.asarray(1.0)), "l_kq": Tensor(np.asarray(1.0)),
            "l_kp": Tensor(np.asarray(1.0))}
    coarse = 0.3 * 1.0 + 0.7 * (1.0 + 1.0)
    assert np.isclose(coarse, 1.7)
    # total mix: 0.5 * 2 + 0.5 * 4 = 3.0
    bd = total_loss(2.0, 4.0, LossWeights(lam_c=0.5), components=comp)
    assert np.isclose(float(bd.total.data), 3.0)
    assert np.isclose(float(bd.l_coarse.data), 2.0)
    assert np.isclose(float(bd.l_fine.data), 4.0)


def test_circle_loss_empty_sets():
    d = Tensor(np.full((3, 4), 0.7))
    empty = PairSets(np.zeros((3, 4)), np.ones((3, 4)))
    assert float(circle_loss(d, empty, W).data) == 0.0


def test_circle_loss_margin_boundary():
    # one anchor, one positive exactly at delta_e, one negative at delta_f:
    # both exponents vanish, so the loss is log(1 + 1*1) = log 2
    d = Tensor(np.array([[W.delta_e, W.delta_f]]))
    pairs = PairSets(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]),
                     np.ones((1, 2)))
    assert np.isclose(float(circle_loss(d, pairs, W).data), np.log(2.0))


def test_circle_loss_matches_reference():
    # independent scalar re-implementation within 1e-12 on 100 instances
    for trial in range(100):
        rng = np.random.default_rng(trial)
        na, nb = rng.integers(2, 9), rng.integers(2, 9)
        pairs = _pairsets(rng, na, nb)
        d = rng.uniform(0.0, 2.0, (na, nb))
        got = float(circle_loss(Tensor(d), pairs, W).data)
        ref = circle_loss_reference(d, pairs.pos_mask, pairs.neg_mask, W,
                                    pairs.pos_weight)
        assert abs(got - ref) < 1e-12


def test_circle_loss_monotonicity(rng):
    # increasing a positive distance never decreases the loss; increasing a
    # negative distance never increases it
    pairs = _pairsets(rng, 5, 6)
    d = rng.uniform(0.2, 1.2, (5, 6))
    base = float(circle_loss(Tensor(d.copy()), pairs, W).data)
    pi, pj = np.argwhere(pairs.pos_mask)[0]
    ni, nj = np.argwhere(pairs.neg_mask)[0]
    up = d.copy(); up[pi, pj] += 0.1
    assert float(circle_loss(Tensor(up), pairs, W).data) >= base
    down = d.copy(); down[ni, nj] += 0.1
    assert float(circle_loss(Tensor(down), pairs, W).data) <= base


def test_circle_loss_gradient(rng):
    pairs = _pairsets(rng, 4, 5)
    d = Tensor(rng.uniform(0.3, 1.1, (4, 5)))
    assert grad_check(lambda t: circle_loss(t, pairs, W), [d]) < 1e-4


def test_feature_distances_range(rng):
    fa = Tensor(rng.standard_normal((6, 8)))
    fb = Tensor(rng.standard_normal((7, 8)))
    d = feature_distances(fa, fb).data
    assert d.shape == (6, 7)
    assert (d >= 0).all() and (d <= 2.0 + 1e-9).all()
    same = feature_distances(fa, fa).data
    assert np.abs(np.diag(same)).max() < 1e-5


def test_sinkhorn_doubly_stochastic(rng):
    # row/column sums meet the marginals within 1e-6 in <= 100 iterations
    for a, b in [(2, 2), (5, 9), (32, 32), (17, 32)]:
        scores = Tensor(rng.standard_normal((a + 1, b + 1)))
        plan, converged = sinkhorn(scores, iters=100, tol=1e-7)
        p = plan.data
        assert converged
        assert np.abs(p[:a].sum(axis=1) - 1.0).max() < 1e-6
        assert np.abs(p[:, :b].sum(axis=0) - 1.0).max() < 1e-6
        assert np.isclose(p[a].sum(), b, atol=1e-4)
        assert np.isclose(p[:, b].sum(), a, atol=1e-4)


def test_sinkhorn_uniform_mass():
    # uniform k x k scores: every non-slack pair ends at 1 / (2k) because the
    # slack row/column absorbs half of each unit marginal
    for k in (2, 4, 8):
        plan, _ = sinkhorn(Tensor(np.zeros((k + 1, k + 1))), iters=500, tol=1e-12)
        p = plan.data
        assert np.abs(p[:k, :k] - 1.0 / (2 * k)).max() < 1e-9


def test_sinkhorn_suppressed_slack_symmetry():
    # with slack scores pushed to -inf the 2x2 uniform problem is exactly
    # 4-way symmetric and approaches the permutation-average 0.5 per entry
    scores = np.zeros((3, 3))
    scores[2, :] = -1e9
    scores[:, 2] = -1e9
    plan, _ = sinkhorn(Tensor(scores), iters=4000, tol=0.0)
    p = plan.data[:2, :2]
    assert np.abs(p - p.T).max() < 1e-12
    assert np.abs(p - p[::-1, ::-1]).max() < 1e-12
    assert np.abs(p - 0.5).max() < 1e-3


def test_sinkhorn_differentiable(rng):
    scores = Tensor(rng.standard_normal((4, 5)))

    def fn(s):
        plan, _ = sinkhorn(s, iters=30)
        return sum_(L.mul(plan, plan))

    assert grad_check(fn, [scores]) < 1e-4


def test_augment_scores(rng):
    s = Tensor(rng.standard_normal((3, 4)))
    out = augment_scores(s, 0.25).data
    assert out.shape == (4, 5)
    assert np.allclose(out[:3, :4], s.data)
    assert np.allclose(out[3], 0.25) and np.allclose(out[:, 4], 0.25)


def test_fine_similarity_temperature(rng):
    fa = Tensor(rng.standard_normal((4, 16)))
    sim = fine_similarity(fa, fa).data
    assert np.allclose(np.diag(sim), np.sqrt(16.0))


def _toy_supervision(rng, n_nodes=3, pts_per=4):
    from fdmpose.geometry import Camera, NodeAssignment, SE3
    n = n_nodes * pts_per
    node_of = np.repeat(np.arange(n_nodes), pts_per)
    groups = [np.nonzero(node_of == i)[0] for i in range(n_nodes)]
    assign = NodeAssignment(node_of_point=node_of, groups=groups)
    corr = np.arange(n)
    overlaps = np.eye(n_nodes)
    dummy = PairSets(np.zeros((n_nodes, 1)), np.zeros((n_nodes, 1)))
    return L.Supervision(gt_pose=SE3.identity(),
                         camera=Camera(1, 1, 0, 0, 8, 8),
                         corr_p=corr, corr_q=corr, overlaps=overlaps,
                         kp_pairs=dummy, kq_pairs=dummy,
                         assign_p=assign, assign_q=assign)


def test_fine_loss_prefers_true_assignment(rng):
    sup = _toy_supervision(rng)
    n = 12
    ident = Tensor(np.eye(n) * 2.0 + rng.normal(0, 0.01, (n, n)))
    matches = [(i, i) for i in range(3)]
    good = float(fine_loss(ident, ident, matches, sup, W).data)
    scrambled = Tensor(rng.standard_normal((n, n)))
    bad = float(fine_loss(scrambled, ident, matches, sup, W).data)
    assert good < bad


def test_fine_loss_gradient(rng):
    sup = _toy_supervision(rng, n_nodes=2, pts_per=3)
    dp = Tensor(rng.standard_normal((6, 5)))
    dq = Tensor(rng.standard_normal((6, 5)))
    matches = [(0, 0), (1, 1)]
    fn = lambda a, b: fine_loss(a, b, matches, sup, W, sinkhorn_iters=20)
    assert grad_check(fn, [dp, dq]) < 1e-4


def test_fine_loss_group_permutation_invariant(rng):
    sup = _toy_supervision(rng)
    dp = Tensor(rng.standard_normal((12, 5)))
    dq = Tensor(rng.standard_normal((12, 5)))
    matches = [(0, 0), (1, 1), (2, 2)]
    a = float(fine_loss(dp, dq, matches, sup, W).data)
    b = float(fine_loss(dp, dq, matches[::-1], sup, W).data)
    assert np.isclose(a, b, atol=1e-12)


def test_gt_coarse_matches():
    sup = _toy_supervision(np.random.default_rng(0))
    got = gt_coarse_matches(sup, W)
    assert got == [(0, 0), (1, 1), (2, 2)]
    limited = gt_coarse_matches(sup, W, limit=2)
    assert len(limited) == 2


def test_constants():
    assert L.COARSE_CORR_RADIUS == 0.01
    assert L.FINE_CORR_RADIUS == 0.005
    assert L.GRID_STRIDE == 8
    assert W.lam_b == 0.3 and W.lam_c == 0.5
    assert W.delta_e == 0.1 and W.delta_f == 1.4 and W.gamma == 24.0
