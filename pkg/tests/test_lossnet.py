import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import numeric_grad, rel_err
from learnloss.lossnet import (
    LossPredictor,
    ModelSet,
    TrainSchedule,
    build_model_set,
    effective_batch_size,
    joint_batch_loss,
    lpm_forward,
    mse_ablation_loss,
    pair_batch,
    ranking_loss,
    ranking_loss_pairs,
    train_model_set,
)
from learnloss.models import build_mlp_classifier, build_mlp_regressor
from learnloss.nncore import OptimConfig, zero_grads


def small_set(seed=0, task="classification", hidden=(12, 10), d=4, in_dim=3, out=3):
    rng = np.random.default_rng(seed)
    if task == "classification":
        target = build_mlp_classifier(in_dim, list(hidden), out, rng)
    else:
        target = build_mlp_regressor(in_dim, list(hidden), out, rng)
    return build_model_set(target, rng, hidden=d)


def snapshot(params):
    return [p.value.copy() for p in params]


class TestPredictor:
    def test_zero_params_predict_zero(self, rng):
        ms = small_set()
        for p in ms.predictor.params():
            p.value[...] = 0.0
        _, feats = ms.target.forward(rng.normal(size=(5, 3)))
        np.testing.assert_array_equal(lpm_forward(ms.predictor, feats), 0.0)

    def test_batch_consistency_and_determinism(self, rng):
        ms = small_set()
        _, feats = ms.target.forward(rng.normal(size=(9, 3)))
        full = lpm_forward(ms.predictor, feats)
        assert full.shape == (9,)
        for i in range(9):
            one = lpm_forward(ms.predictor, [f[i : i + 1] for f in feats])
            assert one[0] == full[i]
        np.testing.assert_array_equal(lpm_forward(ms.predictor, feats), full)

    def test_tap_mismatch(self, rng):
        ms = small_set()
        _, feats = ms.target.forward(rng.normal(size=(2, 3)))
        with pytest.raises(ValueError):
            lpm_forward(ms.predictor, feats[:1])
        with pytest.raises(ValueError):
            ModelSet(ms.target, LossPredictor([12, 9], rng, hidden=4))

    def test_must_be_smaller_than_target(self, rng):
        target = build_mlp_classifier(3, [8, 8], 3, rng)
        with pytest.raises(ValueError, match="smaller"):
            build_model_set(target, rng, hidden=128)

    def test_rank4_features_are_pooled(self, rng):
        pred = LossPredictor([3, 2], rng, hidden=4)
        maps = [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 2, 3, 3))]
        vecs = [m.mean(axis=(2, 3)) for m in maps]
        np.testing.assert_allclose(pred.forward(maps), pred.forward(vecs), rtol=1e-14)


class TestPairing:
    def test_consecutive(self):
        assert pair_batch(list("abcd")).tolist() == [["a", "b"], ["c", "d"]]
        assert pair_batch([7, 3]).tolist() == [[7, 3]]

    def test_odd_rejected(self):
        with pytest.raises(ValueError):
            pair_batch([1, 2, 3])

    @given(st.integers(1, 64), st.randoms(use_true_random=False))
    def test_partition(self, half, rnd):
        batch = list(range(2 * half))
        rnd.shuffle(batch)
        pairs = pair_batch(batch)
        flat = pairs.ravel().tolist()
        assert len(pairs) == half
        assert sorted(flat) == sorted(batch)
        assert len(set(flat)) == len(flat)


class TestRankingLoss:
    def test_worked_examples(self):
        assert ranking_loss(0.5, 0.3, 2.0, 1.0, 1.0) == (0.8, -1.0, 1.0)
        assert ranking_loss(3.0, 1.0, 2.0, 1.0, 1.0) == (0.0, 0.0, 0.0)
        assert ranking_loss(0.2, 0.2, 1.0, 1.0, 1.0) == (1.0, 1.0, -1.0)

    def test_margin_must_be_positive(self):
        with pytest.raises(ValueError):
            ranking_loss(0.0, 0.0, 1.0, 0.0, 0.0)

    def test_boundary_is_inactive(self):
        # sign +1, pred gap exactly equals the margin
        assert ranking_loss(2.0, 1.0, 5.0, 0.0, 1.0) == (0.0, 0.0, 0.0)

    grid = st.integers(-200, 200).map(lambda k: k / 10)

    @given(grid, grid, grid, grid, st.sampled_from([0.5, 1.0, 2.0]))
    def test_order_only(self, pi, pj, li, lj, margin):
        base = ranking_loss(pi, pj, li, lj, margin)
        assert ranking_loss(pi, pj, math.exp(li), math.exp(lj), margin) == base
        assert ranking_loss(pi, pj, li**3 + 7 * li, lj**3 + 7 * lj, margin) == base

    @given(grid, grid, grid, grid, st.sampled_from([0.5, 1.0, 2.0]))
    def test_nonnegative_zero_iff_and_antisymmetric(self, pi, pj, li, lj, margin):
        value, gi, gj = ranking_loss(pi, pj, li, lj, margin)
        sign = 1.0 if li > lj else -1.0
        assert value >= 0.0
        assert (value == 0.0) == (sign * (pi - pj) >= margin)
        if value > 0:
            assert gi == -gj

    def test_vectorized_matches_scalar(self, rng):
        pi, pj, li, lj = rng.normal(size=(4, 50))
        v, gi, gj = ranking_loss_pairs(pi, pj, li, lj, 1.0)
        for k in range(50):
            assert (v[k], gi[k], gj[k]) == ranking_loss(pi[k], pj[k], li[k], lj[k], 1.0)


class TestMseAblation:
    def test_values(self):
        v, g = mse_ablation_loss(2.0, 0.0)
        assert (v, g) == (4.0, 4.0)
        v, g = mse_ablation_loss(1.25, 1.25)
        assert (v, g) == (0.0, 0.0)

    def test_finite_differences(self, rng):
        pred = rng.normal(size=6)
        real = rng.normal(size=6)
        _, g = mse_ablation_loss(pred, real)
        num = numeric_grad(lambda: float(mse_ablation_loss(pred, real)[0].sum()), pred)
        assert rel_err(g, num) < 1e-6


def _schedule(**kw):
    base = dict(epochs=1, batch_size=4, lr_drop_epoch=None, grad_stop_fraction=1.0,
                lam=1.0, margin=1.0, optim=OptimConfig(0.05, 0.9, 0.0005))
    base.update(kw)
    return TrainSchedule(**base)


class TestJointLoss:
    def test_hand_example(self):
        # zero regressor with D=3: per-sample MSE 1 and 3, predicted losses 0
        ms = small_set(task="regression", out=3, hidden=(8, 8), d=2)
        for p in ms.params():
            p.value[...] = 0.0
        y = np.array([[1.0, 1.0, 1.0], [3.0, 0.0, 0.0]])
        res = joint_batch_loss(ms, np.zeros((2, 3)), y, _schedule(batch_size=2))
        assert res.target_losses.tolist() == [1.0, 3.0]
        assert (res.mean_target, res.mean_predictor, res.total) == (2.0, 1.0, 3.0)

    def test_lambda_zero(self, rng):
        ms = small_set()
        x, y = rng.normal(size=(6, 3)), rng.integers(0, 3, size=6)
        res = joint_batch_loss(ms, x, y, _schedule(lam=0.0))
        assert res.total == res.mean_target

    def test_odd_batch(self, rng):
        with pytest.raises(ValueError):
            joint_batch_loss(small_set(), rng.normal(size=(3, 3)), np.zeros(3, int), _schedule())

    def test_total_decomposition(self, rng):
        ms = small_set()
        x, y = rng.normal(size=(8, 3)), rng.integers(0, 3, size=8)
        res = joint_batch_loss(ms, x, y, _schedule(lam=0.7))
        l, p = res.target_losses, res.predicted
        pairs_sum = sum(ranking_loss(p[i], p[i + 1], l[i], l[i + 1], 1.0)[0] for i in range(0, 8, 2))
        assert abs(res.total - (l.mean() + 0.7 * (2 / 8) * pairs_sum)) < 1e-12

    def test_barrier_target_grads_equal_lambda_zero(self, rng):
        x, y = rng.normal(size=(8, 3)), rng.integers(0, 3, size=8)
        a, b = small_set(seed=4), small_set(seed=4)
        joint_batch_loss(a, x, y, _schedule(lam=2.5), stop_grad=True)
        joint_batch_loss(b, x, y, _schedule(lam=0.0), stop_grad=False)
        for pa, pb in zip(a.target.params(), b.target.params()):
            np.testing.assert_array_equal(pa.grad, pb.grad)
        assert any(p.grad.any() for p in a.predictor.params())

    def test_barrier_off_changes_target_grads(self, rng):
        x, y = rng.normal(size=(8, 3)), rng.integers(0, 3, size=8)
        a, b = small_set(seed=4), small_set(seed=4)
        joint_batch_loss(a, x, y, _schedule(lam=1.0, margin=5.0), stop_grad=False)
        joint_batch_loss(b, x, y, _schedule(lam=0.0))
        assert any(not np.array_equal(pa.grad, pb.grad)
                   for pa, pb in zip(a.target.params(), b.target.params()))

    def test_lambda_scales_predictor_gradient(self, rng):
        x, y = rng.normal(size=(8, 3)), rng.integers(0, 3, size=8)
        a, b = small_set(seed=2), small_set(seed=2)
        joint_batch_loss(a, x, y, _schedule(lam=1.0, margin=3.0), stop_grad=True)
        joint_batch_loss(b, x, y, _schedule(lam=3.5, margin=3.0), stop_grad=True)
        for pa, pb in zip(a.predictor.params(), b.predictor.params()):
            np.testing.assert_allclose(pb.grad, 3.5 * pa.grad, rtol=1e-12, atol=1e-300)

    def test_real_losses_get_no_gradient(self, rng):
        # moving a target parameter changes l but, away from sign flips, the
        # ranking term only sees it through the predicted losses
        ms = small_set(seed=6)
        x, y = rng.normal(size=(4, 3)), rng.integers(0, 3, size=4)
        sched = _schedule(lam=1.0, margin=50.0)
        zero_grads(ms.params())
        joint_batch_loss(ms, x, y, sched)
        with_rank = [p.grad.copy() for p in ms.target.params()]
        zero_grads(ms.params())
        joint_batch_loss(ms, x, y, _schedule(lam=0.0))
        target_only = [p.grad.copy() for p in ms.target.params()]
        # ranking contribution must equal backprop of grad_lhat through the predictor only
        zero_grads(ms.params())
        _, feats = ms.target.forward(x)
        lhat = ms.predictor.forward(feats)
        res = joint_batch_loss(ms, x, y, _schedule(lam=0.0))
        l = res.target_losses
        g = np.zeros(4)
        for i in (0, 2):
            _, gi, gj = ranking_loss(lhat[i], lhat[i + 1], l[i], l[i + 1], 50.0)
            g[i], g[i + 1] = gi * 0.5, gj * 0.5
        zero_grads(ms.params())
        _, feats = ms.target.forward(x)
        ms.predictor.forward(feats)
        fg = ms.predictor.backward(g)
        ms.target.backward(np.zeros((4, 3)), fg)
        for wr, to, p in zip(with_rank, target_only, ms.target.params()):
            np.testing.assert_allclose(wr - to, p.grad, rtol=1e-10, atol=1e-12)


def _kink_free(ms, x, y, sched, tol=1e-3):
    """True when no ReLU, hinge or loss-order boundary lies within ``tol``."""
    pred, feats = ms.target.forward(x)
    pre = list(ms.target._pre)
    lhat = ms.predictor.forward(feats)
    pre += ms.predictor._pre
    if any(np.abs(z).min() < tol for z in pre):
        return False
    from learnloss.models import target_loss

    l = target_loss(pred, y, ms.target.task)
    for i in range(0, len(x), 2):
        sign = 1.0 if l[i] > l[i + 1] else -1.0
        if abs(l[i] - l[i + 1]) < tol or abs(-sign * (lhat[i] - lhat[i + 1]) + sched.margin) < tol:
            return False
    return True


def joint_gradient_check(seed: int) -> float:
    """Relative error of the joint gradient against central differences."""
    rng = np.random.default_rng(seed)
    while True:
        task = "classification" if rng.random() < 0.5 else "regression"
        in_dim, out = int(rng.integers(2, 5)), int(rng.integers(2, 4))
        hidden = (int(rng.integers(6, 10)), int(rng.integers(6, 10)))
        ms = small_set(seed=int(rng.integers(1 << 30)), task=task, hidden=hidden,
                       d=int(rng.integers(2, 4)), in_dim=in_dim, out=out)
        b = 2 * int(rng.integers(1, 4))
        x = rng.normal(size=(b, in_dim))
        y = rng.integers(0, out, size=b) if task == "classification" else rng.normal(size=(b, out))
        sched = _schedule(batch_size=b, lam=float(rng.uniform(0.2, 2.0)),
                          margin=float(rng.uniform(0.5, 2.0)))
        if _kink_free(ms, x, y, sched):
            break
    zero_grads(ms.params())
    joint_batch_loss(ms, x, y, sched, stop_grad=False)
    analytic = [p.grad.copy() for p in ms.params()]

    def total():
        return joint_batch_loss(ms, x, y, sched).total

    # one relative error over the whole parameter vector; the fusion bias
    # gradient is identically zero (pairwise terms cancel), so per-tensor
    # ratios would just measure finite-difference noise
    numeric = []
    for p in ms.params():
        numeric.append(numeric_grad(total, p.value))
        zero_grads(ms.params())
    return rel_err(np.concatenate([g.ravel() for g in analytic]),
                   np.concatenate([g.ravel() for g in numeric]))


@pytest.mark.parametrize("seed", range(5))
def test_joint_gradient_finite_differences(seed):
    assert joint_gradient_check(seed) < 1e-4


def _data(n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 3)), rng.integers(0, 3, size=n)


class TestTraining:
    def test_zero_epochs(self):
        ms = small_set()
        before = snapshot(ms.params())
        x, y = _data(10)
        train_model_set(ms, x, y, _schedule(epochs=0), np.random.default_rng(0))
        for b, p in zip(before, ms.params()):
            np.testing.assert_array_equal(b, p.value)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            train_model_set(small_set(), np.zeros((0, 3)), np.zeros(0, int), _schedule(),
                            np.random.default_rng(0))

    def test_deterministic(self):
        x, y = _data(30)
        runs = []
        for _ in range(2):
            ms = small_set(seed=3)
            train_model_set(ms, x, y, _schedule(epochs=3), np.random.default_rng(8))
            runs.append(snapshot(ms.params()))
        for a, b in zip(*runs):
            np.testing.assert_array_equal(a, b)

    def test_barrier_matches_lambda_zero(self):
        x, y = _data(37)
        a, b = small_set(seed=9), small_set(seed=9)
        train_model_set(a, x, y, _schedule(grad_stop_fraction=0.0, lam=3.0), np.random.default_rng(1))
        train_model_set(b, x, y, _schedule(grad_stop_fraction=1.0, lam=0.0), np.random.default_rng(1))
        for pa, pb in zip(a.target.params(), b.target.params()):
            np.testing.assert_array_equal(pa.value, pb.value)

    def test_no_barrier_differs(self):
        x, y = _data(37)
        a, b = small_set(seed=9), small_set(seed=9)
        train_model_set(a, x, y, _schedule(grad_stop_fraction=1.0, lam=1.0), np.random.default_rng(1))
        train_model_set(b, x, y, _schedule(grad_stop_fraction=1.0, lam=0.0), np.random.default_rng(1))
        assert any(not np.array_equal(pa.value, pb.value)
                   for pa, pb in zip(a.target.params(), b.target.params()))

    def test_schedule_mechanics_and_log(self, tmp_path):
        x, y = _data(10)
        sched = _schedule(epochs=5, lr_drop_epoch=3, lr_drop_factor=0.1, grad_stop_fraction=0.6)
        assert sched.grad_stop_epoch == 3
        path = tmp_path / "log.csv"
        _, log = train_model_set(small_set(), x, y, sched, np.random.default_rng(0), log_path=path)
        assert [r.barrier_active for r in log] == [0, 0, 0, 1, 1]
        assert [r.learning_rate for r in log] == pytest.approx([0.05] * 3 + [0.005] * 2)
        rows = list(csv.DictReader(path.open()))
        assert list(rows[0]) == ["epoch", "mean_target_loss", "mean_ranking_loss",
                                 "learning_rate", "barrier_active"]
        assert len(rows) == 5 and rows[3]["barrier_active"] == "1"

    def test_small_labeled_sets(self):
        assert effective_batch_size(200, 128) == 128
        assert effective_batch_size(9, 128) == 8
        assert effective_batch_size(1, 128) == 1
        for n in (1, 3, 5):
            x, y = _data(n)
            train_model_set(small_set(), x, y, _schedule(epochs=2, batch_size=128),
                            np.random.default_rng(0))

    def test_odd_batch_rejected_by_schedule(self):
        with pytest.raises(ValueError):
            _schedule(batch_size=7)

    def test_training_reduces_target_loss(self):
        x, y = _data(64)
        y = (x[:, 0] > 0).astype(int) + (x[:, 1] > 0)
        _, log = train_model_set(small_set(seed=1), x, y, _schedule(epochs=40, batch_size=16),
                                 np.random.default_rng(0))
        assert log[-1].mean_target_loss < 0.5 * log[0].mean_target_loss
