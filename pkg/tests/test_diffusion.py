import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.base import clone

from ddm import nn
from ddm.diffusion import (DDMRestorer, Trajectory, check_step_sequence, ddm_train_step,
                           history_expansion, reconstruct, step_direct, step_indirect,
                           uniform_steps)
from ddm.exceptions import DomainError, ShapeError, UsageError
from ddm.schedule import alpha_cosine, degrade
from ddm.tensor import RngStream


class Oracle:
    """Restoration model returning the clean image, optionally with per-call noise."""

    def __init__(self, x, noise=0.0, rng=None, clamp=None):
        self.x, self.noise, self.rng, self.clamp = x, noise, rng, clamp
        self.calls = 0

    def __call__(self, y, t, rng=None):
        self.calls += 1
        if not self.noise:
            return self.x.copy()
        e = self.noise * self.rng.child(self.calls).normal(self.x.shape)
        if self.clamp is not None:
            e = np.clip(e, -self.clamp, self.clamp)
        return self.x + e


def pair(shape=(4, 4), seed=0):
    r = RngStream(seed)
    return r.uniform(shape), r.uniform(shape)


class TestSteps:
    def test_direct_oracle(self):
        s = alpha_cosine(10)
        x, yT = pair()
        out = step_direct(Oracle(x), s, degrade(s, x, yT, 6), yT, 6)
        np.testing.assert_array_equal(out, degrade(s, x, yT, 5))
        np.testing.assert_array_equal(step_direct(Oracle(x), s, degrade(s, x, yT, 1), yT, 1), x)

    def test_direct_linear_sensitivity(self):
        s = alpha_cosine(10)
        x, yT = pair()
        base = step_direct(Oracle(x), s, yT, yT, 4)
        moved = step_direct(Oracle(x + 0.01), s, yT, yT, 4)
        np.testing.assert_allclose(moved - base, s.alphas[3] * 0.01, atol=1e-12)

    def test_indirect_hand_case(self):
        s = alpha_cosine(2)
        np.testing.assert_allclose(s.alphas, [1.0, 0.5, 0.0], atol=1e-15)
        x, yT = np.ones((1, 1)), np.zeros((1, 1))
        y1 = step_indirect(Oracle(x), s, yT, yT, 2)
        assert y1[0, 0] == pytest.approx(0.5, abs=1e-15)
        assert step_indirect(Oracle(x), s, y1, yT, 1)[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_indirect_no_movement_when_restoring_raw(self):
        s = alpha_cosine(8)
        x, yT = pair()
        y = degrade(s, x, yT, 5)
        np.testing.assert_allclose(step_indirect(Oracle(yT), s, y, yT, 5), y, atol=1e-15)

    def test_indirect_simplified_form(self):
        s = alpha_cosine(8)
        x, yT = pair()
        y = RngStream(3).uniform((4, 4))
        R = RngStream(4).uniform((4, 4))
        out = step_indirect(None, s, y, yT, 5, restoration=R)
        np.testing.assert_allclose(out, y + s.delta(5) * (R - yT), atol=1e-14)

    @pytest.mark.parametrize("t", [0, 9])
    def test_step_range(self, t):
        s = alpha_cosine(8)
        x, yT = pair()
        with pytest.raises(DomainError):
            step_indirect(Oracle(x), s, yT, yT, t)
        with pytest.raises(DomainError):
            step_direct(Oracle(x), s, yT, yT, t)

    def test_restoration_shape_checked(self):
        s = alpha_cosine(4)
        x, yT = pair()
        with pytest.raises(ShapeError):
            step_direct(lambda y, t, r: np.zeros((2, 2)), s, yT, yT, 2)


class TestReconstruct:
    @pytest.mark.parametrize("mode", ["direct", "indirect"])
    @pytest.mark.parametrize("T", [1, 2, 7, 20, 100])
    def test_perfect_restoration_bitwise(self, mode, T):
        s = alpha_cosine(T)
        x, yT = pair((5, 5), seed=T)
        traj = reconstruct(Oracle(x), s, yT, mode)
        assert traj.y_0.tobytes() == x.tobytes()

    @pytest.mark.parametrize("mode", ["direct", "indirect"])
    def test_perfect_restoration_float32(self, mode):
        s = alpha_cosine(20)
        x, yT = (a.astype(np.float32) for a in pair((5, 5)))
        np.testing.assert_allclose(reconstruct(Oracle(x), s, yT, mode).y_0, x, atol=1e-5)

    def test_shared_error_not_amplified(self):
        s = alpha_cosine(30)
        x, yT = pair()
        d = 0.05 * RngStream(9).normal((4, 4))
        traj = reconstruct(Oracle(x + d), s, yT, "indirect")
        np.testing.assert_allclose(traj.y_0, x + d, atol=1e-12)

    @given(st.integers(2, 40), st.integers(0, 1000))
    def test_bounded_error(self, T, seed):
        s = alpha_cosine(T)
        x, yT = pair(seed=seed)
        delta = 0.03
        model = Oracle(x, noise=0.1, rng=RngStream(seed), clamp=delta)
        y0 = reconstruct(model, s, yT, "indirect").y_0
        assert np.max(np.abs(y0 - x)) <= delta + 1e-12

    def test_trajectory_structure(self):
        s = alpha_cosine(10)
        x, yT = pair()
        traj = reconstruct(Oracle(x), s, yT, "indirect", steps=[10, 6, 3, 0])
        assert traj.steps == [10, 6, 3, 0]
        assert len(traj.y) == 4 and len(traj.restorations) == 3
        assert traj.y_T is yT or np.array_equal(traj.y_T, yT)
        assert traj.n_steps == 3

    def test_keep_states_false(self):
        s = alpha_cosine(10)
        x, yT = pair()
        traj = reconstruct(Oracle(x), s, yT, keep_states=False)
        assert len(traj.y) == 2

    @pytest.mark.parametrize("steps", [[10, 5], [9, 0], [10, 5, 5, 0], [10, 3, 6, 0], [10]])
    def test_invalid_sequences(self, steps):
        with pytest.raises(DomainError):
            check_step_sequence(alpha_cosine(10), steps)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            reconstruct(Oracle(np.zeros(2)), alpha_cosine(3), np.zeros(2), "sideways")

    def test_uniform_steps(self):
        assert uniform_steps(20, 5) == [20, 16, 12, 8, 4, 0]
        assert uniform_steps(10, 10) == list(range(10, -1, -1))
        assert len(uniform_steps(50, 7)) == 8
        with pytest.raises(DomainError):
            uniform_steps(5, 6)


class TestHistoryExpansion:
    def _net(self, dtype):
        return nn.RestorationNet(width=4, time_dim=8, dropout=0.0, image_shape=(8, 8),
                                 seed=1, dtype=dtype)

    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-12)])
    def test_matches_loop(self, dtype, tol):
        s = alpha_cosine(20)
        yT = RngStream(0).uniform((2, 8, 8)).astype(dtype)
        traj = reconstruct(self._net(dtype), s, yT, "indirect")
        np.testing.assert_allclose(history_expansion(traj, s), traj.y_0, atol=tol, rtol=0)
        np.testing.assert_allclose(history_expansion(traj, s, 7), traj.y[traj.steps.index(7)],
                                   atol=tol, rtol=0)

    def test_constant_restorations(self):
        s = alpha_cosine(12)
        yT = RngStream(1).uniform((3, 3))
        traj = reconstruct(Oracle(np.full((3, 3), 0.7)), s, yT, "indirect")
        np.testing.assert_allclose(history_expansion(traj, s), 0.7, atol=1e-14)

    def test_at_T(self):
        s = alpha_cosine(6)
        yT = RngStream(1).uniform((3, 3))
        traj = reconstruct(Oracle(np.zeros((3, 3))), s, yT, "indirect")
        np.testing.assert_array_equal(history_expansion(traj, s, 6), yT)

    def test_direct_rejected(self):
        s = alpha_cosine(4)
        traj = reconstruct(Oracle(np.zeros(2)), s, np.ones(2), "direct")
        with pytest.raises(UsageError):
            history_expansion(traj, s)


class TestTraining:
    def test_oracle_mae_zero(self):
        """A network whose output equals the target gives zero loss."""
        from ddm import autodiff as ad
        x = RngStream(0).uniform((2, 8, 8))
        mu = ad.Var(x[..., None])
        assert float(nn.mae_graph(mu, x[..., None]).data) == 0.0

    def _run(self, loss, steps=60, seed=0):
        net = nn.RestorationNet(width=4, time_dim=8, dropout=0.0, image_shape=(8, 8), seed=seed,
                                heads="mean+logvar" if loss == "nll" else "mean")
        opt = nn.Adam(net, lr=5e-3)
        s = alpha_cosine(10)
        x, yT = pair((1, 8, 8), seed=5)
        return [ddm_train_step(net, opt, s, x, yT, RngStream(seed).child(i), loss)
                for i in range(steps)]

    @pytest.mark.parametrize("loss", ["mae", "nll"])
    def test_single_sample_overfit(self, loss):
        curve = self._run(loss, steps=500)
        assert np.mean(curve[-20:]) < curve[0]

    def test_deterministic(self):
        assert self._run("mae", 15) == self._run("mae", 15)

    def test_nll_needs_sigma_head(self):
        net = nn.RestorationNet(width=4, time_dim=8, heads="mean", image_shape=(8, 8))
        x, yT = pair((1, 8, 8))
        with pytest.raises(UsageError):
            ddm_train_step(net, nn.Adam(net), alpha_cosine(4), x, yT, RngStream(0), "nll")

    def test_shape_mismatch(self):
        net = nn.RestorationNet(width=4, time_dim=8, image_shape=(8, 8))
        with pytest.raises(ShapeError):
            ddm_train_step(net, nn.Adam(net), alpha_cosine(4), np.zeros((1, 8, 8)),
                           np.zeros((2, 8, 8)), RngStream(0))


class TestEstimator:
    def _data(self, n=24):
        r = RngStream(0)
        X = r.uniform((n, 8, 8))
        return X, np.clip(X[:, ::-1] * 0.5 + 0.2, 0, 1)

    def test_params_and_clone(self):
        est = DDMRestorer(n_steps=7, width=4)
        p = est.get_params()
        assert p["n_steps"] == 7 and p["width"] == 4 and p["sampling"] == "indirect"
        assert clone(est).get_params() == p

    def test_fit_predict(self):
        Y, X = self._data()
        est = DDMRestorer(n_steps=5, width=4, time_dim=8, max_iter=6, batch_size=8)
        epochs = []
        est.fit(Y, X, on_epoch=lambda e, loss: epochs.append(e))
        assert est.n_iter_ == 6 and len(est.loss_curve_) == 6 and epochs == [0, 1]
        P = est.predict(Y[:3])
        assert P.shape == (3, 8, 8) and P.dtype == np.float64
        assert est.trajectory(Y[:2], steps=2).n_steps == 2
        np.testing.assert_array_equal(est.predict(Y[:3]), P)
        assert est.score(Y[:3], X[:3]) <= 0

    def test_fit_deterministic(self):
        Y, X = self._data()
        a = DDMRestorer(n_steps=5, width=4, time_dim=8, max_iter=4).fit(Y, X)
        b = DDMRestorer(n_steps=5, width=4, time_dim=8, max_iter=4).fit(Y, X)
        np.testing.assert_array_equal(a.loss_curve_, b.loss_curve_)

    def test_validation(self):
        from sklearn.exceptions import NotFittedError
        Y, X = self._data()
        with pytest.raises(NotFittedError):
            DDMRestorer().predict(Y)
        with pytest.raises(DomainError):
            DDMRestorer().fit(Y * 3, X)
        with pytest.raises(ShapeError):
            DDMRestorer().fit(Y, X[:-1])
        with pytest.raises(ValueError):
            DDMRestorer(max_iter=1).fit(np.full((2, 8, 8), np.nan), X[:2])
        est = DDMRestorer(n_steps=3, width=4, time_dim=8, max_iter=1).fit(Y, X)
        with pytest.raises(ShapeError):
            est.predict(np.zeros((1, 6, 6)))
