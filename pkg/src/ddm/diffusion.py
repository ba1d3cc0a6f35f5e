"""Deterministic diffusion: training step, direct/indirect samplers and the estimator.

A restoration model is anything callable as ``model(y, t, rng)`` that returns
either an array of restored images or a :class:`~ddm.nn.GaussianPrediction`
(whose mean is used). :class:`~ddm.nn.RestorationNet` qualifies, and so do
hand-written oracles in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ddm import autodiff as ad
from ddm import nn
from ddm.exceptions import DomainError, ShapeError, UsageError
from ddm.schedule import Schedule, alpha_cosine, degrade
from ddm.tensor import RngStream, as_rng
from ddm.training import run_training
from ddm.validation import check_images

MODES = ("direct", "indirect")


def restore(model, y, t, rng=None) -> np.ndarray:
    """Restored image(s) predicted by ``model`` from state ``y`` at step ``t``."""
    out = model(y, t, rng)
    if isinstance(out, nn.GaussianPrediction):
        out = out.mu
    out = np.asarray(out)
    if out.shape != np.shape(y):
        raise ShapeError(f"restoration shape {out.shape} does not match input {np.shape(y)}")
    return out


def _check_t(sched: Schedule, t: int, t_prev: int):
    if not 1 <= t <= sched.T:
        raise DomainError(f"step {t} outside [1, {sched.T}]")
    if not 0 <= t_prev < t:
        raise DomainError(f"next step {t_prev} must lie in [0, {t})")


def step_direct(model, sched: Schedule, y_t, y_T, t: int, t_prev=None, rng=None):
    """``D(R(y_t, t), t_prev)``, with ``t_prev = t - 1`` by default."""
    t_prev = t - 1 if t_prev is None else t_prev
    _check_t(sched, t, t_prev)
    R = restore(model, y_t, t, rng)
    return degrade(sched, R.astype(np.result_type(y_T, R)), y_T, t_prev)


def step_indirect(model, sched: Schedule, y_t, y_T, t: int, t_prev=None, rng=None,
                  restoration=None):
    """``y_t - D(R, t) + D(R, t_prev)``; tolerant to restoration error.

    Pass ``restoration`` to supply ``R`` directly instead of querying ``model``.
    """
    t_prev = t - 1 if t_prev is None else t_prev
    _check_t(sched, t, t_prev)
    R = restore(model, y_t, t, rng) if restoration is None else np.asarray(restoration)
    R = R.astype(np.result_type(y_T, R))
    # evaluation order matters: (y_t - D_t) is exactly 0 on a perfect chain
    return (y_t - degrade(sched, R, y_T, t)) + degrade(sched, R, y_T, t_prev)


@dataclass
class Trajectory:
    """States visited by a reverse chain; ``steps[i]`` indexes ``y[i]``."""

    mode: str
    steps: list
    y: list = field(default_factory=list)
    restorations: list = field(default_factory=list)

    @property
    def y_T(self):
        return self.y[0]

    @property
    def y_0(self):
        return self.y[-1]

    @property
    def n_steps(self) -> int:
        return len(self.steps) - 1


def check_step_sequence(sched: Schedule, steps) -> list:
    """Validate a strictly decreasing sequence from ``T`` to 0 (or build the full one)."""
    if steps is None:
        return list(range(sched.T, -1, -1))
    steps = [int(s) for s in steps]
    if len(steps) < 2 or steps[0] != sched.T or steps[-1] != 0:
        raise DomainError(f"step sequence must start at T={sched.T} and end at 0")
    if any(b >= a for a, b in zip(steps, steps[1:])):
        raise DomainError("step sequence must be strictly decreasing")
    return steps


def uniform_steps(T: int, K: int) -> list:
    """``K`` reverse steps spread evenly over ``T``: ``round(T * i / K)`` for ``i = K..0``."""
    if not 1 <= K <= T:
        raise DomainError(f"cannot visit {K} steps of a {T}-step schedule")
    grid = sorted({int(np.floor(T * i / K + 0.5)) for i in range(K + 1)}, reverse=True)
    return grid


def reconstruct(model, sched: Schedule, y_T, mode="indirect", steps=None, rng=None,
                keep_states=True) -> Trajectory:
    """Run the reverse chain from the raw pattern ``y_T`` down to step 0."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    steps = check_step_sequence(sched, steps)
    y_T = np.asarray(y_T)
    traj = Trajectory(mode, steps, [y_T])
    y = y_T
    for t, t_prev in zip(steps, steps[1:]):
        sub = None if rng is None else rng.child(f"t{t}")
        R = restore(model, y, t, sub)
        if mode == "indirect":
            y = step_indirect(model, sched, y, y_T, t, t_prev, restoration=R)
        else:
            y = degrade(sched, R.astype(np.result_type(y_T, R)), y_T, t_prev)
        traj.restorations.append(R)
        if keep_states or t_prev == 0:
            traj.y.append(y)
    return traj


def history_expansion(traj: Trajectory, sched: Schedule, t: int = 0) -> np.ndarray:
    """Closed-form state at step ``t`` from the raw pattern and the stored restorations.

    ``y_t = (1 - alpha_t) y_T + sum_{s > t} (alpha_prev(s) - alpha_s) R_s``;
    at ``t = 0`` this is a convex combination of all restorations.
    """
    if traj.mode != "indirect":
        raise UsageError("the history expansion only holds for indirect trajectories")
    if t not in traj.steps:
        raise DomainError(f"step {t} not visited by the trajectory")
    a = sched.alphas
    y_T = traj.y_T
    out = (1.0 - a[t]) * y_T
    for s, s_prev, R in zip(traj.steps, traj.steps[1:], traj.restorations):
        if s <= t:
            break
        out = out + (a[s_prev] - a[s]) * R
    return out


def ddm_train_step(net: nn.RestorationNet, opt: nn.Adam, sched: Schedule, x, y_T,
                   rng: RngStream, loss="mae", lr=None) -> float:
    """One optimizer step on a batch: random ``t``, degrade, restore, compare with ``x``."""
    x = np.asarray(x)
    y_T = np.asarray(y_T)
    if x.shape != y_T.shape:
        raise ShapeError(f"x {x.shape} and y_T {y_T.shape} differ")
    if x.ndim == 2:
        x, y_T = x[None], y_T[None]
    t = rng.integers(1, sched.T + 1, dims=(len(x),))
    a = sched.alphas[t][:, None, None]
    y_t = a * x + (1.0 - a) * y_T
    net.dropout_active = net.dropout > 0
    net.zero_grad()
    mu, logvar = net.graph(y_t, t, rng.child("dropout"))
    target = x[..., None]
    if loss == "nll":
        if logvar is None:
            raise UsageError("nll loss needs a network with a log-variance head")
        value = nn.gaussian_nll_graph(mu, logvar, target)
    elif loss == "mae":
        value = nn.mae_graph(mu, target)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    ad.backward(value)
    opt.step(lr)
    net.dropout_active = False
    return float(value.data)


class DDMRestorer(BaseEstimator):
    """Deterministic diffusion model mapping raw patterns to images.

    ``fit(X, y)`` takes raw patterns ``X`` and ground-truth images ``y``, both
    ``(n, H, W)`` in [0, 1]; ``predict(X)`` runs the reverse chain.

    Parameters
    ----------
    n_steps : int
        Diffusion horizon ``T``.
    width, time_dim : int
        Backbone width and time-embedding width.
    dropout : float
        MC dropout rate of the backbone.
    uncertainty : bool
        Train a log-variance head with the Gaussian NLL instead of MAE.
    learning_rate, batch_size, max_iter : training hyperparameters
        ``max_iter`` counts optimizer steps.
    sampling : {"indirect", "direct"}
        Default reverse sampler.
    random_state : int
        Seed for initialisation, minibatch order, step draws and dropout.
    """

    def __init__(self, n_steps=20, width=16, time_dim=32, dropout=0.1, uncertainty=False,
                 learning_rate=2e-3, batch_size=32, max_iter=2000, sampling="indirect",
                 random_state=0):
        self.n_steps = n_steps
        self.width = width
        self.time_dim = time_dim
        self.dropout = dropout
        self.uncertainty = uncertainty
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.sampling = sampling
        self.random_state = random_state

    def _build(self, image_shape):
        self.schedule_ = alpha_cosine(self.n_steps)
        self.net_ = nn.RestorationNet(
            in_channels=1, width=self.width, time_dim=self.time_dim, dropout=self.dropout,
            heads="mean+logvar" if self.uncertainty else "mean",
            image_shape=image_shape, seed=as_rng(self.random_state).child("net").seed)

    def fit(self, X, y, on_epoch=None):
        X = check_images(X, unit_range=True)
        y = check_images(y, unit_range=True)
        if X.shape != y.shape:
            raise ShapeError(f"patterns {X.shape} and images {y.shape} differ")
        self._build(X.shape[1:])
        self.image_shape_ = X.shape[1:]
        opt = nn.Adam(self.net_, lr=self.learning_rate)
        loss = "nll" if self.uncertainty else "mae"
        Xf, yf = X.astype(np.float32), y.astype(np.float32)

        def step(idx, rng, lr):
            return ddm_train_step(self.net_, opt, self.schedule_, yf[idx], Xf[idx], rng, loss, lr)

        self.loss_curve_, self.epoch_losses_ = run_training(
            step, len(X), self.batch_size, self.max_iter,
            as_rng(self.random_state).child("train"), self.learning_rate, on_epoch)
        self.n_iter_ = len(self.loss_curve_)
        return self

    def _patterns(self, X):
        check_is_fitted(self, "net_")
        X = check_images(X, unit_range=True)
        if X.shape[1:] != self.image_shape_:
            raise ShapeError(f"model fitted on {self.image_shape_} images, got {X.shape[1:]}")
        return X

    def __call__(self, y, t, rng=None):
        return self.net_(y, t, rng)

    def trajectory(self, X, mode=None, steps=None) -> Trajectory:
        """Reverse chain for patterns ``X``; ``steps`` is a count or an explicit sequence."""
        X = self._patterns(X)
        if isinstance(steps, (int, np.integer)):
            steps = uniform_steps(self.schedule_.T, int(steps))
        self.net_.dropout_active = False
        return reconstruct(self.net_, self.schedule_, X.astype(np.float32),
                           mode or self.sampling, steps)

    def predict(self, X, mode=None, steps=None) -> np.ndarray:
        return self.trajectory(X, mode, steps).y_0.astype(np.float64)

    def score(self, X, y) -> float:
        """Negative mean squared error of the reconstructions."""
        y = check_images(y)
        return -float(np.mean((self.predict(X) - y) ** 2))
