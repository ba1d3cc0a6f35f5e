"""Conditional Gaussian diffusion baseline with deterministic (eta = 0) sampling.

The network predicts the injected noise from the raw-pattern condition
``y_c`` and a noised sample ``y*_t = sqrt(g_t) y0 + sqrt(1 - g_t) eps``, where
``g_t`` is the cumulative product of ``1 - beta_s``. Sampling starts from
standard normal noise and follows the DDIM update, optionally on a
quadratically respaced subset of the trained steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ddm import autodiff as ad
from ddm import nn
from ddm.exceptions import DomainError, ShapeError, UsageError
from ddm.tensor import RngStream, as_rng
from ddm.training import run_training
from ddm.validation import check_images

NOISE_LEVEL_SCALE = 1000.0


@dataclass(frozen=True)
class DpmSchedule:
    T: int
    betas: np.ndarray
    gammas: np.ndarray
    eta: float = 0.0

    def sigma(self, t: int, t_prev: int | None = None) -> float:
        """Sampler std for the jump ``t -> t_prev``; zero whenever ``eta`` is zero."""
        t_prev = t - 1 if t_prev is None else t_prev
        if self.eta == 0.0:
            return 0.0
        g, gp = self.gammas[t], self.gammas[t_prev]
        return float(np.sqrt(self.eta * (1 - gp) / (1 - g) * (1 - g / gp)))

    def noise_level(self, t) -> np.ndarray:
        """Conditioning value fed to the network's step embedding."""
        return NOISE_LEVEL_SCALE * self.gammas[np.asarray(t)]


def gamma_schedule(T: int, beta_1=1e-4, beta_T=0.05, eta=0.0) -> DpmSchedule:
    """Linear betas from ``beta_1`` to ``beta_T``; ``gamma_t = prod_{s<=t} (1 - beta_s)``."""
    if int(T) != T or T < 1:
        raise DomainError(f"T must be a positive integer, got {T}")
    if not 0 < beta_1 <= beta_T < 1:
        raise DomainError(f"need 0 < beta_1 <= beta_T < 1, got ({beta_1}, {beta_T})")
    if not 0.0 <= eta <= 1.0:
        raise DomainError(f"eta must lie in [0, 1], got {eta}")
    T = int(T)
    betas = np.linspace(beta_1, beta_T, T)
    gammas = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return DpmSchedule(T, betas, gammas, float(eta))


def dpm_degrade(sched: DpmSchedule, y0, t: int, rng: RngStream | None = None, eps=None):
    """Noised sample at step ``t`` and the noise used; pass ``eps`` to reuse stored noise."""
    if not 0 <= t <= sched.T:
        raise DomainError(f"step {t} outside [0, {sched.T}]")
    y0 = np.asarray(y0, dtype=np.float64)
    if eps is None:
        eps = rng.normal(y0.shape)
    g = sched.gammas[t]
    return np.sqrt(g) * y0 + np.sqrt(1.0 - g) * eps, eps


def estimate_x0(sched: DpmSchedule, y_star, eps_hat, t: int) -> np.ndarray:
    """Invert the noising map: ``(y*_t - sqrt(1 - g_t) eps_hat) / sqrt(g_t)``."""
    if not 1 <= t <= sched.T:
        raise DomainError(f"step {t} outside [1, {sched.T}]")
    g = sched.gammas[t]
    if g <= 0:
        raise DomainError(f"gamma_{t} = 0 cannot be inverted")
    return (np.asarray(y_star) - np.sqrt(1.0 - g) * np.asarray(eps_hat)) / np.sqrt(g)


def _stack(y_c, y_t):
    return np.stack([np.asarray(y_c), np.asarray(y_t)], axis=1)


def predict_noise(net, sched: DpmSchedule, y_t, y_c, t) -> np.ndarray:
    out = net(_stack(y_c, y_t), sched.noise_level(t), None)
    if isinstance(out, nn.GaussianPrediction):
        out = out.mu
    return np.asarray(out)


def ddim_step(net, sched: DpmSchedule, y_t, y_c, t: int, t_prev=None, rng=None,
              eps_hat=None) -> np.ndarray:
    """Move from ``t`` to ``t_prev`` (default ``t - 1``) along the DDIM posterior mean.

    ``net`` is called as ``net(stack(y_c, y_t), noise_level, None)``; pass
    ``eps_hat`` to skip the network query.
    """
    t_prev = t - 1 if t_prev is None else t_prev
    if not 1 <= t <= sched.T or not 0 <= t_prev < t:
        raise DomainError(f"invalid step {t} -> {t_prev}")
    if eps_hat is None:
        eps_hat = predict_noise(net, sched, y_t, y_c, t)
    x0 = estimate_x0(sched, y_t, eps_hat, t)
    gp = sched.gammas[t_prev]
    sigma = sched.sigma(t, t_prev)
    out = np.sqrt(gp) * x0 + np.sqrt(1.0 - gp - sigma ** 2) * eps_hat
    if sigma > 0:
        if rng is None:
            raise UsageError("stochastic sampling (eta > 0) needs an RngStream")
        out = out + sigma * rng.normal(out.shape)
    return out


def respace_quadratic(T: int, K: int) -> list:
    """Increasing steps ``round(T (i/K)^2)``, ``i = 0..K``, deduplicated; sample in reverse.

    ``K == T`` means every trained step and returns ``0..T``.
    """
    if not 1 <= K <= T:
        raise DomainError(f"need 1 <= K <= T, got K={K}, T={T}")
    if K == T:
        return list(range(T + 1))
    return sorted({int(np.floor(T * (i / K) ** 2 + 0.5)) for i in range(K + 1)})


def sample(net, sched: DpmSchedule, y_c, rng: RngStream, steps=None, y_T=None) -> np.ndarray:
    """Reverse chain from noise (or the given ``y_T``) to ``y_0``; ``steps`` ascending."""
    steps = list(range(sched.T + 1)) if steps is None else list(steps)
    if steps[0] != 0 or steps[-1] != sched.T:
        raise DomainError("step sequence must run from 0 to T")
    y_c = np.asarray(y_c)
    y = rng.normal(y_c.shape) if y_T is None else np.asarray(y_T, dtype=np.float64)
    rev = steps[::-1]
    for t, t_prev in zip(rev, rev[1:]):
        y = ddim_step(net, sched, y, y_c, t, t_prev, rng.child(f"z{t}"))
    return y


def dpm_train_step(net: nn.RestorationNet, opt: nn.Adam, sched: DpmSchedule, y_c, y0,
                   rng: RngStream, lr=None) -> float:
    """One optimizer step of the noise-prediction objective (mean absolute error)."""
    y_c = np.asarray(y_c)
    y0 = np.asarray(y0)
    if y_c.shape != y0.shape:
        raise ShapeError(f"condition {y_c.shape} and target {y0.shape} differ")
    t = rng.integers(1, sched.T + 1, dims=(len(y0),))
    eps = rng.normal(y0.shape)
    g = sched.gammas[t][:, None, None]
    y_star = np.sqrt(g) * y0 + np.sqrt(1.0 - g) * eps
    net.dropout_active = net.dropout > 0
    net.zero_grad()
    mu, _ = net.graph(_stack(y_c, y_star), sched.noise_level(t), rng.child("dropout"))
    loss = nn.mae_graph(mu, eps[..., None])
    ad.backward(loss)
    opt.step(lr)
    net.dropout_active = False
    return float(loss.data)


class DPMRestorer(BaseEstimator):
    """Conditional DPM baseline with the same backbone as :class:`~ddm.DDMRestorer`.

    Images and patterns are mapped from [0, 1] to [-1, 1] internally.
    ``respacing`` selects ``K`` quadratically spaced sampling steps
    (``None`` samples every step).
    """

    def __init__(self, n_steps=20, beta_start=1e-4, beta_end=0.5, width=16, time_dim=32,
                 dropout=0.1, learning_rate=2e-3, batch_size=32, max_iter=2000, respacing=None,
                 random_state=0):
        self.n_steps = n_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.width = width
        self.time_dim = time_dim
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.respacing = respacing
        self.random_state = random_state

    def fit(self, X, y, on_epoch=None):
        X = check_images(X, unit_range=True)
        y = check_images(y, unit_range=True)
        if X.shape != y.shape:
            raise ShapeError(f"patterns {X.shape} and images {y.shape} differ")
        self.schedule_ = gamma_schedule(self.n_steps, self.beta_start, self.beta_end)
        self.net_ = nn.RestorationNet(
            in_channels=2, width=self.width, time_dim=self.time_dim, dropout=self.dropout,
            heads="mean", image_shape=X.shape[1:],
            seed=as_rng(self.random_state).child("net").seed)
        self.image_shape_ = X.shape[1:]
        opt = nn.Adam(self.net_, lr=self.learning_rate)
        cond = (2.0 * X - 1.0).astype(np.float32)
        target = (2.0 * y - 1.0).astype(np.float32)

        def step(idx, rng, lr):
            return dpm_train_step(self.net_, opt, self.schedule_, cond[idx], target[idx], rng, lr)

        self.loss_curve_, self.epoch_losses_ = run_training(
            step, len(X), self.batch_size, self.max_iter,
            as_rng(self.random_state).child("train"), self.learning_rate, on_epoch)
        self.n_iter_ = len(self.loss_curve_)
        return self

    def sampling_steps(self) -> list:
        T = self.schedule_.T
        return list(range(T + 1)) if self.respacing is None else respace_quadratic(T, self.respacing)

    def predict(self, X, rng=None) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_images(X, unit_range=True)
        if X.shape[1:] != self.image_shape_:
            raise ShapeError(f"model fitted on {self.image_shape_} images, got {X.shape[1:]}")
        rng = as_rng(self.random_state).child("sample") if rng is None else as_rng(rng)
        y = sample(self.net_, self.schedule_, 2.0 * X - 1.0, rng, self.sampling_steps())
        return np.clip((y + 1.0) / 2.0, 0.0, 1.0)

    def score(self, X, y) -> float:
        y = check_images(y)
        return -float(np.mean((self.predict(X) - y) ** 2))
