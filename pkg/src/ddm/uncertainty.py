"""MC-dropout uncertainty per diffusion step and its propagation along the chain.

At every visited step the network is evaluated ``S`` times with dropout
active. The spread of the predicted means is the model uncertainty, and the
RMS of the predicted standard deviations is the data uncertainty. Only the
predictive mean drives the indirect update to the next state.

Totals combine the per-step maps with the chain weights
``w_t = alpha_{t-1} - alpha_t``:

* ``naive``: ``sum_t w_t * sigma_t``
* ``full``:  ``sqrt(sum_t (w_t * sigma_t)^2 + 2 * sum_t w_t * cov_t)``, where
  ``cov_t`` couples step ``t`` with step ``t+1`` and is estimated by Monte Carlo
  (zero at the first step ``T``). A negative total variance is clamped to
  zero and counted.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ddm import nn
from ddm.diffusion import check_step_sequence, step_indirect
from ddm.exceptions import DomainError, ShapeError, UsageError
from ddm.schedule import Schedule, degrade
from ddm.tensor import RngStream

log = logging.getLogger(__name__)

PROPAGATION_MODES = ("naive", "full")
COVARIANCE_KINDS = ("model", "data", "data_sampled")


@dataclass
class StepStatistics:
    t: int
    y: np.ndarray
    mu_hat: np.ndarray
    sigma_model: np.ndarray
    sigma_data: np.ndarray
    mus: np.ndarray
    sigmas: np.ndarray

    @property
    def n_samples(self) -> int:
        return len(self.mus)


@dataclass
class UncertaintyReport:
    total_model: np.ndarray
    total_data: np.ndarray
    per_step: list
    mode: str
    S: int
    H: int
    cov_model: dict = field(default_factory=dict)
    cov_data: dict = field(default_factory=dict)
    clamped_model: int = 0
    clamped_data: int = 0
    reconstruction: np.ndarray | None = None

    @property
    def steps(self) -> list:
        return [s.t for s in self.per_step]


def moment_estimates(mus, sigmas):
    """Predictive mean, model std and data std of a set of ``(mu, sigma)`` samples."""
    mus = np.asarray(mus, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if mus.shape != sigmas.shape:
        raise ShapeError(f"mus {mus.shape} and sigmas {sigmas.shape} differ")
    mu_hat = mus.mean(axis=0)
    # spread measured from the first sample so identical samples give exactly 0
    d = mus - mus[0]
    sigma_model = np.sqrt(np.mean((d - d.mean(axis=0)) ** 2, axis=0))
    sigma_data = np.sqrt(np.mean(sigmas ** 2, axis=0))
    return mu_hat, sigma_model, sigma_data


def _require_sigma_head(net):
    if getattr(net, "heads", "mean+logvar") == "mean":
        raise UsageError("uncertainty quantification needs a network with a sigma head")


def _dropout_pass(net, y, t, rng) -> nn.GaussianPrediction:
    """Forward pass with dropout switched on for the duration of the call."""
    previous = getattr(net, "dropout_active", None)
    if previous is not None:
        net.dropout_active = True
    try:
        out = net(y, t, rng)
    finally:
        if previous is not None:
            net.dropout_active = previous
    if not isinstance(out, nn.GaussianPrediction):
        raise UsageError("uncertainty quantification needs Gaussian predictions")
    return out


def _batched_pass(net, y, t, rng, chunk=512):
    mus, sigmas = [], []
    for i, start in enumerate(range(0, len(y), chunk)):
        pred = _dropout_pass(net, y[start:start + chunk], t, rng.child(f"chunk{i}"))
        mus.append(np.asarray(pred.mu, dtype=np.float64))
        sigmas.append(np.asarray(pred.sigma, dtype=np.float64))
    return np.concatenate(mus), np.concatenate(sigmas)


def mc_sample_step(net, y_t, t: int, S: int, rng: RngStream) -> StepStatistics:
    """``S`` dropout-active passes on a single state ``y_t`` of shape ``(H, W)``."""
    if S < 2:
        raise DomainError(f"need at least 2 dropout samples, got {S}")
    _require_sigma_head(net)
    y_t = np.asarray(y_t)
    mus, sigmas = _batched_pass(net, np.broadcast_to(y_t, (S,) + y_t.shape), t, rng)
    mu_hat, sigma_model, sigma_data = moment_estimates(mus, sigmas)
    return StepStatistics(t, y_t, mu_hat, sigma_model, sigma_data, mus, sigmas)


def covariance_estimate(net, stats_next: StepStatistics, sched: Schedule, t: int, H: int,
                        rng: RngStream, kind="model", y_T=None, S_inner=16) -> np.ndarray:
    """Monte Carlo coupling between the restorations at steps ``t + 1`` and ``t``.

    Each of the first ``H`` retained samples ``mu_{t+1}^(h)`` is pushed
    through the indirect update to a state ``y_t^(h)``, which is evaluated
    with ``S_inner`` dropout passes.

    * ``model``: mean over h of ``(mu_{t+1}^(h) - mu_hat_{t+1}) * (m_t^(h) - mean_h m_t^(h))``,
      with ``m_t^(h)`` the dropout-averaged step-``t`` mean at ``y_t^(h)``.
    * ``data``: mean over h of ``sigma_{t+1}^(h) * s_t^(h)``, with ``s_t^(h)`` the
      dropout-RMS step-``t`` sigma (correlation coefficient taken as one).
    * ``data_sampled``: restorations drawn from ``N(mu_{t+1}^(h), sigma_{t+1}^(h))``;
      mean over h of ``E[r * m_t(y_t(r))] - mu_{t+1}^(h) * E[m_t(y_t(r))]``.
    """
    if kind not in COVARIANCE_KINDS:
        raise ValueError(f"kind must be one of {COVARIANCE_KINDS}, got {kind!r}")
    if H < 2:
        raise DomainError(f"need H >= 2, got {H}")
    if stats_next.n_samples < H:
        raise DomainError(f"need {H} retained samples at step {t + 1}, have {stats_next.n_samples}")
    if y_T is None:
        raise UsageError("the raw pattern y_T is required for the indirect update")
    if stats_next.t != t + 1:
        raise DomainError(f"statistics are for step {stats_next.t}, expected {t + 1}")
    mus_next = stats_next.mus[:H]
    sig_next = stats_next.sigmas[:H]
    shape = stats_next.y.shape

    restorations = mus_next
    if kind == "data_sampled":
        draws = rng.child("draws").normal((H, S_inner) + shape)
        restorations = (mus_next[:, None] + sig_next[:, None] * draws).reshape((-1,) + shape)
    states = np.stack([
        step_indirect(None, sched, stats_next.y, y_T, t + 1, t, restoration=r)
        for r in restorations
    ])
    if kind == "data_sampled":
        inner = 1
        states_rep = states
    else:
        inner = S_inner
        states_rep = np.repeat(states, inner, axis=0)
    mus_t, sigmas_t = _batched_pass(net, states_rep, t, rng.child("inner"))

    if kind == "model":
        m_t = mus_t.reshape((H, inner) + shape).mean(axis=1)
        return np.mean((mus_next - stats_next.mu_hat) * (m_t - m_t.mean(axis=0)), axis=0)
    if kind == "data":
        s_t = np.sqrt(np.mean(sigmas_t.reshape((H, inner) + shape) ** 2, axis=1))
        return np.mean(sig_next * s_t, axis=0)
    r = restorations.reshape((H, S_inner) + shape)
    m_t = mus_t.reshape((H, S_inner) + shape)
    return np.mean(np.mean(r * m_t, axis=1) - mus_next * m_t.mean(axis=1), axis=0)


def _weights(sched: Schedule, steps) -> dict:
    return {t: sched.alphas[t_prev] - sched.alphas[t] for t, t_prev in zip(steps, steps[1:])}


def propagate(per_step, covariances, sched: Schedule, mode="full", S=None, H=None,
              steps=None) -> UncertaintyReport:
    """Combine per-step statistics into total model and data uncertainty maps.

    ``per_step`` lists :class:`StepStatistics` for every visited step from
    ``T`` downward. ``covariances`` maps a step ``t`` to a ``(model, data)``
    pair of maps; missing entries (always including ``T``) count as zero.
    """
    if mode not in PROPAGATION_MODES:
        raise ValueError(f"mode must be one of {PROPAGATION_MODES}, got {mode!r}")
    steps = check_step_sequence(sched, steps)
    by_t = {s.t: s for s in per_step}
    missing = [t for t in steps[:-1] if t not in by_t]
    if missing:
        raise DomainError(f"missing statistics for steps {missing}")
    if mode == "naive" and covariances:
        raise UsageError("naive propagation takes no covariances")
    w = _weights(sched, steps)
    ordered = [by_t[t] for t in steps[:-1]]
    first = ordered[0].mu_hat

    if mode == "naive":
        total_m = sum(w[s.t] * s.sigma_model for s in ordered)
        total_d = sum(w[s.t] * s.sigma_data for s in ordered)
        return UncertaintyReport(np.asarray(total_m), np.asarray(total_d), ordered, mode,
                                 S or ordered[0].n_samples, H or 0)

    covariances = covariances or {}
    zero = np.zeros_like(first)
    var_m = sum((w[s.t] * s.sigma_model) ** 2 for s in ordered)
    var_d = sum((w[s.t] * s.sigma_data) ** 2 for s in ordered)
    cov_m, cov_d = {}, {}
    for s in ordered:
        cm, cd = covariances.get(s.t, (zero, zero)) if s.t != sched.T else (zero, zero)
        cov_m[s.t], cov_d[s.t] = cm, cd
        var_m = var_m + 2 * w[s.t] * cm
        var_d = var_d + 2 * w[s.t] * cd
    neg_m = int(np.count_nonzero(var_m < 0))
    neg_d = int(np.count_nonzero(var_d < 0))
    if neg_m or neg_d:
        log.info("clamped %d model / %d data negative variances", neg_m, neg_d)
    return UncertaintyReport(np.sqrt(np.maximum(var_m, 0)), np.sqrt(np.maximum(var_d, 0)),
                             ordered, mode, S or ordered[0].n_samples, H or 0,
                             cov_m, cov_d, neg_m, neg_d)


def quantify(net, sched: Schedule, y_T, S=16, H=24, mode="full", rng: RngStream | None = None,
             steps=None, S_inner=None, data_kind="data") -> UncertaintyReport:
    """Run the mean-driven reverse chain on one raw pattern and propagate its uncertainty."""
    _require_sigma_head(net)
    rng = rng or RngStream(0)
    steps = check_step_sequence(sched, steps)
    S_inner = S if S_inner is None else S_inner
    y_T = np.asarray(y_T, dtype=np.float64)
    y = y_T
    per_step, covariances = [], {}
    prev = None
    for t, t_prev in zip(steps, steps[1:]):
        stats = mc_sample_step(net, y, t, S, rng.child(f"stats{t}"))
        per_step.append(stats)
        if mode == "full" and prev is not None:
            if prev.t != t + 1:
                raise DomainError("full propagation needs consecutive steps")
            cov_pool = mc_sample_step(net, prev.y, prev.t, max(H, 2), rng.child(f"pool{prev.t}"))
            cm = covariance_estimate(net, cov_pool, sched, t, H, rng.child(f"covm{t}"),
                                     "model", y_T, S_inner)
            cd = covariance_estimate(net, cov_pool, sched, t, H, rng.child(f"covd{t}"),
                                     data_kind, y_T, S_inner)
            covariances[t] = (cm, cd)
        y = step_indirect(None, sched, y, y_T, t, t_prev, restoration=stats.mu_hat)
        prev = stats
    report = propagate(per_step, covariances if mode == "full" else None, sched, mode, S, H, steps)
    report.reconstruction = y
    return report


def chain_variance_oracle(net, sched: Schedule, y_T, R_runs: int, rng: RngStream,
                          resample=False, steps=None, chunk=512) -> np.ndarray:
    """Per-pixel std of ``y_0`` over ``R_runs`` independent dropout-active chains.

    Each run uses one dropout pass per step. With ``resample`` the restoration
    is drawn from ``N(mu, sigma)`` instead of taking ``mu``, which folds the
    data uncertainty into the spread.
    """
    if R_runs < 16:
        raise DomainError(f"need at least 16 runs, got {R_runs}")
    steps = check_step_sequence(sched, steps)
    y_T = np.asarray(y_T, dtype=np.float64)
    y_T_runs = np.broadcast_to(y_T, (R_runs,) + y_T.shape)
    y = y_T_runs.copy()
    for t, t_prev in zip(steps, steps[1:]):
        mus, sigmas = _batched_pass(net, y, t, rng.child(f"t{t}"), chunk)
        R = mus
        if resample:
            R = mus + sigmas * rng.child(f"noise{t}").normal(mus.shape)
        y = step_indirect(None, sched, y, y_T_runs, t, t_prev, restoration=R)
    # centring on one run first keeps identical runs at exactly zero spread
    return (y - y[0]).std(axis=0)


def most_trusted_path(net, sched: Schedule, y_T, P_paths=8, S=16, rng: RngStream | None = None,
                      steps=None) -> np.ndarray:
    """Average of ``y_0`` over ``P_paths`` dropout-active chains driven by ``S``-sample means."""
    if P_paths < 1:
        raise DomainError("need at least one path")
    rng = rng or RngStream(0)
    steps = check_step_sequence(sched, steps)
    y_T = np.asarray(y_T, dtype=np.float64)
    finals = []
    for p in range(P_paths):
        y = y_T
        path_rng = rng.child(f"path{p}")
        for t, t_prev in zip(steps, steps[1:]):
            mus, _ = _batched_pass(net, np.broadcast_to(y, (S,) + y.shape), t,
                                   path_rng.child(f"t{t}"))
            y = step_indirect(None, sched, y, y_T, t, t_prev, restoration=mus.mean(axis=0))
        finals.append(y)
    return np.mean(finals, axis=0)
