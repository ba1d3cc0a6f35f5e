"""Restoration network, losses, MC dropout and the Adam optimizer.

The backbone is a two-level U-Net on ``(B, C, H, W)`` inputs:

    dropout -> [input, dense global mix] -> enc block (w) --.
    avgpool -> dropout -> mid block (2w)              | skip
    upsample -> concat ------------------------------'
    dropout -> dec block (w) -> 3x3 heads (mu, log-variance)

The dense global mix maps the whole flattened input to one extra image
channel. Without it every output pixel only sees a local neighbourhood,
which cannot undo a transmission matrix that spreads each input pixel over
the whole detector. Each block is ``conv -> +time bias -> SiLU -> conv -> SiLU``. The step
index (or noise level) enters through a sinusoidal embedding passed through
a small MLP and added as a per-channel bias in every block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ddm import autodiff as ad
from ddm.exceptions import DomainError, ShapeError, UsageError
from ddm.tensor import RngStream

LOGVAR_MIN = -10.0
LOGVAR_MAX = 4.0
HEADS = ("mean", "mean+logvar")


@dataclass
class GaussianPrediction:
    """Per-pixel predictive mean and standard deviation."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ShapeError(f"mu {self.mu.shape} and sigma {self.sigma.shape} differ")


def sinusoidal_embedding(values, dim: int, dtype=np.float32) -> np.ndarray:
    """``(B,) -> (B, dim)`` sin/cos features at geometrically spaced frequencies."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = values[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


def mc_dropout(x: np.ndarray, p: float, rng: RngStream) -> np.ndarray:
    """Inverted Bernoulli dropout: zero with probability ``p``, else scale by ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = rng.bernoulli(1.0 - p, x.shape)
    return x * keep / (1.0 - p)


def _dropout_var(x: ad.Var, p: float, rng: RngStream) -> ad.Var:
    if p == 0.0:
        return x
    keep = rng.bernoulli(1.0 - p, x.shape).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)
    return ad.mul(x, keep)


class RestorationNet:
    """Two-level U-Net with optional log-variance head and MC dropout sites.

    Parameters
    ----------
    in_channels : int
        Channels of the network input (1 for DDM, 2 for the conditional DPM).
    width : int
        Channel count of the full-resolution blocks; the bottleneck uses twice this.
    time_dim : int
        Width of the sinusoidal step embedding.
    dropout : float
        Rate of the dropout sites placed before each encoder/decoder block.
    heads : {"mean", "mean+logvar"}
        Whether to predict a per-pixel standard deviation.
    seed : int
        Seed for weight initialisation.
    image_shape : (int, int)
        Spatial size the dense global-mixing branch is built for.
    nonlocal_mix : bool
        Include the dense global-mixing branch.
    zero_head : bool
        Initialise the output heads to zero.
    """

    def __init__(self, in_channels=1, width=16, time_dim=32, dropout=0.1,
                 heads="mean+logvar", seed=0, dtype=np.float32, zero_head=False,
                 image_shape=(16, 16), nonlocal_mix=True):
        if heads not in HEADS:
            raise ValueError(f"heads must be one of {HEADS}, got {heads!r}")
        if not 0.0 <= dropout < 1.0:
            raise DomainError(f"dropout rate must lie in [0, 1), got {dropout}")
        self.in_channels = int(in_channels)
        self.width = int(width)
        self.time_dim = int(time_dim)
        self.dropout = float(dropout)
        self.heads = heads
        self.image_shape = tuple(int(n) for n in image_shape)
        self.nonlocal_mix = bool(nonlocal_mix)
        self.dtype = np.dtype(dtype)
        self.dropout_active = False
        self.params: dict[str, ad.Var] = {}
        self._init_params(RngStream(seed).child("init"), zero_head)

    # -- construction -------------------------------------------------
    def config(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "width": self.width,
            "time_dim": self.time_dim,
            "dropout": self.dropout,
            "heads": self.heads,
            "image_shape": list(self.image_shape),
            "nonlocal_mix": self.nonlocal_mix,
        }

    def _conv(self, rng, name, cin, cout, zero=False, gain=2.0):
        std = 0.0 if zero else np.sqrt(gain / (cin * 9))
        self.params[f"{name}.w"] = rng.normal((cout, cin, 3, 3)) * std
        self.params[f"{name}.b"] = np.zeros(cout)

    def _dense(self, rng, name, din, dout):
        self.params[f"{name}.w"] = rng.normal((din, dout)) * np.sqrt(1.0 / din)
        self.params[f"{name}.b"] = np.zeros(dout)

    def _init_params(self, rng, zero_head):
        w, td = self.width, self.time_dim
        self._dense(rng, "temb", td, td)
        if self.nonlocal_mix:
            n_pix = self.image_shape[0] * self.image_shape[1]
            self._dense(rng, "mix", n_pix * self.in_channels, n_pix)
        for block, cin, cout in self._blocks():
            self._conv(rng, f"{block}.conv1", cin, cout)
            self._conv(rng, f"{block}.conv2", cout, cout)
            self._dense(rng, f"{block}.tproj", td, cout)
        self._conv(rng, "head_mu", w, 1, zero=zero_head, gain=0.1)
        if self.heads == "mean+logvar":
            self._conv(rng, "head_logvar", w, 1, zero=zero_head, gain=0.1)
        self.params = {
            k: ad.Var(np.asarray(v, dtype=self.dtype), requires_grad=True, name=k)
            for k, v in self.params.items()
        }

    def _blocks(self):
        w, c = self.width, self.in_channels + self.nonlocal_mix
        return (("enc", c, w), ("mid", w, 2 * w), ("dec", 3 * w, w))

    # -- state --------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ShapeError(f"parameter sets differ: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: expected {self.params[k].shape}, got {v.shape}")
            self.params[k] = ad.Var(np.asarray(v, dtype=self.dtype), requires_grad=True, name=k)

    def astype(self, dtype) -> "RestorationNet":
        """Copy of the network with parameters cast to ``dtype``."""
        clone = RestorationNet.__new__(RestorationNet)
        clone.__dict__.update({k: v for k, v in self.__dict__.items() if k != "params"})
        clone.dtype = np.dtype(dtype)
        clone.params = {
            k: ad.Var(v.data.astype(dtype), requires_grad=True, name=k)
            for k, v in self.params.items()
        }
        return clone

    def zero_grad(self):
        for v in self.params.values():
            v.grad = None

    @property
    def n_parameters(self) -> int:
        return int(sum(v.data.size for v in self.params.values()))

    def __call__(self, y, t, rng=None) -> "GaussianPrediction":
        return forward(self, y, t, rng)

    # -- graph --------------------------------------------------------
    def _prepare(self, y) -> np.ndarray:
        """``(B, H, W)`` or ``(B, C, H, W)`` -> channels-last ``(B, H, W, C)``."""
        y = np.asarray(y, dtype=self.dtype)
        if y.ndim == 3 and self.in_channels == 1:
            y = y[..., None]
        elif y.ndim == 4 and y.shape[1] == self.in_channels:
            y = y.transpose(0, 2, 3, 1)
        else:
            raise ShapeError(
                f"expected input (B, {self.in_channels}, H, W), got {y.shape}")
        if y.shape[1] % 2 or y.shape[2] % 2:
            raise ShapeError(f"spatial dims {y.shape[1:3]} must be even")
        if self.nonlocal_mix and y.shape[1:3] != self.image_shape:
            raise ShapeError(f"network built for {self.image_shape} images, got {y.shape[1:3]}")
        return np.ascontiguousarray(y)

    def graph(self, y, cond, rng=None):
        """Build the forward graph; returns channels-last ``(mu, logvar)`` Vars.

        ``logvar`` is None for mean-only networks.
        """
        if self.dropout_active and self.dropout > 0 and rng is None:
            raise UsageError("an RngStream is required while dropout is active")
        P = self.params
        x = ad.Var(self._prepare(y))
        B = x.shape[0]
        cond = np.broadcast_to(np.asarray(cond, dtype=np.float64).reshape(-1), (B,))
        temb = ad.Var(sinusoidal_embedding(cond, self.time_dim, self.dtype))
        h_t = ad.silu(ad.matmul(temb, P["temb.w"]) + P["temb.b"])
        p = self.dropout if self.dropout_active else 0.0

        def block(h, name, drop=True):
            if drop:
                h = _dropout_var(h, p, rng)
            bias = ad.reshape(ad.matmul(h_t, P[f"{name}.tproj.w"]) + P[f"{name}.tproj.b"],
                              (B, 1, 1, -1))
            h = ad.silu(ad.conv2d(h, P[f"{name}.conv1.w"], P[f"{name}.conv1.b"]) + bias)
            return ad.silu(ad.conv2d(h, P[f"{name}.conv2.w"], P[f"{name}.conv2.b"]))

        x = _dropout_var(x, p, rng)
        if self.nonlocal_mix:
            Hh, Ww = self.image_shape
            flat = ad.reshape(x, (B, -1))
            mixed = ad.matmul(flat, P["mix.w"]) + P["mix.b"]
            x = ad.concat([x, ad.reshape(mixed, (B, Hh, Ww, 1))], axis=-1)
        enc = block(x, "enc", drop=False)
        mid = block(ad.avgpool2(enc), "mid")
        dec = block(ad.concat([ad.upsample2(mid), enc], axis=-1), "dec")
        mu = ad.conv2d(dec, P["head_mu.w"], P["head_mu.b"])
        logvar = None
        if self.heads == "mean+logvar":
            logvar = ad.clip(ad.conv2d(dec, P["head_logvar.w"], P["head_logvar.b"]),
                             LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar


def forward(net: RestorationNet, y, t, rng: RngStream | None = None) -> GaussianPrediction:
    """Evaluate the network without recording gradients.

    ``y`` is ``(B, H, W)`` (single-channel nets) or ``(B, C, H, W)``; ``t`` is a
    scalar or per-item conditioning value. Outputs are ``(B, H, W)``. Mean-only
    networks report ``sigma = 1`` everywhere.
    """
    mu, logvar = net.graph(y, t, rng)
    mu = mu.data[..., 0]
    if logvar is None:
        sigma = np.ones_like(mu)
    else:
        sigma = np.exp(0.5 * logvar.data[..., 0])
    return GaussianPrediction(mu, sigma)


def gaussian_nll(pred: GaussianPrediction, target) -> float:
    """Mean per-pixel Gaussian negative log-likelihood."""
    target = np.asarray(target, dtype=np.float64)
    mu = np.asarray(pred.mu, dtype=np.float64)
    sigma = np.asarray(pred.sigma, dtype=np.float64)
    if mu.shape != target.shape:
        raise ShapeError(f"prediction {mu.shape} vs target {target.shape}")
    if np.any(sigma <= 0):
        raise DomainError("sigma must be strictly positive")
    return float(np.mean(np.log(np.sqrt(2 * np.pi) * sigma)
                         + (target - mu) ** 2 / (2 * sigma ** 2)))


def gaussian_nll_graph(mu: ad.Var, logvar: ad.Var, target) -> ad.Var:
    """Differentiable NLL with ``sigma = exp(logvar / 2)``."""
    target = np.asarray(target, dtype=mu.data.dtype).reshape(mu.shape)
    half_log_2pi = mu.data.dtype.type(0.5 * np.log(2 * np.pi))
    resid2 = ad.square(ad.sub(target, mu))
    inv_var = ad.exp(ad.mul(logvar, -1.0))
    per_pixel = half_log_2pi + ad.mul(logvar, 0.5) + ad.mul(ad.mul(resid2, inv_var), 0.5)
    return ad.mean(per_pixel)


def mae_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    return float(np.mean(np.abs(pred - target)))


def mae_graph(pred: ad.Var, target) -> ad.Var:
    target = np.asarray(target, dtype=pred.data.dtype).reshape(pred.shape)
    return ad.mean(ad.absolute(ad.sub(pred, target)))


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict


def adam_step(theta: dict, grads: dict, state: AdamState | None, lr=1e-3,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns ``(new_theta, new_state)``."""
    if state is None:
        state = AdamState(0, {k: np.zeros_like(v) for k, v in theta.items()},
                          {k: np.zeros_like(v) for k, v in theta.items()})
    step = state.step + 1
    new_theta, m_new, v_new = {}, {}, {}
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for k, value in theta.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(value)
        if state.m[k].shape != value.shape:
            raise ShapeError(f"optimizer state for {k} has shape {state.m[k].shape}")
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * g * g
        m_new[k], v_new[k] = m, v
        upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_theta[k] = (value - upd).astype(value.dtype)
    return new_theta, AdamState(step, m_new, v_new)


class Adam:
    """Adam bound to a :class:`RestorationNet`'s parameters."""

    def __init__(self, net: RestorationNet, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.net = net
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: AdamState | None = None

    def step(self, lr=None):
        theta = {k: v.data for k, v in self.net.params.items()}
        grads = {k: v.grad for k, v in self.net.params.items()}
        new, self.state = adam_step(theta, grads, self.state, self.lr if lr is None else lr,
                                    self.beta1, self.beta2, self.eps)
        for k, v in self.net.params.items():
            v.data = new[k]
