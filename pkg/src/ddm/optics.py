"""Synthetic nonlocal optics: scattering and second-harmonic forward models.

Images in [0, 1] are phase-encoded as ``E_j = exp(i*pi*img_j)`` and pushed
through a complex linear map. The scattering model applies a transmission
matrix ``T`` and records ``|T E|^2``. The second-harmonic model uses a
rank-one factorized coupling ``d_mjk = A_mj B_mk`` so that
``E2_m = (A E)_m (B E)_m``: every detector pixel sees every input pixel.

The operators follow the scikit-learn transformer protocol: ``fit`` draws
the random optics for the image shape, ``transform`` maps images to
normalized intensity patterns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ddm.exceptions import DomainError, ShapeError
from ddm.tensor import RngStream, as_rng
from ddm.validation import check_images

_RANGE_TOL = 1e-12


def phase_encode(img) -> np.ndarray:
    """Map intensities in [0, 1] to unit-modulus phasors ``exp(i*pi*img)``."""
    img = np.asarray(img, dtype=np.float64)
    if img.size and (img.min() < -_RANGE_TOL or img.max() > 1 + _RANGE_TOL):
        raise DomainError("phase_encode expects values in [0, 1]")
    out = np.exp(1j * np.pi * img)
    # exact values at the quarter turns keep hand-checkable cases exact
    out[img == 0.0] = 1.0
    out[img == 0.5] = 1j
    out[img == 1.0] = -1.0
    return out


def make_transmission_matrix(rng: RngStream, M: int, N: int) -> np.ndarray:
    """Complex Gaussian matrix with i.i.d. entries of variance ``1/N``."""
    if M < 1 or N < 1:
        raise DomainError("matrix dims must be >= 1")
    scale = np.sqrt(0.5 / N)
    return scale * (rng.normal((M, N)) + 1j * rng.normal((M, N)))


def minmax_normalize(pattern: np.ndarray) -> np.ndarray:
    """Rescale each image of a ``(..., H, W)`` stack to span [0, 1]; flat images map to 0."""
    lo = pattern.min(axis=(-2, -1), keepdims=True)
    hi = pattern.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    flat = span <= 1e-12 * np.maximum(np.abs(hi), 1.0)
    out = (pattern - lo) / np.where(flat, 1.0, span)
    return np.where(flat, 0.0, np.clip(out, 0.0, 1.0))


class _PhaseOperator(TransformerMixin, BaseEstimator):
    kind = "abstract"

    def __init__(self, seed=0, noise_level=0.0, normalize=True):
        self.seed = seed
        self.noise_level = noise_level
        self.normalize = normalize

    def fit(self, X, y=None):
        X = check_images(X, unit_range=True)
        self.image_shape_ = X.shape[1:]
        self.n_pixels_ = int(np.prod(self.image_shape_))
        self._build(as_rng(self.seed).child(self.kind), self.n_pixels_)
        return self

    def intensity(self, X) -> np.ndarray:
        """Raw detector intensity before normalization and noise, ``(n, H, W)``."""
        check_is_fitted(self, "image_shape_")
        X = check_images(X, unit_range=True)
        if X.shape[1:] != self.image_shape_:
            raise ShapeError(f"operator fitted for {self.image_shape_}, got {X.shape[1:]}")
        fields = phase_encode(X.reshape(len(X), -1))
        out = self._field_out(fields)
        return (np.abs(out) ** 2).reshape(X.shape)

    def transform(self, X, rng=None) -> np.ndarray:
        """Normalized (and optionally noisy) patterns for images ``X``."""
        pattern = self.intensity(X)
        if self.normalize:
            pattern = minmax_normalize(pattern)
        if self.noise_level > 0:
            noise_rng = as_rng(rng) if rng is not None else as_rng(self.seed).child("noise")
            pattern = add_detection_noise(pattern, self.noise_level, noise_rng)
        return pattern

    def _build(self, rng, n):
        raise NotImplementedError

    def _field_out(self, fields):
        raise NotImplementedError


class ScatteringOperator(_PhaseOperator):
    """Multimode-fiber style scattering through a random transmission matrix."""

    kind = "scattering"

    def _build(self, rng, n):
        self.tmatrix_ = make_transmission_matrix(rng, n, n)

    def _field_out(self, fields):
        return fields @ self.tmatrix_.T


class SHGOperator(_PhaseOperator):
    """Second-harmonic generation with a factorized third-order coupling tensor."""

    kind = "shg"

    def _build(self, rng, n):
        self.factor_a_ = make_transmission_matrix(rng, n, n)
        self.factor_b_ = make_transmission_matrix(rng, n, n)

    def _field_out(self, fields):
        return (fields @ self.factor_a_.T) * (fields @ self.factor_b_.T)


class IdentityOperator(_PhaseOperator):
    """Pass-through pattern ``|E|^2 = 1``; mainly useful for tests and local baselines."""

    kind = "identity"

    def _build(self, rng, n):
        pass

    def _field_out(self, fields):
        return fields


OPERATORS = {
    "scattering": ScatteringOperator,
    "shg": SHGOperator,
    "identity": IdentityOperator,
}


def make_operator(kind: str, seed=0, noise_level=0.0):
    try:
        cls = OPERATORS[kind]
    except KeyError:
        raise ValueError(f"unknown operator kind {kind!r}; choose from {sorted(OPERATORS)}")
    return cls(seed=seed, noise_level=noise_level)


def scattering_forward(op: ScatteringOperator, img) -> np.ndarray:
    """Single-image scattering pattern, min-max normalized."""
    if not isinstance(op, ScatteringOperator):
        raise TypeError("scattering_forward needs a ScatteringOperator")
    return minmax_normalize(op.intensity(np.asarray(img)[None])[0])


def shg_forward(op: SHGOperator, img) -> np.ndarray:
    """Single-image second-harmonic pattern, min-max normalized."""
    if not isinstance(op, SHGOperator):
        raise TypeError("shg_forward needs an SHGOperator")
    return minmax_normalize(op.intensity(np.asarray(img)[None])[0])


def add_detection_noise(pattern, level: float, rng: RngStream) -> np.ndarray:
    """Additive Gaussian detector noise, clamped back to [0, 1]."""
    if level < 0:
        raise DomainError("noise level must be >= 0")
    pattern = np.asarray(pattern, dtype=np.float64)
    if level == 0:
        return pattern.copy()
    return np.clip(pattern + level * rng.normal(pattern.shape), 0.0, 1.0)


def gen_shapes_dataset(rng: RngStream, count: int, H: int, W: int, supersample=4) -> np.ndarray:
    """Random scenes of 1-4 anti-aliased ellipses and rectangles, ``(count, H, W)`` in [0, 1].

    Shapes carry a linear intensity ramp so interiors are graded rather than
    flat; overlapping shapes take the pointwise maximum.
    """
    if H < 8 or W < 8:
        raise DomainError("images must be at least 8x8")
    s = supersample
    yy, xx = np.mgrid[0:H * s, 0:W * s]
    yy = (yy + 0.5) / s
    xx = (xx + 0.5) / s
    out = np.zeros((count, H, W))
    for n in range(count):
        canvas = np.zeros((H * s, W * s))
        for _ in range(int(rng.integers(1, 5))):
            cy, cx = rng.uniform(low=0.2 * H, high=0.8 * H), rng.uniform(low=0.2 * W, high=0.8 * W)
            ry, rx = rng.uniform(low=0.1 * H, high=0.3 * H), rng.uniform(low=0.1 * W, high=0.3 * W)
            theta = rng.uniform(low=0.0, high=np.pi)
            c, sn = np.cos(theta), np.sin(theta)
            u = ((xx - cx) * c + (yy - cy) * sn) / rx
            v = (-(xx - cx) * sn + (yy - cy) * c) / ry
            if rng.uniform() < 0.5:
                inside = u ** 2 + v ** 2 <= 1.0
            else:
                inside = (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
            lo, hi = sorted(rng.uniform(dims=(2,), low=0.3, high=1.0))
            ramp = lo + (hi - lo) * np.clip((u + 1.0) / 2.0, 0.0, 1.0)
            canvas = np.maximum(canvas, np.where(inside, ramp, 0.0))
        out[n] = canvas.reshape(H, s, W, s).mean(axis=(1, 3))
    return np.clip(out, 0.0, 1.0)


@dataclass
class Dataset:
    """Ground truth images, their raw patterns and the train/test split."""

    X: np.ndarray
    Y_T: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def train(self):
        return self.Y_T[self.train_idx], self.X[self.train_idx]

    @property
    def test(self):
        return self.Y_T[self.test_idx], self.X[self.test_idx]


def split_indices(n: int, rng: RngStream, train_fraction=0.9):
    """Shuffled 90/10 style split; the training set gets ``round(n * train_fraction)`` items."""
    perm = rng.generator.permutation(n)
    n_train = int(np.floor(n * train_fraction + 0.5))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def make_dataset(operator, count: int, H: int, W: int, seed=0, train_fraction=0.9) -> Dataset:
    """Generate shapes, render their patterns through ``operator`` and split."""
    root = as_rng(seed)
    X = gen_shapes_dataset(root.child("shapes"), count, H, W)
    operator.fit(X)
    Y = operator.transform(X, rng=root.child("detector"))
    train_idx, test_idx = split_indices(count, root.child("split"), train_fraction)
    return Dataset(X, Y, train_idx, test_idx)
