"""Dense array primitives and reproducible random streams.

Arrays are plain row-major ``numpy.ndarray`` objects. Training and inference
run in float32; gradient and oracle checks run in float64.

Random numbers come from :class:`RngStream`, a thin wrapper over numpy's
counter-based Philox4x64 generator. A stream is fully determined by its
``(seed, counter)`` pair, and child streams are keyed by a BLAKE2b digest of
the parent seed and a text label, so the same label always yields the same
child on every platform.
"""

from __future__ import annotations

import hashlib

import numpy as np

from ddm.exceptions import DomainError, ShapeError

_MASK64 = (1 << 64) - 1


class RngStream:
    """Seeded Philox stream with label-derived children.

    Parameters
    ----------
    seed : int
        64-bit key of the Philox generator.
    counter : int
        Starting block counter. Streams with equal ``(seed, counter)``
        produce identical draws.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter) & _MASK64
        bitgen = np.random.Philox(key=self.seed, counter=self.counter)
        self.generator = np.random.Generator(bitgen)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, counter={self.counter})"

    def child(self, label) -> "RngStream":
        """Independent stream keyed by ``label``; does not consume draws."""
        digest = hashlib.blake2b(
            self.seed.to_bytes(8, "little") + str(label).encode("utf-8"),
            digest_size=8,
        ).digest()
        return RngStream(int.from_bytes(digest, "little"))

    def normal(self, dims, dtype=np.float64) -> np.ndarray:
        return self.generator.standard_normal(tuple(dims), dtype=dtype)

    def uniform(self, dims=None, low=0.0, high=1.0):
        return self.generator.uniform(low, high, size=None if dims is None else tuple(dims))

    def integers(self, low, high=None, dims=None):
        return self.generator.integers(low, high, size=None if dims is None else tuple(dims))

    def bernoulli(self, prob_one: float, dims) -> np.ndarray:
        return self.generator.random(tuple(dims)) < prob_one


def as_rng(rng) -> RngStream:
    """Coerce an int seed (or an existing stream) to :class:`RngStream`."""
    if isinstance(rng, RngStream):
        return rng
    if rng is None:
        return RngStream(0)
    return RngStream(int(rng))


def gaussian_sample(rng: RngStream, dims, dtype=np.float64) -> np.ndarray:
    """i.i.d. standard normal draws from ``rng``."""
    dims = tuple(int(d) for d in dims)
    if not dims:
        raise DomainError("dims must be nonempty")
    return rng.normal(dims, dtype=dtype)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _offsets():
    return [divmod(k, 3) for k in range(9)]


def tap_matrix(kernels: np.ndarray) -> np.ndarray:
    """``(C', C, 3, 3)`` kernels as ``(C, 9*C')``; column ``k*C' + o`` is tap ``k = 3*di + dj``."""
    cout, cin = kernels.shape[:2]
    return kernels.transpose(1, 2, 3, 0).reshape(cin, 9 * cout)


def conv3x3_taps(xp: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Per-tap responses of a zero-padded ``(B, H+2, W+2, C)`` input, ``(B, H+2, W+2, 9, C')``."""
    B, Hp, Wp, C = xp.shape
    return (xp.reshape(-1, C) @ taps).reshape(B, Hp, Wp, 9, -1)


def shift_sum(z: np.ndarray) -> np.ndarray:
    """Sum tap ``(di, dj)`` of ``z`` shifted by ``(di, dj)``, giving ``(B, H, W, C')``."""
    B, Hp, Wp, _, cout = z.shape
    H, W = Hp - 2, Wp - 2
    out = z[:, 0:H, 0:W, 0].copy()
    for k, (di, dj) in enumerate(_offsets()):
        if k:
            out += z[:, di:di + H, dj:dj + W, k]
    return out


def shift_spread(g: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`shift_sum`: ``(B, H, W, C') -> (B, H+2, W+2, 9, C')``."""
    B, H, W, cout = g.shape
    z = np.zeros((B, H + 2, W + 2, 9, cout), dtype=g.dtype)
    for k, (di, dj) in enumerate(_offsets()):
        z[:, di:di + H, dj:dj + W, k] = g
    return z


def pad1(x: np.ndarray) -> np.ndarray:
    B, H, W, C = x.shape
    xp = np.zeros((B, H + 2, W + 2, C), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    return xp


def conv2d_batch(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Batched 3x3 'same' cross-correlation, ``(B, H, W, C) -> (B, H, W, C')``."""
    if x.ndim != 4:
        raise ShapeError(f"expected (B, H, W, C) input, got {x.shape}")
    Cout, Cin, kh, kw = kernels.shape
    if (kh, kw) != (3, 3):
        raise ShapeError("kernel spatial size must be 3x3")
    if x.shape[3] != Cin:
        raise ShapeError(f"input has {x.shape[3]} channels, kernels expect {Cin}")
    if bias.shape != (Cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {Cout} output channels")
    return shift_sum(conv3x3_taps(pad1(x), tap_matrix(kernels))) + bias


def conv2d_same(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 cross-correlation of a ``(C, H, W)`` image with zero padding 1, plus bias."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"expected (C, H, W) input, got {x.shape}")
    out = conv2d_batch(x.transpose(1, 2, 0)[None], np.asarray(kernels), np.asarray(bias))
    return out[0].transpose(2, 0, 1)
