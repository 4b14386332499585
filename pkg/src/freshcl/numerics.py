"""Dense linear algebra helpers, seeded randomness, AdamW and finite differences.

Matrices are plain ``numpy.float64`` arrays; the helpers here add the shape and
finiteness checks the rest of the package relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateInputError, DimensionError, ParameterError

_MASK64 = (1 << 64) - 1


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce ``data`` to a finite 2-D float64 array, optionally checking its shape."""
    m = np.array(data, dtype=np.float64)
    if m.ndim == 1 and rows is not None and cols is not None:
        if m.size != rows * cols:
            raise DimensionError(f"expected {rows * cols} values, got {m.size}")
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if (rows is not None and m.shape[0] != rows) or (cols is not None and m.shape[1] != cols):
        raise DimensionError(f"expected shape ({rows}, {cols}), got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ParameterError("matrix contains non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product accumulated over the inner index in ascending order.

    Each entry is rounded exactly like a naive ``s += a[i,k] * b[k,j]`` loop,
    independent of the BLAS build. Hot loops use ``@`` instead.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return out


def l2_normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not norm > 0.0:
        raise DegenerateInputError("cannot normalize a zero-norm vector")
    return v / norm


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ParameterError("softmax logits must be finite")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# xoshiro256** seeded via splitmix64


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step; returns ``(output, next_state)``."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31), x


class Rng:
    """xoshiro256** generator.

    The 256-bit state is filled from four consecutive splitmix64 outputs of
    the seed, so a seed maps to the same stream on every platform.
    """

    def __init__(self, seed: int = 0):
        if seed < 0:
            raise ParameterError("seed must be a non-negative 64-bit integer")
        x = seed & _MASK64
        s = []
        for _ in range(4):
            out, x = splitmix64(x)
            s.append(out)
        self.s = s

    @property
    def state(self) -> tuple[int, int, int, int]:
        return tuple(self.s)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        t = (s1 * 5) & _MASK64
        result = ((((t << 7) | (t >> 57)) & _MASK64) * 9) & _MASK64
        tt = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= tt
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) built from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise ParameterError("upper bound must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def integers(self, n: int, size: int) -> np.ndarray:
        return np.array([self.below(n) for _ in range(size)], dtype=np.int64)

    def spawn(self) -> "Rng":
        """Child generator seeded from the next output of this one."""
        return Rng(self.next_u64())


def gaussian(rng: Rng, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """``n`` normal draws via Box-Muller over ``rng``; pairs are consumed in order."""
    if std < 0:
        raise ParameterError("std must be non-negative")
    out = np.empty(n, dtype=np.float64)
    nxt = rng.next_u64
    scale = 1.0 / (1 << 53)
    two_pi = 2.0 * math.pi
    i = 0
    while i < n:
        u1 = 1.0 - (nxt() >> 11) * scale  # (0, 1]
        u2 = (nxt() >> 11) * scale
        r = math.sqrt(-2.0 * math.log(u1))
        out[i] = r * math.cos(two_pi * u2)
        if i + 1 < n:
            out[i + 1] = r * math.sin(two_pi * u2)
        i += 2
    return mean + std * out


def gaussian_matrix(rng: Rng, rows: int, cols: int, std: float = 1.0) -> np.ndarray:
    """Row-major fill of a ``rows x cols`` matrix with N(0, std^2) draws."""
    return gaussian(rng, rows * cols, 0.0, std).reshape(rows, cols)


def random_orthonormal(rng: Rng, d: int, k: int) -> np.ndarray:
    """``d x k`` matrix with orthonormal columns from QR of a Gaussian matrix.

    Columns are sign-fixed so that R has a positive diagonal.
    """
    if k > d:
        raise ParameterError(f"cannot build {k} orthonormal columns in dimension {d}")
    q, r = np.linalg.qr(gaussian_matrix(rng, d, k))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class AdamWHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamWState:
    step: int
    first_moment: np.ndarray
    second_moment: np.ndarray

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamWState":
        return cls(0, np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64))


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamWState,
               hyper: AdamWHyper | None = None) -> tuple[np.ndarray, AdamWState]:
    """One decoupled-weight-decay Adam update.

    The parameter is first shrunk by ``1 - lr * weight_decay`` and then moved
    by the bias-corrected Adam direction. Returns new arrays; inputs are not
    modified.
    """
    h = hyper or AdamWHyper()
    if param.shape != grad.shape or param.shape != state.first_moment.shape \
            or param.shape != state.second_moment.shape:
        raise DimensionError(
            f"shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"moments {state.first_moment.shape}/{state.second_moment.shape}")
    step = state.step + 1
    m = h.beta1 * state.first_moment + (1.0 - h.beta1) * grad
    v = h.beta2 * state.second_moment + (1.0 - h.beta2) * grad * grad
    m_hat = m / (1.0 - h.beta1 ** step)
    v_hat = v / (1.0 - h.beta2 ** step)
    denom = np.sqrt(v_hat) + h.eps
    # 0/0 only arises with eps=0 and a zero gradient; treat that as no move
    with np.errstate(invalid="ignore", divide="ignore"):
        direction = np.where(denom > 0, m_hat / np.where(denom > 0, denom, 1.0), 0.0)
    new_param = param * (1.0 - h.lr * h.weight_decay) - h.lr * direction
    return new_param, AdamWState(step, m, v)


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grad(f: Callable[[np.ndarray], float], at: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one entry at a time."""
    x = np.array(at, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(max|a|, max|b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / scale)
