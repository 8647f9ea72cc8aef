"""Dense f64 primitives with explicit backward passes, plus a gradient oracle.

Arrays are plain ``numpy.ndarray`` (float64).  Each ``*_forward`` returns
its output and whatever the matching ``*_backward`` needs.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

from .errors import FormatError, NumericError, ShapeError

_GELU_C = np.sqrt(2.0 / np.pi)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return a @ b


def linear_forward(x, W, b=None):
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear expects width {W.shape[0]}, got {x.shape[-1]}")
    y = x @ W
    return y if b is None else y + b


def linear_backward(x, W, dy):
    """Returns ``(dx, dW, db)`` for ``y = x W + b`` over leading batch dims."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ W.T, x2.T @ dy2, dy2.sum(0)


def softmax_forward(z, mask=None):
    """Row softmax along the last axis; ``mask`` marks admissible entries."""
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    e = z - z.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_backward(p, dp):
    g = dp - (dp * p).sum(axis=-1, keepdims=True)
    g *= p
    return g


def layernorm_forward(x, gain, bias, eps: float = 1e-5):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    return xh * gain + bias, (xh, inv, gain)


def layernorm_backward(cache, dy):
    xh, inv, gain = cache
    d = xh.shape[-1]
    dg = (dy * xh).reshape(-1, d).sum(0)
    db = dy.reshape(-1, d).sum(0)
    dxh = dy * gain
    dx = inv * (dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True))
    return dx, dg, db


def gelu_forward(x):
    t = x * x
    t *= 0.044715 * _GELU_C
    t += _GELU_C
    t *= x
    np.tanh(t, out=t)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(cache, dy):
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def l2_normalize_forward(x, eps: float = 0.0):
    n = np.sqrt((x * x).sum(-1, keepdims=True))
    if np.any(n <= eps):
        raise NumericError("zero-norm row cannot be normalised")
    y = x / n
    return y, (y, n)


def l2_normalize_backward(cache, dy):
    y, n = cache
    return (dy - y * (dy * y).sum(-1, keepdims=True)) / n


def finite_diff_check(f: Callable, x: np.ndarray, eps: float = 1e-5, value: Callable = None) -> float:
    """Max elementwise relative error between analytic and central-difference gradients.

    ``f(x)`` must return ``(value, grad)``.  ``value(x)``, when given, is a
    cheaper scalar-only twin used for the perturbed evaluations.  The
    relative error uses the denominator ``max(|a|, |b|, 1e-8)``.
    """
    x = np.array(x, dtype=np.float64)
    _, g = f(x)
    if value is None:
        value = lambda z: f(z)[0]  # noqa: E731
    g = np.asarray(g, dtype=np.float64).reshape(x.shape)
    flat = x.reshape(-1)
    num = np.empty(flat.size)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = value(x)
        flat[i] = old - eps
        fm = value(x)
        flat[i] = old
        num[i] = (fp - fm) / (2 * eps)
    a = g.reshape(-1)
    den = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
    return float(np.max(np.abs(a - num) / den)) if a.size else 0.0


# ---------------------------------------------------------------- parameter store

CSPM_MAGIC = b"CSPM"
CSPM_VERSION = 1


class ParamStore:
    """Named f64 parameters with same-shape gradient slots."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self.params: dict = {}
        self.grads: dict = {}
        for k, v in (params or {}).items():
            self.add(k, v)

    def add(self, name: str, value) -> None:
        v = np.array(value, dtype=np.float64)
        self.params[name] = v
        self.grads[name] = np.zeros_like(v)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self.params))

    def __len__(self):
        return len(self.params)

    def names(self) -> list:
        return sorted(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def accumulate(self, grads: Mapping[str, np.ndarray], scale: float = 1.0) -> None:
        for k, g in grads.items():
            if k not in self.grads:
                continue
            self.grads[k] += scale * np.asarray(g).reshape(self.grads[k].shape)

    def size(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in self.names():
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.params.items()})

    def flat(self, names=None) -> np.ndarray:
        names = names or self.names()
        return np.concatenate([self.params[k].reshape(-1) for k in names])

    def set_flat(self, vec: np.ndarray, names=None) -> None:
        names = names or self.names()
        off = 0
        for k in names:
            n = self.params[k].size
            self.params[k][...] = vec[off: off + n].reshape(self.params[k].shape)
            off += n

    # -- CSPM snapshots -----------------------------------------------------
    def to_bytes(self) -> bytes:
        parts = [CSPM_MAGIC, struct.pack("<I", CSPM_VERSION)]
        for k in self.names():
            v = self.params[k]
            raw = k.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<I", v.ndim))
            parts.append(struct.pack(f"<{v.ndim}Q", *v.shape))
            parts.append(v.astype("<f4").tobytes())
        return b"".join(parts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ParamStore":
        if buf[:4] != CSPM_MAGIC or len(buf) < 8:
            raise FormatError("not a CSPM parameter snapshot")
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != CSPM_VERSION:
            raise FormatError(f"unsupported CSPM version {version}")
        off, store = 8, cls()
        try:
            while off < len(buf):
                (n,) = struct.unpack_from("<I", buf, off)
                off += 4
                name = buf[off: off + n].decode("utf-8")
                off += n
                (rank,) = struct.unpack_from("<I", buf, off)
                off += 4
                shape = struct.unpack_from(f"<{rank}Q", buf, off)
                off += 8 * rank
                count = int(np.prod(shape)) if rank else 1
                data = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
                off += 4 * count
                store.add(name, data.astype(np.float64).reshape(shape))
        except (struct.error, ValueError) as exc:
            raise FormatError(f"truncated CSPM record near offset {off}") from exc
        return store

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_bytes(Path(path).read_bytes())
