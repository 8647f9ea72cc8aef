"""Dual-branch point encoder, local-global cross-attention and decoder.

Shapes: local rows ``Ml``, global rows ``Mg``, model width ``d``,
embedding width ``C``.  Every forward stores what its backward needs in a
plain dict; ``backward`` walks the same graph in reverse.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .errors import EmptyInputError, ShapeError
from .numcore import (
    check_finite,
    gelu_backward,
    gelu_forward,
    l2_normalize_backward,
    l2_normalize_forward,
    layernorm_backward,
    layernorm_forward,
    linear_backward,
    softmax_backward,
    softmax_forward,
)
from .pcio import PointCloud


@dataclass(frozen=True)
class EncoderConfig:
    feature_dim: int = 6
    hidden_dim: int = 64
    embed_dim: int = 32
    n_heads: int = 4
    n_blocks: int = 2
    attn_scaling: str = "none"  # cross-attention logits: "none" or "inv_sqrt_d"
    window: int = 64
    ffn_mult: int = 2
    coord_scale: float = 10.0
    use_global: bool = True

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ShapeError("hidden_dim must be divisible by n_heads")
        if self.embed_dim < 2 or self.n_blocks < 1 or self.window < 1:
            raise ShapeError("need embed_dim >= 2, n_blocks >= 1, window >= 1")
        if self.attn_scaling not in ("none", "inv_sqrt_d"):
            raise ShapeError(f"unknown attn_scaling {self.attn_scaling!r}")


@dataclass(frozen=True, eq=False)
class PointEmbeddings:
    E_p: np.ndarray
    unit_norm: bool = True


# ---------------------------------------------------------------- params

def _lin(rng, p, name, n_in, n_out, gain=1.0):
    p[name + ".W"] = rng.normal(0.0, gain / np.sqrt(n_in), (n_in, n_out))
    p[name + ".b"] = np.zeros(n_out)


def _ln(p, name, width):
    p[name + ".g"] = np.ones(width)
    p[name + ".b"] = np.zeros(width)


def _attn_params(rng, p, name, width):
    for proj in ("q", "k", "v"):
        _lin(rng, p, f"{name}.{proj}", width, width)
    # a key bias only shifts each softmax row by a constant: always zero gradient
    del p[f"{name}.k.b"]
    _lin(rng, p, f"{name}.o", width, width, gain=0.5)


def _block_params(rng, p, name, width, mult):
    _ln(p, name + ".ln1", width)
    _attn_params(rng, p, name + ".attn", width)
    _ln(p, name + ".ln2", width)
    _lin(rng, p, name + ".ffn1", width, mult * width)
    _lin(rng, p, name + ".ffn2", mult * width, width, gain=0.5)


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict:
    d, w2 = cfg.hidden_dim, 2 * cfg.hidden_dim
    p: dict = {}
    _lin(rng, p, "enc.in", cfg.feature_dim, d)
    for i in range(cfg.n_blocks):
        _block_params(rng, p, f"enc.blk{i}", d, cfg.ffn_mult)
    _ln(p, "enc.out", d)
    _attn_params(rng, p, "xattn", d)
    _lin(rng, p, "ffn.1", d, cfg.ffn_mult * d)
    _lin(rng, p, "ffn.2", cfg.ffn_mult * d, d)
    for i in range(cfg.n_blocks):
        _block_params(rng, p, f"dec.blk{i}", w2, cfg.ffn_mult)
    _ln(p, "dec.out", w2)
    _lin(rng, p, "dec.head", w2, cfg.embed_dim)
    return p


# ---------------------------------------------------------------- inputs

def point_inputs(cloud: PointCloud, center: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    rel = (cloud.positions.astype(np.float64) - center) / cfg.coord_scale
    x = np.concatenate([rel, cloud.features.astype(np.float64)], axis=1)
    if x.shape[1] != cfg.feature_dim:
        raise ShapeError(f"input has {x.shape[1]} channels, encoder expects feature_dim={cfg.feature_dim}")
    return x


# ---------------------------------------------------------------- attention

def _split(x, B, n, H):
    dh = x.shape[-1] // H
    return x.reshape(B, n, H, dh).transpose(0, 2, 1, 3)


def _merge(x):
    B, H, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B * n, H * dh)


def _proj(p, name, x):
    y = x @ p[name + ".W"]
    b = p.get(name + ".b")
    return y if b is None else y + b


def attention_forward(p, name, xq, xkv, n_heads, scale, window=None):
    """Multi-head attention; ``window`` splits rows into consecutive runs.

    With a window, queries and keys come from the same rows and each run
    attends only within itself (the last run may be short; padding keys are
    masked).  Without one, every query row attends over all key rows.
    """
    Mq = xq.shape[0]
    q, k, v = _proj(p, name + ".q", xq), _proj(p, name + ".k", xkv), _proj(p, name + ".v", xkv)
    if window is not None:
        w = min(window, Mq)
        nw = -(-Mq // w)
        pad = nw * w - Mq
        if pad:
            z = np.zeros((pad, q.shape[1]))
            q, k, v = (np.concatenate([a, z]) for a in (q, k, v))
        B, nq, nk = nw, w, w
        mask = None
        if pad:
            mask = np.ones((nw, 1, 1, w), dtype=bool)
            mask[-1, :, :, w - pad:] = False
    else:
        B, nq, nk, mask, pad = 1, Mq, xkv.shape[0], None, 0
    Q, K, V = _split(q, B, nq, n_heads), _split(k, B, nk, n_heads), _split(v, B, nk, n_heads)
    S = Q @ K.transpose(0, 1, 3, 2)
    if scale != 1.0:
        S *= scale
    P = softmax_forward(S, mask)
    O = _merge(P @ V)[:Mq]
    out = _proj(p, name + ".o", O)
    cache = dict(xq=xq, xkv=xkv, Q=Q, K=K, V=V, P=P, O=O, scale=scale, B=B, nq=nq, nk=nk,
                 pad=pad, window=window, self_attn=window is not None)
    return out, cache


def attention_backward(p, name, cache, dout, grads):
    """Returns ``(dxq, dxkv)``; for windowed self-attention the two coincide."""
    dO, grads[name + ".o.W"], grads[name + ".o.b"] = linear_backward(cache["O"], p[name + ".o.W"], dout)
    Q, K, V, P = cache["Q"], cache["K"], cache["V"], cache["P"]
    if cache["pad"]:
        dO = np.concatenate([dO, np.zeros((cache["pad"], dO.shape[1]))])
    H = Q.shape[1]
    dOh = _split(dO, cache["B"], cache["nq"], H)
    dP = dOh @ V.transpose(0, 1, 3, 2)
    dV = P.transpose(0, 1, 3, 2) @ dOh
    dS = softmax_backward(P, dP)
    if cache["scale"] != 1.0:
        dS *= cache["scale"]
    dQ = dS @ K
    dK = dS.transpose(0, 1, 3, 2) @ Q
    Mq, Mk = cache["xq"].shape[0], cache["xkv"].shape[0]
    dq, dk, dv = _merge(dQ)[:Mq], _merge(dK)[:Mk], _merge(dV)[:Mk]
    dxq, grads[name + ".q.W"], grads[name + ".q.b"] = linear_backward(cache["xq"], p[name + ".q.W"], dq)
    dxk, grads[name + ".k.W"], _ = linear_backward(cache["xkv"], p[name + ".k.W"], dk)
    dxv, grads[name + ".v.W"], grads[name + ".v.b"] = linear_backward(cache["xkv"], p[name + ".v.W"], dv)
    return dxq, dxk + dxv


# ---------------------------------------------------------------- blocks

def _ffn_forward(p, n1, n2, x):
    h1 = _proj(p, n1, x)
    a, gcache = gelu_forward(h1)
    return _proj(p, n2, a), (x, a, gcache)


def _ffn_backward(p, n1, n2, cache, dy, grads):
    x, a, gcache = cache
    da, grads[n2 + ".W"], grads[n2 + ".b"] = linear_backward(a, p[n2 + ".W"], dy)
    dh1 = gelu_backward(gcache, da)
    dx, grads[n1 + ".W"], grads[n1 + ".b"] = linear_backward(x, p[n1 + ".W"], dh1)
    return dx


def block_forward(p, name, x, n_heads, window):
    """Pre-norm block: windowed self-attention then FFN, both residual."""
    a, ln1 = layernorm_forward(x, p[name + ".ln1.g"], p[name + ".ln1.b"])
    att, acache = attention_forward(p, name + ".attn", a, a, n_heads,
                                    1.0 / np.sqrt(x.shape[1] // n_heads), window)
    h = x + att
    b, ln2 = layernorm_forward(h, p[name + ".ln2.g"], p[name + ".ln2.b"])
    f, fcache = _ffn_forward(p, name + ".ffn1", name + ".ffn2", b)
    return h + f, (ln1, acache, ln2, fcache)


def block_backward(p, name, cache, dy, grads):
    ln1, acache, ln2, fcache = cache
    db = _ffn_backward(p, name + ".ffn1", name + ".ffn2", fcache, dy, grads)
    dh_ln, grads[name + ".ln2.g"], grads[name + ".ln2.b"] = layernorm_backward(ln2, db)
    dh = dy + dh_ln
    dq, dkv = attention_backward(p, name + ".attn", acache, dh, grads)
    dx_ln, grads[name + ".ln1.g"], grads[name + ".ln1.b"] = layernorm_backward(ln1, dq + dkv)
    return dh + dx_ln


def _stack_forward(p, prefix, xs, cfg):
    caches = []
    for i in range(cfg.n_blocks):
        xs, c = block_forward(p, f"{prefix}.blk{i}", xs, cfg.n_heads, cfg.window)
        caches.append(c)
    y, lnc = layernorm_forward(xs, p[prefix + ".out.g"], p[prefix + ".out.b"])
    return y, (caches, lnc)


def _stack_backward(p, prefix, cache, dy, cfg, grads):
    caches, lnc = cache
    dx, g, b = layernorm_backward(lnc, dy)
    grads[prefix + ".out.g"] = g
    grads[prefix + ".out.b"] = b
    for i in reversed(range(cfg.n_blocks)):
        dx = block_backward(p, f"{prefix}.blk{i}", caches[i], dx, grads)
    return dx


# ---------------------------------------------------------------- encoder / heads

def encode(x: np.ndarray, order: np.ndarray, params: Mapping, cfg: EncoderConfig, cache: Optional[dict] = None):
    """Shared point encoder: linear lift then blocks over the serialised order."""
    if x.ndim != 2 or x.shape[1] != cfg.feature_dim:
        raise ShapeError(f"encode expects (M, {cfg.feature_dim}) inputs, got {x.shape}")
    h0 = x @ params["enc.in.W"] + params["enc.in.b"]
    ys, scache = _stack_forward(params, "enc", h0[order], cfg)
    y = np.empty_like(ys)
    y[order] = ys
    if cache is not None:
        cache.update(x=x, order=order, stack=scache)
    return y


def encode_backward(cache: dict, dy: np.ndarray, params: Mapping, cfg: EncoderConfig, grads: dict) -> np.ndarray:
    order = cache["order"]
    dhs = _stack_backward(params, "enc", cache["stack"], dy[order], cfg, grads)
    dh0 = np.empty_like(dhs)
    dh0[order] = dhs
    dx, gW, gb = linear_backward(cache["x"], params["enc.in.W"], dh0)
    _acc(grads, "enc.in.W", gW)
    _acc(grads, "enc.in.b", gb)
    return dx


def _acc(grads, k, v):
    grads[k] = grads[k] + v if k in grads else v


def cross_attention(F_loc, F_glo, params, cfg: EncoderConfig, cache: Optional[dict] = None):
    """Every local row attends over all global rows."""
    if F_glo.shape[0] == 0:
        raise EmptyInputError("cross-attention needs at least one global point")
    if F_loc.shape[1] != cfg.hidden_dim or F_glo.shape[1] != cfg.hidden_dim:
        raise ShapeError("cross-attention inputs must have width hidden_dim")
    dh = cfg.hidden_dim // cfg.n_heads
    scale = 1.0 if cfg.attn_scaling == "none" else 1.0 / np.sqrt(dh)
    out, c = attention_forward(params, "xattn", F_loc, F_glo, cfg.n_heads, scale, None)
    if cache is not None:
        cache.update(c)
    return out


def fuse_decode(F_loc, F_attn, order, params, cfg: EncoderConfig, cache: Optional[dict] = None) -> PointEmbeddings:
    if F_loc.shape[0] != F_attn.shape[0]:
        raise ShapeError(f"row mismatch: F_loc {F_loc.shape[0]} vs F_attn {F_attn.shape[0]}")
    g, fcache = _ffn_forward(params, "ffn.1", "ffn.2", F_attn)
    z = np.concatenate([F_loc, g], axis=1)
    zs, scache = _stack_forward(params, "dec", z[order], cfg)
    e = zs @ params["dec.head.W"] + params["dec.head.b"]
    es, ncache = l2_normalize_forward(e)
    E = np.empty_like(es)
    E[order] = es
    if cache is not None:
        cache.update(fcache=fcache, scache=scache, zs=zs, ncache=ncache, order=order)
    return PointEmbeddings(E, True)


def fuse_decode_backward(cache, dE, params, cfg, grads):
    """Returns ``(dF_loc, dF_attn)``."""
    order = cache["order"]
    de = l2_normalize_backward(cache["ncache"], dE[order])
    dzs, grads["dec.head.W"], grads["dec.head.b"] = linear_backward(cache["zs"], params["dec.head.W"], de)
    dzs = _stack_backward(params, "dec", cache["scache"], dzs, cfg, grads)
    dz = np.empty_like(dzs)
    dz[order] = dzs
    d = cfg.hidden_dim
    dF_attn = _ffn_backward(params, "ffn.1", "ffn.2", cache["fcache"], dz[:, d:], grads)
    return dz[:, :d], dF_attn


# ---------------------------------------------------------------- full pass

def forward(batch, params: Mapping, cfg: EncoderConfig, cache: Optional[dict] = None) -> PointEmbeddings:
    """Embeddings for the local points of ``batch``; global points only feed attention."""
    center = batch.center
    x_loc = point_inputs(batch.local, center, cfg)
    c_loc: dict = {}
    F_loc = encode(x_loc, batch.local_order, params, cfg, c_loc)
    c_glo: dict = {}
    c_x: dict = {}
    if cfg.use_global:
        x_glo = point_inputs(batch.global_, center, cfg)
        F_glo = encode(x_glo, batch.global_order, params, cfg, c_glo)
        F_attn = cross_attention(F_loc, F_glo, params, cfg, c_x)
    else:
        F_attn = np.zeros_like(F_loc)
    c_dec: dict = {}
    emb = fuse_decode(F_loc, F_attn, batch.local_order, params, cfg, c_dec)
    check_finite(emb.E_p, "point embeddings")
    if cache is not None:
        cache.update(loc=c_loc, glo=c_glo, x=c_x, dec=c_dec, F_attn=F_attn, F_loc=F_loc)
    return emb


def backward(cache: dict, dE: np.ndarray, params: Mapping, cfg: EncoderConfig) -> dict:
    grads: dict = {}
    dF_loc, dF_attn = fuse_decode_backward(cache["dec"], dE, params, cfg, grads)
    if cfg.use_global:
        dq, dkv = attention_backward(params, "xattn", cache["x"], dF_attn, grads)
        dF_loc = dF_loc + dq
        glo_grads: dict = {}
        encode_backward(cache["glo"], dkv, params, cfg, glo_grads)
        loc_grads: dict = {}
        encode_backward(cache["loc"], dF_loc, params, cfg, loc_grads)
        for k in set(glo_grads) | set(loc_grads):
            grads[k] = glo_grads.get(k, 0) + loc_grads.get(k, 0)
    else:
        encode_backward(cache["loc"], dF_loc, params, cfg, grads)
    return grads
