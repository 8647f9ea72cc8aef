"""Central-difference checks of every hand-written backward pass.

Each check builds a small random problem from a seed, contracts the output
with a fixed random tensor so the quantity is scalar, and returns the max
relative error reported by ``finite_diff_check``.
"""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import network
from .hierarchy import EmbeddingProvider, TextEmbeddings, default_hierarchy, graph_encode, graph_encode_backward, init_graph_params
from .numcore import finite_diff_check
from .pcio import PointCloud
from .sampling import LocalGlobalBatch
from .training import Model, TrainConfig, ce_loss_grad, hinge_loss_grad, loss_and_grads, sibling_table

TOL = 1e-4
SMALL = network.EncoderConfig(feature_dim=6, hidden_dim=4, embed_dim=4, n_heads=2, n_blocks=1,
                              window=4, attn_scaling="none")


def _pack(d: dict, names):
    return np.concatenate([np.asarray(d[k], dtype=np.float64).reshape(-1) for k in names])


def _unpack(vec, like: dict, names) -> dict:
    out, off = {}, 0
    for k in names:
        n = like[k].size
        out[k] = vec[off: off + n].reshape(like[k].shape)
        off += n
    return out


def _jitter(p: dict, rng) -> dict:
    # zero-initialised biases and unit gains make some gradients vanish exactly
    return {k: v + rng.normal(0.0, 0.3, v.shape) if k.endswith((".b", ".g")) else v for k, v in p.items()}


def _small_batch(rng, Ml=6, Mg=5):
    loc = PointCloud(rng.normal(size=(Ml, 3)) * 20, rng.random((Ml, 3)), None)
    glo = PointCloud(rng.normal(size=(Mg, 3)) * 20, rng.random((Mg, 3)), None)
    return LocalGlobalBatch(loc, glo, rng.permutation(Ml), rng.permutation(Mg), np.arange(Ml), np.arange(Ml))


def check_encoder(seed: int) -> float:
    rng = np.random.default_rng([seed, 1])
    cfg = network.EncoderConfig(feature_dim=5, hidden_dim=4, embed_dim=4, n_heads=2, n_blocks=2, window=3)
    p = _jitter({k: v for k, v in network.init_params(cfg, rng).items() if k.startswith("enc.")}, rng)
    names = sorted(p)
    x0 = rng.normal(size=(7, 5))
    order = rng.permutation(7)
    R = rng.normal(size=(7, 4))
    nx = x0.size

    def f(vec):
        x = vec[:nx].reshape(x0.shape)
        q = _unpack(vec[nx:], p, names)
        c: dict = {}
        y = network.encode(x, order, q, cfg, c)
        g: dict = {}
        dx = network.encode_backward(c, R, q, cfg, g)
        return float((y * R).sum()), np.concatenate([dx.reshape(-1), _pack(g, names)])

    return finite_diff_check(f, np.concatenate([x0.reshape(-1), _pack(p, names)]))


def check_cross_attention(seed: int) -> float:
    rng = np.random.default_rng([seed, 2])
    cfg = network.EncoderConfig(feature_dim=5, hidden_dim=6, embed_dim=4, n_heads=2,
                                attn_scaling="inv_sqrt_d" if seed % 2 else "none")
    p = _jitter({k: v for k, v in network.init_params(cfg, rng).items() if k.startswith("xattn.")}, rng)
    names = sorted(p)
    Fl, Fg = rng.normal(size=(5, 6)) * 0.5, rng.normal(size=(8, 6)) * 0.5
    R = rng.normal(size=(5, 6))
    nl, ng = Fl.size, Fg.size

    def f(vec):
        a, b = vec[:nl].reshape(Fl.shape), vec[nl: nl + ng].reshape(Fg.shape)
        q = _unpack(vec[nl + ng:], p, names)
        c: dict = {}
        out = network.cross_attention(a, b, q, cfg, c)
        g: dict = {}
        da, db = network.attention_backward(q, "xattn", c, R, g)
        return float((out * R).sum()), np.concatenate([da.reshape(-1), db.reshape(-1), _pack(g, names)])

    return finite_diff_check(f, np.concatenate([Fl.reshape(-1), Fg.reshape(-1), _pack(p, names)]))


def check_graph_encoder(seed: int) -> float:
    rng = np.random.default_rng([seed, 3])
    h = default_hierarchy()
    C = 4
    p = init_graph_params(C, 2, rng)
    p = {k: v + rng.normal(0.0, 0.3, v.shape) if ".b" in k else v for k, v in p.items()}
    names = sorted(p)
    ids = tuple(h.label_ids())
    T0 = rng.normal(size=(len(ids), C))
    R = rng.normal(size=(len(ids), C))
    nt = T0.size

    def f(vec):
        E_t = TextEmbeddings(ids, vec[:nt].reshape(T0.shape))
        q = _unpack(vec[nt:], p, names)
        c: dict = {}
        out = graph_encode(h, E_t, q, cache=c)
        g: dict = {}
        dt = graph_encode_backward(c, R, q, g)
        return float((out.vectors * R).sum()), np.concatenate([dt.reshape(-1), _pack(g, names)])

    return finite_diff_check(f, np.concatenate([T0.reshape(-1), _pack(p, names)]))


def check_ce(seed: int) -> float:
    rng = np.random.default_rng([seed, 4])
    M, K, C = 7, 4, 5
    E0, T0 = rng.normal(size=(M, C)), rng.normal(size=(K, C))
    truth = rng.integers(0, K, M)
    tau = 0.5

    def f(vec):
        E, T = vec[: M * C].reshape(M, C), vec[M * C:].reshape(K, C)
        loss, dE, dT = ce_loss_grad(E, T, tau, truth)
        return loss, np.concatenate([dE.reshape(-1), dT.reshape(-1)])

    return finite_diff_check(f, np.concatenate([E0.reshape(-1), T0.reshape(-1)]))


def check_hinge(seed: int) -> float:
    rng = np.random.default_rng([seed, 5])
    h = default_hierarchy()
    ids = h.label_ids()
    table, mask = sibling_table(h, ids)
    M, C = 8, 4
    E0 = rng.normal(size=(M, C)) * 0.4
    H0 = rng.normal(size=(len(ids), C)) * 0.4
    rows = rng.integers(0, len(ids), M)

    def f(vec):
        E, H = vec[: M * C].reshape(M, C), vec[M * C:].reshape(H0.shape)
        loss, dE, dH = hinge_loss_grad(E, H, rows, table, mask, 1.0)
        return loss, np.concatenate([dE.reshape(-1), dH.reshape(-1)])

    return finite_diff_check(f, np.concatenate([E0.reshape(-1), H0.reshape(-1)]))


def check_total(seed: int) -> float:
    """Whole objective (network, graph encoder, CE and weighted hinge) w.r.t. every parameter."""
    rng = np.random.default_rng([seed, 6])
    h = default_hierarchy()
    model = Model.create(SMALL, h, EmbeddingProvider(dim=SMALL.embed_dim, seed=seed), seed=seed)
    p = _jitter(model.params.params, rng)
    # sharper attention keeps key-weight gradients well above difference noise
    p = {k: 2.0 * v if k.endswith((".q.W", ".k.W")) else v for k, v in p.items()}
    names = sorted(p)
    batch = _small_batch(rng)
    active = h.nodes_for_domain(0)
    truth = rng.choice(active, batch.local.N)
    cfg = TrainConfig(tau=0.5, alpha=0.3)
    text = model.text()

    def f(vec):
        model.params.params = _unpack(vec, p, names)
        res, g = loss_and_grads(model, batch, truth, active, cfg, True, text)
        return res.ce + cfg.alpha * res.hinge, _pack({k: g.get(k, np.zeros_like(p[k])) for k in names}, names)

    def value(vec):
        model.params.params = _unpack(vec, p, names)
        res, _ = loss_and_grads(model, batch, truth, active, cfg, True, text, need_grad=False)
        return res.ce + cfg.alpha * res.hinge

    return finite_diff_check(f, _pack(p, names), value=value)


CHECKS: dict = {
    "encoder blocks": check_encoder,
    "cross-attention": check_cross_attention,
    "graph encoder": check_graph_encoder,
    "cross-entropy": check_ce,
    "sibling hinge": check_hinge,
    "total objective": check_total,
}


def run_suite(seeds=range(10), report: Callable = None) -> dict:
    """Max relative error per check over ``seeds``."""
    out = {}
    for name, fn in CHECKS.items():
        t = time.perf_counter()
        worst = max(fn(int(s)) for s in seeds)
        out[name] = worst
        if report is not None:
            report(name, worst, time.perf_counter() - t)
    return out
