"""Losses, optimisers, the two-stage schedule, replay fine-tuning and zero-shot."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import network
from .errors import ConfigError, DataError, EmptyInputError, NumericError, ParameterError
from .hierarchy import (
    EmbeddingProvider,
    LabelHierarchy,
    TextEmbeddings,
    embed_labels,
    graph_encode,
    graph_encode_backward,
    graph_layers,
    init_graph_params,
)
from .numcore import ParamStore, check_finite, softmax_forward
from .pcio import PointCloud
from .sampling import LocalGlobalBatch, SamplerConfig, cover_batches, make_batch

log = logging.getLogger(__name__)

CE_CLAMP = 1e-12
numeric_warnings = {"ce_clamped": 0}


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.07
    margin: float = 1.0
    alpha: float = 0.3
    lr: float = 0.005
    epochs_stage1: int = 10
    epochs_stage2: int = 10
    epochs_finetune: int = 5
    batch_size: int = 1
    replay_budget: int = 0
    seed: int = 0
    optimizer: str = "sgd"  # "sgd" (momentum) or "adamw"
    momentum: float = 0.9
    weight_decay: float = 0.0
    pct_start: float = 0.3
    clip_norm: float = 0.0
    use_hinge: bool = True

    def __post_init__(self):
        if not (self.tau > 0 and self.margin > 0 and self.alpha >= 0 and self.lr > 0):
            raise ConfigError("need tau > 0, margin > 0, alpha >= 0, lr > 0")
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.replay_budget < 0:
            raise ConfigError("batch_size must be >= 1 and replay_budget >= 0")


@dataclass(frozen=True, eq=False)
class Prediction:
    prob: np.ndarray  # M x K, rows sum to one
    label_ids: np.ndarray  # K active node ids, ascending

    @property
    def argmax(self) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the smallest id
        return self.label_ids[np.argmax(self.prob, axis=1)]


# ---------------------------------------------------------------- losses

def _cosine(E, T):
    En = np.sqrt((E * E).sum(1, keepdims=True))
    Tn = np.sqrt((T * T).sum(1, keepdims=True))
    if np.any(En == 0) or np.any(Tn == 0):
        raise NumericError("zero-norm embedding row in cosine similarity")
    Eh, Th = E / En, T / Tn
    return Eh @ Th.T, (Eh, Th, En, Tn)


def class_prob(E_p: np.ndarray, T: np.ndarray, tau: float, label_ids: Optional[Sequence[int]] = None) -> Prediction:
    """Temperature-scaled softmax over cosine similarity to each label row."""
    if T.shape[0] == 0:
        raise ParameterError("active label set is empty")
    if E_p.shape[1] != T.shape[1]:
        raise ParameterError(f"embedding width {E_p.shape[1]} != label width {T.shape[1]}")
    cos, _ = _cosine(E_p, T)
    ids = np.arange(T.shape[0]) if label_ids is None else np.asarray(label_ids)
    return Prediction(softmax_forward(cos / tau), ids)


def ce_loss(pred: Prediction, truth_idx: np.ndarray) -> float:
    """Mean negative log-probability of the true column; clamps at log(1e-12)."""
    if len(truth_idx) == 0:
        return 0.0
    p = pred.prob[np.arange(len(truth_idx)), truth_idx]
    low = p < CE_CLAMP
    if low.any():
        numeric_warnings["ce_clamped"] += int(low.sum())
    return float(-np.log(np.maximum(p, CE_CLAMP)).mean())


def ce_loss_grad(E, T, tau, truth_idx):
    """Returns ``(loss, dE, dT)`` for the mean cross-entropy of cosine logits."""
    M = E.shape[0]
    cos, (Eh, Th, En, Tn) = _cosine(E, T)
    P = softmax_forward(cos / tau)
    rows = np.arange(M)
    p_true = P[rows, truth_idx]
    low = p_true < CE_CLAMP
    if low.any():
        numeric_warnings["ce_clamped"] += int(low.sum())
    loss = float(-np.log(np.maximum(p_true, CE_CLAMP)).mean())
    dlog = P.copy()
    dlog[rows, truth_idx] -= 1.0
    dlog[low] = 0.0  # clamped rows carry no gradient
    dcos = dlog / (tau * M)
    dEh = dcos @ Th
    dTh = dcos.T @ Eh
    dE = (dEh - Eh * (dEh * Eh).sum(1, keepdims=True)) / En
    dT = (dTh - Th * (dTh * Th).sum(1, keepdims=True)) / Tn
    return loss, dE, dT


def sibling_table(h: LabelHierarchy, ids: Sequence[int]):
    """Padded sibling row indices (into ``ids``) per row of ``ids``, plus mask."""
    pos = {n: i for i, n in enumerate(ids)}
    sibs = [[pos[s] for s in h.siblings(n) if s in pos] for n in ids]
    width = max((len(s) for s in sibs), default=0)
    table = np.zeros((len(ids), max(width, 1)), np.int64)
    mask = np.zeros((len(ids), max(width, 1)), bool)
    for i, s in enumerate(sibs):
        table[i, : len(s)] = s
        mask[i, : len(s)] = True
    return table, mask


def hinge_loss_grad(E, Ehat, truth_rows, sib_table, sib_mask, margin):
    """Pull toward the true node, push siblings beyond ``margin`` (Euclidean).

    ``truth_rows`` index rows of ``Ehat``.  Returns ``(loss, dE, dEhat)``.
    """
    M = E.shape[0]
    if M == 0:
        return 0.0, np.zeros_like(E), np.zeros_like(Ehat)
    diff_t = E - Ehat[truth_rows]
    d_t = np.sqrt((diff_t * diff_t).sum(1))
    S = sib_table[truth_rows]
    mk = sib_mask[truth_rows]
    diff_s = E[:, None, :] - Ehat[S]
    d_s = np.sqrt((diff_s * diff_s).sum(2))
    viol = mk & (margin - d_s > 0)
    per_point = d_t + np.where(viol, margin - d_s, 0.0).sum(1)
    loss = float(per_point.mean())
    ut = np.divide(diff_t, d_t[:, None], out=np.zeros_like(diff_t), where=d_t[:, None] > 0)
    us = np.divide(diff_s, d_s[..., None], out=np.zeros_like(diff_s), where=viol[..., None] & (d_s[..., None] > 0))
    dE = (ut - us.sum(1)) / M
    dEhat = np.zeros_like(Ehat)
    np.add.at(dEhat, truth_rows, -ut / M)
    np.add.at(dEhat, S.reshape(-1), (us / M).reshape(-1, E.shape[1]))
    return loss, dE, dEhat


def hinge_loss(E_row, truth, h: LabelHierarchy, Ehat, margin: float) -> float:
    """Single-point form, with ``Ehat`` a HierarchicalEmbeddings."""
    e = np.asarray(E_row, dtype=np.float64)
    val = float(np.linalg.norm(e - Ehat.row(truth)))
    for s in h.siblings(truth):
        val += max(margin - float(np.linalg.norm(e - Ehat.row(s))), 0.0)
    return val


def total_loss(ce: float, hinge: float, alpha: float) -> float:
    if alpha < 0:
        raise ParameterError("alpha must be non-negative")
    return ce + alpha * hinge


# ---------------------------------------------------------------- optimisers

def one_cycle_lr(step: int, total: int, peak: float, pct_start: float = 0.3,
                 div: float = 25.0, final_div: float = 1e4) -> float:
    """Cosine warm-up to ``peak`` then cosine decay (OneCycle shape)."""
    total = max(total, 1)
    up = max(int(round(pct_start * total)), 1)
    lo, end = peak / div, peak / div / final_div
    if step < up:
        t = step / up
        return lo + (peak - lo) * (1 - math.cos(math.pi * t)) / 2
    t = min((step - up) / max(total - up, 1), 1.0)
    return end + (peak - end) * (1 + math.cos(math.pi * t)) / 2


class Optimizer:
    def __init__(self, store: ParamStore, cfg: TrainConfig, total_steps: int):
        self.store, self.cfg, self.total = store, cfg, total_steps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.params.items()}

    @property
    def lr(self) -> float:
        return one_cycle_lr(self.t, self.total, self.cfg.lr, self.cfg.pct_start)

    def step(self) -> float:
        cfg, lr = self.cfg, self.lr
        grads = self.store.grads
        for k, g in grads.items():
            check_finite(g, f"gradient of {k}")
        if cfg.clip_norm > 0:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > cfg.clip_norm:
                for g in grads.values():
                    g *= cfg.clip_norm / norm
        self.t += 1
        for k in self.store.names():
            p, g = self.store.params[k], grads[k]
            if cfg.optimizer == "sgd":
                buf = self.m[k]
                buf *= cfg.momentum
                buf += g + cfg.weight_decay * p
                p -= lr * buf
            else:
                b1, b2 = 0.9, 0.999
                self.m[k] = b1 * self.m[k] + (1 - b1) * g
                self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
                mh = self.m[k] / (1 - b1 ** self.t)
                vh = self.v[k] / (1 - b2 ** self.t)
                p *= 1 - lr * cfg.weight_decay
                p -= lr * mh / (np.sqrt(vh) + 1e-8)
            check_finite(p, f"parameter {k}")
        return lr


# ---------------------------------------------------------------- model bundle

@dataclass
class Model:
    """Parameters plus everything needed to turn them into predictions."""

    params: ParamStore
    enc: network.EncoderConfig
    hierarchy: LabelHierarchy
    provider: EmbeddingProvider

    @classmethod
    def create(cls, enc, hierarchy, provider, seed=0, graph_layers_=None) -> "Model":
        rng = np.random.default_rng(seed)
        p = network.init_params(enc, rng)
        L = hierarchy.depth if graph_layers_ is None else graph_layers_
        p.update(init_graph_params(enc.embed_dim, L, rng))
        if provider.dim != enc.embed_dim:
            raise ConfigError(f"text embedding width {provider.dim} != embed_dim {enc.embed_dim}")
        return cls(ParamStore(p), enc, hierarchy, provider)

    def text(self) -> TextEmbeddings:
        return embed_labels(self.hierarchy, self.provider)

    def label_embeddings(self, hierarchy=None):
        h = hierarchy or self.hierarchy
        return graph_encode(h, embed_labels(h, self.provider), self.params.params)


# ---------------------------------------------------------------- one step

@dataclass
class StepResult:
    ce: float
    hinge: float
    n_points: int


def loss_and_grads(model: Model, batch: LocalGlobalBatch, truth: np.ndarray, active: Sequence[int],
                   cfg: TrainConfig, use_hinge: bool, text: TextEmbeddings,
                   hierarchy: Optional[LabelHierarchy] = None, need_grad: bool = True) -> tuple:
    """Forward + backward for one batch.  ``truth`` holds node ids per local point.

    With ``need_grad=False`` the gradient dict is None.
    """
    h = hierarchy or model.hierarchy
    p = model.params.params
    ge_cache: dict = {}
    Ehat = graph_encode(h, text, p, cache=ge_cache)
    ids = list(Ehat.ids)
    pos = {n: i for i, n in enumerate(ids)}
    active = list(active)
    apos = {n: i for i, n in enumerate(active)}
    try:
        truth_idx = np.array([apos[int(t)] for t in truth], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"label {exc.args[0]} is outside the active label set") from None
    net_cache: dict = {}
    E = network.forward(batch, p, model.enc, net_cache).E_p
    arows = np.array([pos[n] for n in active], dtype=np.int64)
    ce, dE, dT = ce_loss_grad(E, Ehat.vectors[arows], cfg.tau, truth_idx)
    dEhat = np.zeros_like(Ehat.vectors)
    np.add.at(dEhat, arows, dT)
    hinge = 0.0
    if use_hinge and cfg.alpha > 0:
        table, mask = sibling_table(h, ids)
        trows = np.array([pos[int(t)] for t in truth], dtype=np.int64)
        hinge, dEh, dEhh = hinge_loss_grad(E, Ehat.vectors, trows, table, mask, cfg.margin)
        dE = dE + cfg.alpha * dEh
        dEhat += cfg.alpha * dEhh
    if not need_grad:
        return StepResult(ce, hinge, len(truth)), None
    grads = network.backward(net_cache, dE, p, model.enc)
    graph_encode_backward(ge_cache, dEhat, p, grads)
    return StepResult(ce, hinge, len(truth)), grads


# ---------------------------------------------------------------- training loops

@dataclass
class TrainLog:
    records: list = field(default_factory=list)  # (epoch, stage, ce, hinge, lr)

    def add(self, epoch, stage, ce, hinge, lr):
        self.records.append((epoch, stage, ce, hinge, lr))

    def lines(self) -> list:
        return [f"{e}\t{s}\t{ce:.6f}\t{hg:.6f}\t{lr:.6g}" for e, s, ce, hg, lr in self.records]

    def write(self, path, append=False) -> None:
        with open(path, "a" if append else "w") as fh:
            for line in self.lines():
                fh.write(line + "\n")


Sample = tuple  # (PointCloud, active node ids)


def _stage_samples(model: Model, datasets: Sequence[PointCloud], stage: int, h=None) -> list:
    h = h or model.hierarchy
    out = []
    for cloud in datasets:
        if cloud.labels is None:
            raise DataError("training clouds need labels")
        if stage == 1:
            base = h.base_classes()
            labs = np.array([h.merge_to_base(int(x)) for x in cloud.labels], np.uint16) \
                if cloud.N else cloud.labels
            out.append((cloud.with_labels(labs), base))
        else:
            active = h.nodes_for_domain(cloud.domain_id)
            bad = sorted(set(np.unique(cloud.labels).tolist()) - set(active))
            if bad:
                raise DataError(f"domain {cloud.domain_id} labels {bad} are not nodes it annotates")
            out.append((cloud, active))
    return out


def _batch_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(x) for x in parts]).generate_state(1)[0])


def run_epochs(model: Model, streams: Callable, steps_per_epoch: int, epochs: int, stage: int,
               cfg: TrainConfig, use_hinge: bool, log_path=None,
               on_epoch: Optional[Callable] = None) -> TrainLog:
    """Generic loop.  ``streams(epoch)`` yields lists of (batch, truth, active)."""
    opt = Optimizer(model.params, cfg, steps_per_epoch * epochs)
    text = model.text()
    tlog = TrainLog()
    for epoch in range(epochs):
        ce_sum = hg_sum = 0.0
        n_sum = 0
        lr = opt.lr
        for group in streams(epoch):
            model.params.zero_grad()
            for batch, truth, active in group:
                res, grads = loss_and_grads(model, batch, truth, active, cfg, use_hinge, text)
                model.params.accumulate(grads, 1.0 / len(group))
                ce_sum += res.ce
                hg_sum += res.hinge
                n_sum += 1
            lr = opt.step()
        tlog.add(epoch, stage, ce_sum / max(n_sum, 1), hg_sum / max(n_sum, 1), lr)
        log.info("stage %d epoch %d ce %.4f hinge %.4f", stage, epoch, ce_sum / max(n_sum, 1),
                 hg_sum / max(n_sum, 1))
        if on_epoch is not None:
            on_epoch(epoch, model)
    if log_path is not None:
        tlog.write(log_path, append=True)
    return tlog


def _cloud_streams(samples, sampler: SamplerConfig, cfg: TrainConfig, stage: int):
    def streams(epoch):
        rng = np.random.default_rng([cfg.seed, stage, epoch])
        order = rng.permutation(len(samples))
        for s in range(0, len(order), cfg.batch_size):
            group = []
            for i in order[s: s + cfg.batch_size]:
                cloud, active = samples[i]
                b = make_batch(cloud, sampler, seed=_batch_seed(cfg.seed, stage, epoch, i))
                group.append((b, b.local.labels, active))
            yield group
    return streams


def _train_stage(model, datasets, cfg, sampler, stage, epochs, use_hinge, log_path, on_epoch):
    if not datasets:
        raise EmptyInputError("no training clouds supplied")
    samples = _stage_samples(model, datasets, stage)
    steps = -(-len(samples) // cfg.batch_size)
    return run_epochs(model, _cloud_streams(samples, sampler, cfg, stage), steps, epochs, stage,
                      cfg, use_hinge, log_path, on_epoch)


def train_stage1(model: Model, datasets: Sequence[PointCloud], cfg: TrainConfig,
                 sampler: SamplerConfig, log_path=None, on_epoch=None) -> TrainLog:
    """Coarse stage: labels merged to base classes, cross-entropy only."""
    return _train_stage(model, datasets, cfg, sampler, 1, cfg.epochs_stage1, False, log_path, on_epoch)


def train_stage2(model: Model, datasets: Sequence[PointCloud], cfg: TrainConfig,
                 sampler: SamplerConfig, log_path=None, on_epoch=None) -> TrainLog:
    """Fine stage: each domain's own label set, cross-entropy plus sibling hinge."""
    return _train_stage(model, datasets, cfg, sampler, 2, cfg.epochs_stage2, cfg.use_hinge,
                        log_path, on_epoch)


# ---------------------------------------------------------------- replay + incremental

class ReplayBuffer:
    """Per-domain uniform reservoir of prepared batches.

    Capacity per domain is ``budget // local_count`` batches, so the retained
    local points never exceed ``budget`` per domain.
    """

    def __init__(self, budget: int, local_count: int, seed: int = 0):
        self.budget = budget
        self.capacity = budget // max(local_count, 1)
        self.items: dict = {}
        self.seen: dict = {}
        self.rng = np.random.default_rng(seed)

    def offer(self, batch: LocalGlobalBatch, truth, active, domain_id: int) -> None:
        if self.capacity == 0:
            return
        items = self.items.setdefault(domain_id, [])
        self.seen[domain_id] = self.seen.get(domain_id, 0) + 1
        entry = (batch, truth, list(active))
        if len(items) < self.capacity:
            items.append(entry)
        else:
            j = int(self.rng.integers(self.seen[domain_id]))
            if j < self.capacity:
                items[j] = entry

    def __len__(self) -> int:
        return sum(len(v) for v in self.items.values())

    def points(self) -> int:
        return sum(int(b.local.N) for v in self.items.values() for b, _, _ in v)

    def entries(self) -> list:
        return [e for d in sorted(self.items) for e in self.items[d]]


def fill_replay(buffer: ReplayBuffer, model: Model, datasets: Sequence[PointCloud],
                sampler: SamplerConfig, passes: int = 2, seed: int = 0) -> ReplayBuffer:
    samples = _stage_samples(model, datasets, 2)
    for r in range(passes):
        for i, (cloud, active) in enumerate(samples):
            b = make_batch(cloud, sampler, seed=_batch_seed(seed, 99, r, i))
            buffer.offer(b, b.local.labels, active, cloud.domain_id)
    return buffer


def insert_leaves(h: LabelHierarchy, leaves: Sequence[tuple]) -> tuple:
    """``leaves`` holds ``(parent_id, text, tags)``; returns (hierarchy, new ids)."""
    new_ids = []
    for parent, text, *rest in leaves:
        h, nid = h.insert_leaf(parent, text, rest[0] if rest else ())
        new_ids.append(nid)
    return h, new_ids


def finetune_incremental(model: Model, new_datasets: Sequence[PointCloud], new_leaves: Sequence[tuple],
                         replay: ReplayBuffer, cfg: TrainConfig, sampler: SamplerConfig,
                         log_path=None, on_epoch=None) -> tuple:
    """Insert new leaves, then train on new-domain batches mixed 1:1 with replay."""
    if cfg.replay_budget > 0 and len(replay) == 0:
        raise ConfigError("replay_budget > 0 but the replay buffer is empty")
    if not new_datasets:
        raise EmptyInputError("no new-domain clouds supplied")
    model.hierarchy, new_ids = insert_leaves(model.hierarchy, new_leaves)
    samples = _stage_samples(model, new_datasets, 2)
    old = replay.entries() if cfg.replay_budget > 0 else []

    def streams(epoch):
        rng = np.random.default_rng([cfg.seed, 3, epoch])
        order = rng.permutation(len(samples))
        for k, i in enumerate(order):
            cloud, active = samples[i]
            b = make_batch(cloud, sampler, seed=_batch_seed(cfg.seed, 3, epoch, i))
            group = [(b, b.local.labels, active)]
            if old:
                group.append(old[int(rng.integers(len(old)))])
            yield group

    tlog = run_epochs(model, streams, len(samples), cfg.epochs_finetune, 3, cfg, cfg.use_hinge,
                      log_path, on_epoch)
    return model, new_ids, tlog


# ---------------------------------------------------------------- inference

def predict_batch(model: Model, batch: LocalGlobalBatch, active: Sequence[int], tau: float,
                  hierarchy=None, Ehat=None) -> Prediction:
    h = hierarchy or model.hierarchy
    if Ehat is None:
        Ehat = model.label_embeddings(h)
    E = network.forward(batch, model.params.params, model.enc).E_p
    return class_prob(E, Ehat.rows(list(active)), tau, list(active))


def predict_cloud(model: Model, cloud: PointCloud, active: Sequence[int], tau: float,
                  sampler: SamplerConfig, hierarchy=None, seed: int = 0) -> Prediction:
    """Per-source-point prediction: local samples partition the cloud."""
    h = hierarchy or model.hierarchy
    Ehat = model.label_embeddings(h)
    active = sorted(active)
    prob = np.zeros((cloud.N, len(active)))
    for b in cover_batches(cloud, sampler, seed):
        pred = predict_batch(model, b, active, tau, h, Ehat)
        prob[b.source_indices] = pred.prob[b.origin_indices]
    return Prediction(prob, np.asarray(active))


def zero_shot_infer(model: Model, cloud: PointCloud, new_leaves: Sequence[tuple], tau: float,
                    sampler: SamplerConfig, active: Optional[Sequence[int]] = None, seed: int = 0) -> tuple:
    """Classify against a hierarchy copy extended with ``new_leaves``; params stay frozen.

    Returns ``(prediction, extended hierarchy, new ids)``.  When ``active`` is
    None the active set is every leaf of the extended tree.
    """
    h, new_ids = insert_leaves(model.hierarchy, new_leaves)
    act = list(active) if active is not None else h.leaves()
    act = sorted(set(act) | set(new_ids)) if active is not None else act
    pred = predict_cloud(model, cloud, act, tau, sampler, hierarchy=h, seed=seed)
    return pred, h, new_ids
