"""End-to-end experiments on the synthetic fixtures.

These drive the acceptance suite and can be run directly::

    python -m cityseg.experiments toy
"""
from __future__ import annotations

import dataclasses
import itertools
import sys
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import fixtures
from .hierarchy import EmbeddingProvider, LabelHierarchy
from .metrics import MetricsReport, confusion_ids, metrics
from .network import EncoderConfig
from .pcio import PointCloud
from .sampling import SamplerConfig
from .training import (
    Model,
    ReplayBuffer,
    TrainConfig,
    fill_replay,
    finetune_incremental,
    predict_cloud,
    train_stage1,
    train_stage2,
    zero_shot_infer,
)

# Desk-scale settings: M=512 local points with an attention window of 8 keeps
# the window/sample ratio of the default (64 of 4096).
ENCODER = EncoderConfig(feature_dim=7, hidden_dim=32, embed_dim=32, n_heads=4, n_blocks=2, window=8)
SAMPLER = SamplerConfig(local_count=512)
TRAIN = TrainConfig(lr=0.05, epochs_stage1=15, epochs_stage2=10, epochs_finetune=4, clip_norm=1.0,
                    replay_budget=4096)
FINETUNE_LR = 0.02


def evaluate(model: Model, clouds: Sequence[PointCloud], active: Callable, tau: float,
             sampler: SamplerConfig, hierarchy: Optional[LabelHierarchy] = None,
             truth_map: Optional[Callable] = None) -> MetricsReport:
    """Pool a confusion matrix over ``clouds``.

    ``active(cloud)`` gives the label set; truth is each cloud's labels
    annotated into that set unless ``truth_map(cloud, active)`` is given.
    """
    h = hierarchy or model.hierarchy
    sets = [sorted(active(c)) for c in clouds]
    labels = sorted(set(itertools.chain.from_iterable(sets)))
    total = None
    for c, act in zip(clouds, sets):
        truth = truth_map(c, act) if truth_map else h.annotate(c.labels, act)
        pred = predict_cloud(model, c, act, tau, sampler, hierarchy=h)
        cm = confusion_ids(pred.argmax, truth, labels)
        total = cm if total is None else total + cm
    return metrics(total, [h[n].text for n in labels])


def sibling_spread(model: Model, hierarchy: Optional[LabelHierarchy] = None) -> float:
    """Mean Euclidean distance over all pairs of hierarchical embeddings sharing a parent."""
    h = hierarchy or model.hierarchy
    E = model.label_embeddings(h)
    dists = []
    for nid in h.ids():
        kids = h[nid].child_ids
        for a, b in itertools.combinations(kids, 2):
            dists.append(float(np.linalg.norm(E.row(a) - E.row(b))))
    return float(np.mean(dists))


# ---------------------------------------------------------------- toy pipeline

@dataclass
class ToyResult:
    stage1_base: MetricsReport
    stage2_leaf: MetricsReport
    stage1_leaf: MetricsReport
    per_domain_leaf: dict
    spread_init: float
    spread_final: float
    cpu_seconds: float
    model: Model
    data: fixtures.ToyDataset
    logs: list = field(default_factory=list)


def run_toy(seed: int = 0, encoder: EncoderConfig = ENCODER, sampler: SamplerConfig = SAMPLER,
            train: TrainConfig = TRAIN, scenes_per_domain: int = 13, test_scenes: int = 3) -> ToyResult:
    t0 = time.process_time()
    data = fixtures.toy_dataset(scenes_per_domain, test_scenes, seed=seed)
    h = data.hierarchy
    train = dataclasses.replace(train, seed=seed)
    model = Model.create(encoder, h, EmbeddingProvider(dim=encoder.embed_dim), seed=seed)
    spread0 = sibling_spread(model)
    held_out = [c for d in sorted(data.test_by_domain) for c in data.test_by_domain[d]]
    logs = train_stage1(model, data.train, train, sampler).lines()
    base = evaluate(model, held_out, lambda c: h.base_classes(), train.tau, sampler)
    leaf1 = evaluate(model, held_out, lambda c: h.leaves(), train.tau, sampler)
    logs += train_stage2(model, data.train, train, sampler).lines()
    leaf = evaluate(model, held_out, lambda c: h.leaves(), train.tau, sampler)
    per = {d: evaluate(model, cl, lambda c: h.leaves(), train.tau, sampler)
           for d, cl in sorted(data.test_by_domain.items())}
    return ToyResult(base, leaf, leaf1, per, spread0, sibling_spread(model),
                     time.process_time() - t0, model, data, logs)


# ---------------------------------------------------------------- zero-shot and incremental

@dataclass
class ZeroShotResult:
    accuracy: float
    chance: float
    checksum_before: str
    checksum_after: str
    unchanged_far_rows: bool
    far_nodes: list


def run_zero_shot(model: Model, seed: int = 0, sampler: SamplerConfig = SAMPLER, tau: float = 0.07,
                  test_scenes: int = 3) -> ZeroShotResult:
    _, test = fixtures.boat_domain(0, test_scenes, seed=seed)
    before = model.params.checksum()
    correct = total = 0
    h_ext = None
    for c in test:
        pred, h_ext, new_ids = zero_shot_infer(model, c, [(fixtures.BOAT_PARENT, "boat")], tau, sampler)
        correct += int((pred.argmax == c.labels).sum())
        total += c.N
    after = model.params.checksum()
    new_id = new_ids[0]
    L = model.label_embeddings().L
    far = [n for n in model.hierarchy.label_ids() if h_ext.hops(n, new_id) > L]
    old_rows = model.label_embeddings()
    new_rows = model.label_embeddings(h_ext)
    same = all(np.array_equal(old_rows.row(n), new_rows.row(n)) for n in far)
    return ZeroShotResult(correct / total, 1.0 / len(h_ext.leaves()), before, after, same, far)


@dataclass
class IncrementalResult:
    before: MetricsReport
    with_replay: MetricsReport
    without_replay: MetricsReport
    new_domain: MetricsReport
    replay_points: int

    @property
    def drop_replay(self) -> float:
        return 100.0 * (self.before.miou - self.with_replay.miou)

    @property
    def drop_plain(self) -> float:
        return 100.0 * (self.before.miou - self.without_replay.miou)


def run_incremental(model: Model, old_train: Sequence[PointCloud], old_test: Sequence[PointCloud],
                    seed: int = 0, sampler: SamplerConfig = SAMPLER, train: TrainConfig = TRAIN,
                    new_scenes: int = 6) -> IncrementalResult:
    """Fine-tune copies of ``model`` on the boat domain with and without replay."""
    new_train, new_test = fixtures.boat_domain(new_scenes, 2, seed=seed)
    cfg = dataclasses.replace(train, lr=FINETUNE_LR, seed=seed)
    h0 = model.hierarchy

    def leaves(m):
        return lambda c: m.hierarchy.leaves()

    before = evaluate(model, old_test, leaves(model), cfg.tau, sampler)
    base_h = h0.with_tags(fixtures.NEW_DOMAIN, h0.leaves())
    leaf = [(fixtures.BOAT_PARENT, "boat", (fixtures.NEW_DOMAIN,))]
    results = {}
    for budget in (cfg.replay_budget, 0):
        m = Model(model.params.copy(), model.enc, base_h, model.provider)
        c = dataclasses.replace(cfg, replay_budget=budget)
        buf = ReplayBuffer(budget, sampler.local_count, seed)
        if budget:
            fill_replay(buf, m, old_train, sampler, seed=seed)
        finetune_incremental(m, new_train, leaf, buf, c, sampler)
        results[budget] = (m, evaluate(m, old_test, leaves(m), cfg.tau, sampler), buf.points())
    m_r, rep_r, pts = results[cfg.replay_budget]
    new_rep = evaluate(m_r, new_test, leaves(m_r), cfg.tau, sampler)
    return IncrementalResult(before, rep_r, results[0][1], new_rep, pts)


# ---------------------------------------------------------------- ablation

@dataclass
class AblationResult:
    full: list
    no_cross_attention: list
    no_hinge: list
    flat: list

    @staticmethod
    def mean(reports, key="miou") -> float:
        return float(np.mean([getattr(r, key) for r in reports]))


def run_ablation(seeds: Sequence[int] = (0, 1, 2), encoder: EncoderConfig = ENCODER,
                 sampler: SamplerConfig = SAMPLER, train: TrainConfig = TRAIN,
                 report: Optional[Callable] = None) -> AblationResult:
    """Full model against three variants on the granularity-conflict fixture.

    Evaluation uses held-out scenes in the fine domain's style.  The
    hierarchical variants score over that domain's own label set; the flat
    variant has a single merged label set and scores over all of it.
    """
    out = AblationResult([], [], [], [])
    for seed in seeds:
        data = fixtures.conflict_dataset(seed=seed)
        h = data.hierarchy
        cfg = dataclasses.replace(train, seed=seed)
        prov = EmbeddingProvider(dim=encoder.embed_dim)
        fine = lambda c: h.nodes_for_domain(1)  # noqa: E731

        m = Model.create(encoder, h, prov, seed=seed)
        train_stage1(m, data.train, cfg, sampler)
        stage1 = m.params.copy()
        train_stage2(m, data.train, cfg, sampler)
        out.full.append(evaluate(m, data.test, fine, cfg.tau, sampler))

        m = Model(stage1, encoder, h, prov)
        train_stage2(m, data.train, dataclasses.replace(cfg, use_hinge=False), sampler)
        out.no_hinge.append(evaluate(m, data.test, fine, cfg.tau, sampler))

        enc_local = dataclasses.replace(encoder, use_global=False)
        m = Model.create(enc_local, h, prov, seed=seed)
        train_stage1(m, data.train, cfg, sampler)
        train_stage2(m, data.train, cfg, sampler)
        out.no_cross_attention.append(evaluate(m, data.test, fine, cfg.tau, sampler))

        fh, mapping = fixtures.flat_hierarchy(h, (0, 1))
        flat_train = [fixtures.relabel(c, mapping) for c in data.train]
        m = Model.create(encoder, fh, prov, seed=seed)
        train_stage1(m, flat_train, cfg, sampler)
        train_stage2(m, flat_train, cfg, sampler)
        out.flat.append(evaluate(m, data.test, lambda c: fh.label_ids(), cfg.tau, sampler,
                                 truth_map=lambda c, act: fixtures.relabel(c, mapping).labels))
        if report is not None:
            report(seed, out)
    return out


def _main(argv) -> int:
    which = argv[0] if argv else "toy"
    if which == "toy":
        r = run_toy()
        print(f"stage1 base OA {r.stage1_base.oa:.4f}  stage2 leaf mIoU {r.stage2_leaf.miou:.4f}  "
              f"cpu {r.cpu_seconds:.0f}s  spread {r.spread_init:.4f} -> {r.spread_final:.4f}")
        z = run_zero_shot(r.model)
        print(f"zero-shot acc {z.accuracy:.4f} (chance {z.chance:.4f}) checksum same {z.checksum_before == z.checksum_after}"
              f" far rows same {z.unchanged_far_rows}")
        old_test = [c for d in sorted(r.data.test_by_domain) for c in r.data.test_by_domain[d]]
        inc = run_incremental(r.model, r.data.train, old_test)
        print(f"incremental drop with replay {inc.drop_replay:.2f} pts, without {inc.drop_plain:.2f} pts, "
              f"new-domain mIoU {inc.new_domain.miou:.4f}")
    elif which == "ablation":
        def rep(seed, out):
            print(seed, *(f"{k} {getattr(out, k)[-1].oa:.4f}/{getattr(out, k)[-1].miou:.4f}"
                          for k in ("full", "no_cross_attention", "no_hinge", "flat")), flush=True)
        run_ablation(report=rep)
    else:
        print(f"unknown experiment {which!r}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(_main(sys.argv[1:]))
