import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cityseg import fixtures, gradcheck, training
from cityseg.errors import ConfigError, DataError, EmptyInputError, NumericError, ParameterError
from cityseg.hierarchy import EmbeddingProvider, default_hierarchy
from cityseg.network import EncoderConfig
from cityseg.sampling import SamplerConfig
from cityseg.training import Model, ReplayBuffer, TrainConfig

ENC = EncoderConfig(feature_dim=7, hidden_dim=8, embed_dim=8, n_heads=2, n_blocks=1, window=8)
SAMPLER = SamplerConfig(local_count=128, global_multiplier=4)


def tiny_model(seed=0, h=None):
    return Model.create(ENC, h or default_hierarchy(), EmbeddingProvider(dim=8), seed=seed)


@pytest.fixture(scope="module")
def toy():
    return fixtures.toy_dataset(scenes_per_domain=2, test_scenes=1, seed=4)


# ---------------------------------------------------------------- class_prob / losses

def test_equal_similarity_is_half():
    T = np.array([[1.0, 0.0], [0.0, 1.0]])
    p = training.class_prob(np.array([[1.0, 1.0]]), T, 0.07)
    np.testing.assert_allclose(p.prob, [[0.5, 0.5]], atol=1e-15)


def test_closed_form_probability():
    T = np.array([[1.0, 0.0], [0.0, 1.0]])
    p = training.class_prob(np.array([[1.0, 0.0]]), T, 1.0)
    e = math.e
    np.testing.assert_allclose(p.prob[0], [e / (e + 1), 1 / (e + 1)], rtol=1e-14)
    assert p.prob[0, 0] == pytest.approx(0.7311, abs=1e-4)


@given(hnp.arrays(np.float64, (5, 4), elements=st.floats(-3, 3)),
       hnp.arrays(np.float64, (5,), elements=st.floats(0.01, 100)))
def test_prob_rows_and_scale_invariance(E, scale):
    E = E + np.array([10.0, 0, 0, 0])  # keep rows away from zero norm
    T = np.random.default_rng(0).normal(size=(3, 4))
    p = training.class_prob(E, T, 0.1, [4, 9, 11])
    assert np.all(np.abs(p.prob.sum(1) - 1) < 1e-9)
    q = training.class_prob(E * scale[:, None], T, 0.1, [4, 9, 11])
    np.testing.assert_allclose(q.prob, p.prob, rtol=1e-10, atol=1e-14)
    assert np.array_equal(q.argmax, p.argmax)


def test_argmax_ties_smallest_id():
    pred = training.Prediction(np.array([[0.5, 0.5], [0.2, 0.8]]), np.array([3, 7]))
    assert pred.argmax.tolist() == [3, 7]


def test_class_prob_errors():
    with pytest.raises(NumericError):
        training.class_prob(np.zeros((1, 2)), np.eye(2), 1.0)
    with pytest.raises(ParameterError):
        training.class_prob(np.ones((1, 2)), np.zeros((0, 2)), 1.0)
    with pytest.raises(ParameterError):
        training.class_prob(np.ones((1, 2)), np.ones((2, 3)), 1.0)


def test_ce_uniform_and_certain():
    pred = training.Prediction(np.full((4, 5), 0.2), np.arange(5))
    assert training.ce_loss(pred, np.array([0, 1, 2, 3])) == pytest.approx(math.log(5), abs=1e-12)
    assert math.log(5) == pytest.approx(1.6094, abs=1e-4)
    sure = training.Prediction(np.eye(3), np.arange(3))
    assert training.ce_loss(sure, np.arange(3)) == 0.0


def test_ce_clamp_counts_warning():
    before = training.numeric_warnings["ce_clamped"]
    pred = training.Prediction(np.array([[1.0, 0.0]]), np.arange(2))
    loss = training.ce_loss(pred, np.array([1]))
    assert loss == pytest.approx(-math.log(1e-12))
    assert training.numeric_warnings["ce_clamped"] == before + 1


@given(hnp.arrays(np.float64, (6, 3), elements=st.floats(-2, 2)), st.integers(0, 2**31 - 1))
def test_losses_non_negative(E, seed):
    E = E + 0.5
    r = np.random.default_rng(seed)
    T = r.normal(size=(4, 3))
    t = r.integers(0, 4, 6)
    loss, _, _ = training.ce_loss_grad(E, T, 0.07, t)
    assert loss >= 0
    h = default_hierarchy()
    ids = h.label_ids()
    table, mask = training.sibling_table(h, ids)
    H = r.normal(size=(len(ids), 3))
    hl, _, _ = training.hinge_loss_grad(E, H, r.integers(0, len(ids), 6), table, mask, 1.0)
    assert hl >= 0


class _Rows:
    def __init__(self, rows):
        self.rows_ = rows

    def row(self, n):
        return self.rows_[n]


def test_hinge_hand_example():
    h = default_hierarchy()  # 12 (river) has exactly one sibling, 13 (pond)
    e = np.zeros(2)
    Ehat = _Rows({12: np.array([0.2, 0.0]), 13: np.array([0.0, 0.4])})
    assert training.hinge_loss(e, 12, h, Ehat, 1.0) == pytest.approx(0.8)


def test_hinge_zero_and_no_siblings():
    h = default_hierarchy()
    Ehat = _Rows({12: np.zeros(2), 13: np.array([0.0, 1.5])})
    assert training.hinge_loss(np.zeros(2), 12, h, Ehat, 1.0) == 0.0
    h2, nid = h.insert_leaf(14, "sedan")
    Ehat = _Rows({nid: np.array([3.0, 4.0])})
    assert training.hinge_loss(np.zeros(2), nid, h2, Ehat, 1.0) == pytest.approx(5.0)


def test_hinge_batch_matches_single_point():
    r = np.random.default_rng(1)
    h = default_hierarchy()
    ids = h.label_ids()
    table, mask = training.sibling_table(h, ids)
    E, H = r.normal(size=(5, 4)) * 0.5, r.normal(size=(len(ids), 4)) * 0.5
    rows = r.integers(0, len(ids), 5)
    batch, _, _ = training.hinge_loss_grad(E, H, rows, table, mask, 1.0)
    Ehat = _Rows({n: H[i] for i, n in enumerate(ids)})
    single = np.mean([training.hinge_loss(E[k], ids[rows[k]], h, Ehat, 1.0) for k in range(5)])
    assert batch == pytest.approx(single, rel=1e-12)


def test_total_loss():
    assert training.total_loss(1.0, 0.5, 0.0) == 1.0
    assert training.total_loss(1.0, 0.5, 0.3) == pytest.approx(1.15)
    with pytest.raises(ParameterError):
        training.total_loss(1.0, 0.5, -0.1)


@pytest.mark.parametrize("name", ["cross-entropy", "sibling hinge"])
@pytest.mark.parametrize("seed", range(10))
def test_loss_gradients(name, seed):
    assert gradcheck.CHECKS[name](seed) < gradcheck.TOL


def test_config_validation():
    for bad in (dict(tau=0), dict(margin=0), dict(alpha=-1), dict(lr=0), dict(optimizer="lamb"),
                dict(batch_size=0), dict(replay_budget=-1)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


# ---------------------------------------------------------------- schedule / optimiser

def test_one_cycle_shape():
    lrs = [training.one_cycle_lr(s, 100, 0.1) for s in range(101)]
    assert lrs[0] == pytest.approx(0.1 / 25)
    assert max(lrs) == pytest.approx(0.1) and int(np.argmax(lrs)) == 30
    assert lrs[-1] == pytest.approx(0.1 / 25 / 1e4)
    assert all(a <= b for a, b in zip(lrs[:30], lrs[1:31]))
    assert all(a >= b for a, b in zip(lrs[30:], lrs[31:]))


def test_momentum_sgd_step():
    from cityseg.numcore import ParamStore
    s = ParamStore({"w": np.array([1.0])})
    opt = training.Optimizer(s, TrainConfig(lr=0.1, momentum=0.9), 10)
    lr0 = opt.lr
    s.grads["w"][:] = 2.0
    opt.step()
    assert s["w"][0] == pytest.approx(1.0 - lr0 * 2.0)
    lr1 = opt.lr
    opt.step()
    assert s["w"][0] == pytest.approx(1.0 - lr0 * 2.0 - lr1 * (0.9 * 2.0 + 2.0))


def test_clipping_and_non_finite():
    from cityseg.numcore import ParamStore
    s = ParamStore({"w": np.zeros(2)})
    opt = training.Optimizer(s, TrainConfig(lr=1.0, clip_norm=1.0, momentum=0.0, pct_start=1e-9), 4)
    lr = opt.lr
    s.grads["w"][:] = [30.0, 40.0]
    opt.step()
    np.testing.assert_allclose(s["w"], [-0.6 * lr, -0.8 * lr])
    s.grads["w"][:] = [np.nan, 0.0]
    with pytest.raises(NumericError):
        opt.step()


def test_adamw_runs():
    from cityseg.numcore import ParamStore
    s = ParamStore({"w": np.ones(3)})
    opt = training.Optimizer(s, TrainConfig(optimizer="adamw", weight_decay=0.01), 5)
    s.grads["w"][:] = 1.0
    opt.step()
    assert np.all(s["w"] < 1.0)


# ---------------------------------------------------------------- stages

def test_stage1_descends_and_is_deterministic(toy):
    cfg = TrainConfig(lr=0.05, epochs_stage1=2, clip_norm=1.0)
    runs = []
    for _ in range(2):
        m = tiny_model()
        log = training.train_stage1(m, toy.train, cfg, SAMPLER)
        runs.append((m.params.checksum(), log))
    assert runs[0][0] == runs[1][0]
    ce = [r[2] for r in runs[0][1].records]
    assert ce[-1] < ce[0]
    assert all(r[1] == 1 and r[3] == 0.0 for r in runs[0][1].records)


def test_stage_log_file(toy, tmp_path):
    m = tiny_model()
    cfg = TrainConfig(epochs_stage1=1, epochs_stage2=1)
    training.train_stage1(m, toy.train[:2], cfg, SAMPLER, log_path=tmp_path / "log")
    training.train_stage2(m, toy.train[:2], cfg, SAMPLER, log_path=tmp_path / "log")
    lines = (tmp_path / "log").read_text().splitlines()
    assert [l.split("\t")[1] for l in lines] == ["1", "2"]
    assert all(len(l.split("\t")) == 5 for l in lines)


def test_empty_dataset():
    with pytest.raises(EmptyInputError):
        training.train_stage1(tiny_model(), [], TrainConfig(), SAMPLER)


def test_stage2_rejects_untagged_labels(toy):
    d2 = [c for c in toy.train if c.domain_id == 2][0]
    bad = d2.with_labels(np.full(d2.N, 6, np.uint16))  # domain 2 annotates base classes only
    with pytest.raises(DataError):
        training.train_stage2(tiny_model(), [bad], TrainConfig(epochs_stage2=1), SAMPLER)


def test_stage_active_sets(toy):
    m = tiny_model()
    s1 = training._stage_samples(m, toy.train, 1)
    assert all(act == m.hierarchy.base_classes() for _, act in s1)
    assert all(set(np.unique(c.labels)) <= set(act) for c, act in s1)
    s2 = training._stage_samples(m, toy.train, 2)
    assert all(act == m.hierarchy.nodes_for_domain(c.domain_id) for c, act in s2)


def test_alpha_zero_matches_no_hinge(toy):
    a, b = tiny_model(), tiny_model()
    training.train_stage2(a, toy.train[:2], TrainConfig(epochs_stage2=1, alpha=0.0), SAMPLER)
    training.train_stage2(b, toy.train[:2], TrainConfig(epochs_stage2=1, use_hinge=False), SAMPLER)
    assert a.params.checksum() == b.params.checksum()


def test_snapshot_callback(toy):
    seen = []
    training.train_stage1(tiny_model(), toy.train[:1], TrainConfig(epochs_stage1=3), SAMPLER,
                          on_epoch=lambda e, m: seen.append(e))
    assert seen == [0, 1, 2]


# ---------------------------------------------------------------- replay / incremental / zero-shot

def test_reservoir_bounds():
    buf = ReplayBuffer(budget=300, local_count=100, seed=0)
    assert buf.capacity == 3
    for d in (0, 1):
        for i in range(20):
            buf.offer(("batch", d, i), None, [], d)
    assert len(buf) == 6
    assert len(buf.items[0]) == 3 and len(buf.items[1]) == 3
    empty = ReplayBuffer(0, 100)
    empty.offer("b", None, [], 0)
    assert len(empty) == 0


def test_reservoir_is_uniform():
    counts = np.zeros(10)
    for s in range(2000):
        buf = ReplayBuffer(budget=2, local_count=1, seed=s)
        for i in range(10):
            buf.offer(i, None, [], 0)
        for b, _, _ in buf.entries():
            counts[b] += 1
    # each of 10 items retained with probability 2/10
    np.testing.assert_allclose(counts / 2000, 0.2, atol=0.035)


def test_finetune_requires_replay(toy):
    m = tiny_model()
    cfg = TrainConfig(replay_budget=256, epochs_finetune=1)
    with pytest.raises(ConfigError):
        training.finetune_incremental(m, toy.train[:1], [], ReplayBuffer(256, 128), cfg, SAMPLER)


def test_finetune_inserts_leaf(toy):
    m = tiny_model()
    m.hierarchy = m.hierarchy.with_tags(fixtures.NEW_DOMAIN, m.hierarchy.leaves())
    new_train, _ = fixtures.boat_domain(1, 0, seed=2)
    buf = ReplayBuffer(256, SAMPLER.local_count, 0)
    training.fill_replay(buf, m, toy.train, SAMPLER)
    assert 0 < buf.points() <= 256 * 3
    cfg = TrainConfig(replay_budget=256, epochs_finetune=1)
    m, new_ids, log = training.finetune_incremental(
        m, new_train, [(fixtures.BOAT_PARENT, "boat", (fixtures.NEW_DOMAIN,))], buf, cfg, SAMPLER)
    assert new_ids == [16] and m.hierarchy[16].parent_id == fixtures.BOAT_PARENT
    Ehat = m.label_embeddings()
    assert abs(np.linalg.norm(Ehat.row(16)) - 1) < 1e-9
    assert log.records[0][1] == 3


def test_finetune_without_replay(toy):
    m = tiny_model()
    m.hierarchy = m.hierarchy.with_tags(fixtures.NEW_DOMAIN, m.hierarchy.leaves())
    new_train, _ = fixtures.boat_domain(1, 0, seed=2)
    training.finetune_incremental(m, new_train, [(fixtures.BOAT_PARENT, "boat", (fixtures.NEW_DOMAIN,))],
                                  ReplayBuffer(0, 128), TrainConfig(epochs_finetune=1), SAMPLER)


def test_zero_shot_frozen_and_no_leaves(toy):
    m = tiny_model(seed=2)
    cloud = toy.test_by_domain[0][0]
    before = m.params.checksum()
    grads_before = {k: v.copy() for k, v in m.params.grads.items()}
    pred, h_ext, new = training.zero_shot_infer(m, cloud, [(4, "boat")], 0.07, SAMPLER)
    assert m.params.checksum() == before
    assert all(np.array_equal(grads_before[k], m.params.grads[k]) for k in grads_before)
    assert new == [16] and 16 in pred.label_ids and 16 not in m.hierarchy.nodes
    plain, _, _ = training.zero_shot_infer(m, cloud, [], 0.07, SAMPLER)
    ref = training.predict_cloud(m, cloud, m.hierarchy.leaves(), 0.07, SAMPLER)
    np.testing.assert_array_equal(plain.prob, ref.prob)


def test_predict_cloud_covers_all_points(toy):
    m = tiny_model()
    c = toy.test_by_domain[1][0]
    pred = training.predict_cloud(m, c, m.hierarchy.base_classes(), 0.07, SAMPLER)
    assert pred.prob.shape == (c.N, 5)
    assert np.all(np.abs(pred.prob.sum(1) - 1) < 1e-9)


def test_model_width_check():
    with pytest.raises(ConfigError):
        Model.create(ENC, default_hierarchy(), EmbeddingProvider(dim=4))
