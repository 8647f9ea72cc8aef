import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from cityseg import sampling
from cityseg.errors import EmptyInputError, ParameterError, RangeError
from cityseg.pcio import PointCloud
from cityseg.sampling import SamplerConfig


def cloud_of(pos, feat=None, labels=None):
    pos = np.asarray(pos, dtype=np.float64)
    if feat is None:
        feat = np.zeros((len(pos), 3))
    return PointCloud(pos, feat, labels)


def assert_grid_matches_oracle(c, cell):
    out = sampling.grid_sample(c, cell)
    ref = oracles.grid_sample_oracle(c.positions, c.features, c.labels, cell)
    assert out.N == len(ref)
    for i, (cen, mf, maj, _) in enumerate(ref):
        np.testing.assert_allclose(out.positions[i], cen, rtol=1e-6, atol=1e-5)
        if mf:
            np.testing.assert_allclose(out.features[i], mf, rtol=1e-6, atol=1e-6)
        if maj is not None:
            assert int(out.labels[i]) == maj


# ---------------------------------------------------------------- grid_sample

def test_grid_sample_worked_example():
    c = cloud_of([(0.1, 0.1, 0.1), (0.4, 0.2, 0.3), (2.5, 0.1, 0.1)])
    out = sampling.grid_sample(c, 1.0)
    assert out.N == 2
    np.testing.assert_allclose(out.positions[0], (0.25, 0.15, 0.2), atol=1e-7)
    np.testing.assert_allclose(out.positions[1], (2.5, 0.1, 0.1), atol=1e-7)


def test_grid_sample_single_and_empty():
    c = cloud_of([(1.234, -5.5, 9.0)])
    assert np.array_equal(sampling.grid_sample(c, 0.2).positions, c.positions)
    e = PointCloud.empty(3)
    assert sampling.grid_sample(e, 0.2).N == 0


def test_grid_sample_bad_cell():
    with pytest.raises(ParameterError):
        sampling.grid_sample(cloud_of([(0, 0, 0)]), 0.0)


def test_grid_majority_tie_smallest_label():
    c = cloud_of([(0.1, 0.1, 0.1), (0.2, 0.2, 0.2), (0.3, 0.3, 0.3), (0.4, 0.4, 0.4)], labels=[9, 4, 9, 4])
    assert sampling.grid_sample(c, 1.0).labels.tolist() == [4]


@given(st.integers(1, 300), st.integers(0, 2**31 - 1), st.sampled_from([0.1, 0.25, 1.0, 3.0]))
def test_grid_sample_oracle_property(n, seed, cell):
    r = np.random.default_rng(seed)
    pos = r.uniform(-5, 5, (n, 3))
    c = cloud_of(pos, r.random((n, 2)), r.integers(0, 4, n))
    assert_grid_matches_oracle(c, cell)
    out, inv = sampling.grid_sample(c, cell, return_inverse=True)
    assert out.N <= c.N
    # one point per voxel, and each centroid sits inside its voxel
    vox = np.floor(out.positions.astype(np.float64) / cell)
    assert len({tuple(v) for v in vox}) == out.N
    src = np.floor(c.positions.astype(np.float64) / cell)
    assert np.array_equal(src, vox[inv])


# ---------------------------------------------------------------- random_sample

def test_random_sample_undersized():
    c = cloud_of(np.zeros((10, 3)))
    assert sampling.random_sample(c, 20).N == 10


def test_random_sample_cardinality_and_determinism():
    idx = sampling.random_sample_indices(100_000, 4096, seed=5)
    assert idx.size == 4096 and np.unique(idx).size == 4096
    assert np.array_equal(idx, sampling.random_sample_indices(100_000, 4096, seed=5))
    assert not np.array_equal(idx, sampling.random_sample_indices(100_000, 4096, seed=6))


def test_random_sample_bad_m():
    with pytest.raises(ParameterError):
        sampling.random_sample_indices(5, 0, 0)


# ---------------------------------------------------------------- knn_region

def test_knn_center_on_point():
    pos = np.random.default_rng(0).normal(size=(30, 3))
    c = cloud_of(pos)
    out = sampling.knn_region(c, c.positions[17], 1)
    assert np.array_equal(out.positions[0], c.positions[17])


def test_knn_two_nearest():
    c = cloud_of([(3, 0, 0), (1, 0, 0), (2, 0, 0)])
    assert sampling.knn_indices(c.positions, (0, 0, 0), 2).tolist() == [1, 2]


def test_knn_whole_cloud_and_ties():
    c = cloud_of([(1, 0, 0), (0, 1, 0), (-1, 0, 0), (0, 0, 2)])
    assert sampling.knn_indices(c.positions, (0, 0, 0), 10).tolist() == [0, 1, 2, 3]
    assert sampling.knn_indices(c.positions, (0, 0, 0), 2).tolist() == [0, 1]


def test_knn_errors():
    with pytest.raises(EmptyInputError):
        sampling.knn_region(PointCloud.empty(3), (0, 0, 0), 3)
    with pytest.raises(ParameterError):
        sampling.knn_indices(np.zeros((2, 3), np.float32), (0, 0, 0), 0)


@given(st.integers(1, 400), st.integers(1, 500), st.integers(0, 2**31 - 1), st.booleans())
def test_knn_oracle_property(n, K, seed, lattice):
    r = np.random.default_rng(seed)
    # lattice points create many exact distance ties
    pos = r.integers(-3, 4, (n, 3)).astype(float) if lattice else r.normal(size=(n, 3)) * 10
    center = r.integers(-2, 3, 3).astype(float) if lattice else r.normal(size=3)
    c = cloud_of(pos)
    got = sampling.knn_indices(c.positions, center, K).tolist()
    assert got == oracles.knn_oracle(c.positions, center, K)


# ---------------------------------------------------------------- serialize_order

def test_serialize_single():
    assert sampling.serialize_order(np.zeros((1, 3)), 1.0).tolist() == [0]


def test_morton_unit_grid_keys():
    pts = np.array([(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 1)], float)
    vox = sampling.voxel_coords(pts, 1.0)
    assert sampling.curve_keys(vox, "morton").tolist() == [0, 1, 2, 7]
    assert sampling.serialize_order(pts + 0.5, 1.0).tolist() == [0, 1, 2, 3]


def test_serialize_range_error():
    pts = np.array([(0, 0, 0), (float(1 << 21), 0, 0)])
    with pytest.raises(RangeError):
        sampling.serialize_order(pts, 1.0)


def test_serialize_bad_cell_and_curve():
    with pytest.raises(ParameterError):
        sampling.serialize_order(np.zeros((2, 3)), -1.0)
    with pytest.raises(ParameterError):
        sampling.serialize_order(np.zeros((2, 3)), 1.0, "peano")


@given(st.integers(0, 300), st.integers(0, 2**31 - 1), st.sampled_from(["morton", "hilbert"]),
       st.sampled_from([0.05, 0.5, 2.0]))
def test_serialize_oracle_property(n, seed, curve, cell):
    r = np.random.default_rng(seed)
    pos = r.uniform(-20, 20, (n, 3)).astype(np.float32)
    order = sampling.serialize_order(pos, cell, curve)
    assert sorted(order.tolist()) == list(range(n))
    assert order.tolist() == oracles.serialize_oracle(pos, cell, curve)


# ---------------------------------------------------------------- batches

def test_sampler_config_validation():
    with pytest.raises(ParameterError):
        SamplerConfig(local_grid=2.0, global_grid=1.0)
    with pytest.raises(ParameterError):
        SamplerConfig(local_count=0)
    with pytest.raises(ParameterError):
        SamplerConfig(curve="peano")
    with pytest.raises(ParameterError):
        SamplerConfig(local_grid=0)


def _uniform_cloud(seed, n=3000, extent=20.0):
    r = np.random.default_rng(seed)
    return cloud_of(r.uniform(0, extent, (n, 3)), r.random((n, 3)), r.integers(0, 5, n))


def test_batch_small_cloud_covers_everything():
    c = _uniform_cloud(1, n=200)
    cfg = SamplerConfig(local_count=512)
    b = sampling.make_batch(c, cfg)
    ref = sampling.grid_sample(c, cfg.local_grid)
    assert b.local.N == ref.N
    assert np.array_equal(b.source_indices, np.arange(200))


@pytest.mark.parametrize("seed", range(5))
def test_batch_invariants(seed):
    c = _uniform_cloud(seed)
    cfg = SamplerConfig(local_count=256, curve="hilbert" if seed % 2 else "morton", seed=seed)
    b = sampling.make_batch(c, cfg)
    assert sorted(b.local_order.tolist()) == list(range(b.local.N))
    assert sorted(b.global_order.tolist()) == list(range(b.global_.N))
    assert b.global_.N >= b.local.N
    lo = b.global_.positions.min(0) - cfg.global_grid
    hi = b.global_.positions.max(0) + cfg.global_grid
    assert np.all(b.local.positions >= lo) and np.all(b.local.positions <= hi)
    assert b.origin_indices.shape == b.source_indices.shape
    again = sampling.make_batch(c, cfg)
    assert np.array_equal(again.local.positions, b.local.positions)
    assert np.array_equal(again.global_.positions, b.global_.positions)
    assert np.array_equal(again.local_order, b.local_order)


def test_batch_components_match_definition():
    c = _uniform_cloud(7)
    cfg = SamplerConfig(local_count=300, global_multiplier=3)
    b = sampling.make_batch(c, cfg, seed=11)
    loc = sampling.grid_sample(sampling.random_sample(c, 300, 11), cfg.local_grid)
    assert np.array_equal(b.local.positions, loc.positions)
    center = loc.positions.astype(np.float64).mean(0)
    glo = sampling.grid_sample(sampling.knn_region(c, center, 900), cfg.global_grid)
    assert np.array_equal(b.global_.positions, glo.positions)
    assert np.array_equal(b.local_order, sampling.serialize_order(loc.positions, cfg.local_grid))


def test_cover_batches_partition():
    c = _uniform_cloud(3, n=1000)
    cfg = SamplerConfig(local_count=128)
    seen = np.concatenate([b.source_indices for b in sampling.cover_batches(c, cfg, seed=2)])
    assert np.array_equal(np.sort(seen), np.arange(1000))


def test_empty_batch():
    with pytest.raises(EmptyInputError):
        sampling.make_batch(PointCloud.empty(3), SamplerConfig())


@given(hnp.arrays(np.float64, (6, 3), elements=st.floats(-100, 100)))
def test_voxel_coords_non_negative(pos):
    v = sampling.voxel_coords(pos, 0.5)
    assert v.min() == 0 and v.dtype == np.int64
