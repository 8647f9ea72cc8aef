"""Voxel downsampling, random/KNN sampling, curve serialisation, batch assembly."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import EmptyInputError, ParameterError, RangeError
from .pcio import PointCloud

_LIMIT = 1 << _kernels.CURVE_BITS


@dataclass(frozen=True)
class SamplerConfig:
    local_grid: float = 0.2
    global_grid: float = 1.0
    local_count: int = 4096
    global_multiplier: int = 10
    curve: str = "morton"
    seed: int = 0

    def __post_init__(self):
        if not (self.local_grid > 0 and self.global_grid > 0):
            raise ParameterError("grid sizes must be positive")
        if self.local_grid > self.global_grid:
            raise ParameterError("local_grid must not exceed global_grid")
        if self.local_count < 1 or self.global_multiplier < 1:
            raise ParameterError("local_count and global_multiplier must be >= 1")
        if self.curve not in ("morton", "hilbert"):
            raise ParameterError(f"unknown curve {self.curve!r}")


@dataclass(frozen=True, eq=False)
class LocalGlobalBatch:
    local: PointCloud
    global_: PointCloud
    local_order: np.ndarray
    global_order: np.ndarray
    source_indices: np.ndarray  # rows of the source cloud that were sampled
    origin_indices: np.ndarray  # local point each sampled source row fell into

    @property
    def center(self) -> np.ndarray:
        return self.local.positions.astype(np.float64).mean(0)


def voxel_coords(positions: np.ndarray, cell: float) -> np.ndarray:
    """Integer voxel coordinates shifted so the minimum is zero per axis."""
    if not cell > 0:
        raise ParameterError(f"cell size must be positive, got {cell}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if pos.shape[0] == 0:
        return np.zeros((0, 3), np.int64)
    vox = np.floor(pos / cell).astype(np.int64)
    vox -= vox.min(0)
    if vox.max() >= _LIMIT:
        raise RangeError(f"quantised coordinate {int(vox.max())} exceeds the 21-bit curve range")
    return vox


def curve_keys(vox: np.ndarray, curve: str = "morton") -> np.ndarray:
    if curve == "morton":
        return _kernels.morton_encode(vox)
    if curve == "hilbert":
        return _kernels.hilbert_encode(vox)
    raise ParameterError(f"unknown curve {curve!r}")


def serialize_order(positions: np.ndarray, cell: float, curve: str = "morton") -> np.ndarray:
    """Permutation sorting points by the curve key of their voxel; ties keep source order."""
    vox = voxel_coords(positions, cell)
    if vox.shape[0] == 0:
        return np.zeros(0, np.int64)
    return np.argsort(curve_keys(vox, curve), kind="stable").astype(np.int64)


def grid_sample(cloud: PointCloud, cell: float, return_inverse: bool = False):
    """One point per occupied voxel: centroid position, mean features, majority label.

    Output rows follow the voxel Morton key.  With ``return_inverse`` the
    voxel index of every input row is returned too.
    """
    vox = voxel_coords(cloud.positions, cell)
    n = cloud.N
    if n == 0:
        out = PointCloud(np.zeros((0, 3)), np.zeros((0, cloud.F)),
                         None if cloud.labels is None else np.zeros(0, np.uint16),
                         cloud.domain_id, cloud.channels)
        return (out, np.zeros(0, np.int64)) if return_inverse else out
    keys = _kernels.morton_encode(vox)
    order = np.argsort(keys, kind="stable")
    ks = keys[order]
    lab = None if cloud.labels is None else cloud.labels[order].astype(np.int64)
    starts, pos_sum, feat_sum, counts, majority = _kernels.voxel_reduce(
        ks, cloud.positions[order], cloud.features[order], lab)
    cnt = counts[:, None].astype(np.float64)
    out = PointCloud(
        pos_sum / cnt,
        feat_sum / cnt,
        None if cloud.labels is None else majority.astype(np.uint16),
        cloud.domain_id,
        cloud.channels,
    )
    if not return_inverse:
        return out
    group = np.repeat(np.arange(starts.size), counts)
    inverse = np.empty(n, np.int64)
    inverse[order] = group
    return out, inverse


def random_sample_indices(n: int, M: int, seed: int) -> np.ndarray:
    if M < 1:
        raise ParameterError("sample size must be >= 1")
    if n <= M:
        return np.arange(n, dtype=np.int64)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=M, replace=False)).astype(np.int64)


def random_sample(cloud: PointCloud, M: int, seed: int = 0) -> PointCloud:
    idx = random_sample_indices(cloud.N, M, seed)
    return cloud if idx.size == cloud.N else cloud.subset(idx)


def knn_indices(positions: np.ndarray, center, K: int) -> np.ndarray:
    """Indices of the K nearest rows, ordered by (distance, index)."""
    n = positions.shape[0]
    if n == 0:
        raise EmptyInputError("knn query on an empty cloud")
    if K < 1:
        raise ParameterError("K must be >= 1")
    d2 = _kernels.sq_distances(positions, np.asarray(center, dtype=np.float64).reshape(3))
    if K >= n:
        return np.lexsort((np.arange(n), d2)).astype(np.int64)
    kth = np.partition(d2, K - 1)[K - 1]
    cand = np.flatnonzero(d2 <= kth)
    sel = cand[np.lexsort((cand, d2[cand]))][:K]
    return sel.astype(np.int64)


def knn_region(cloud: PointCloud, center, K: int) -> PointCloud:
    return cloud.subset(knn_indices(cloud.positions, center, K))


def batch_from_indices(cloud: PointCloud, idx: np.ndarray, cfg: SamplerConfig) -> LocalGlobalBatch:
    """Assemble a local/global pair from an explicit local sample of ``cloud``."""
    if cloud.N == 0:
        raise EmptyInputError("cannot build a batch from an empty cloud")
    local, origin = grid_sample(cloud.subset(idx), cfg.local_grid, return_inverse=True)
    center = local.positions.astype(np.float64).mean(0)
    region = knn_region(cloud, center, cfg.global_multiplier * cfg.local_count)
    glob = grid_sample(region, cfg.global_grid)
    return LocalGlobalBatch(
        local,
        glob,
        serialize_order(local.positions, cfg.local_grid, cfg.curve),
        serialize_order(glob.positions, cfg.global_grid, cfg.curve),
        np.asarray(idx, dtype=np.int64),
        origin,
    )


def make_batch(cloud: PointCloud, cfg: SamplerConfig, seed: int | None = None) -> LocalGlobalBatch:
    seed = cfg.seed if seed is None else seed
    idx = random_sample_indices(cloud.N, cfg.local_count, seed)
    return batch_from_indices(cloud, idx, cfg)


def cover_batches(cloud: PointCloud, cfg: SamplerConfig, seed: int = 0):
    """Yield batches whose local samples partition the whole cloud."""
    perm = np.random.default_rng(seed).permutation(cloud.N)
    for s in range(0, cloud.N, cfg.local_count):
        yield batch_from_indices(cloud, np.sort(perm[s: s + cfg.local_count]), cfg)
