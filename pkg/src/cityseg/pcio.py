"""Point-cloud data model, CSPC file I/O, attribute filling and synthetic scenes."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, HierarchyError, ParameterError, SchemaError, TruncatedError

DEFAULT_SCHEMA = ("r", "g", "b")
CSPC_MAGIC = b"CSPC"
CSPC_VERSION = 1
_HEADER = struct.Struct("<4sIQIB3x")  # 24 bytes


def default_channels(F: int) -> tuple[str, ...]:
    """Channel names assumed for an F-channel cloud read from disk."""
    names = list(DEFAULT_SCHEMA[:F])
    names += [f"c{i}" for i in range(len(names), F)]
    return tuple(names)


@dataclass(frozen=True, eq=False)
class PointCloud:
    positions: np.ndarray
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    domain_id: int = 0
    channels: Optional[tuple] = None

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float32).reshape(-1, 3)
        n = pos.shape[0]
        feat = np.ascontiguousarray(self.features, dtype=np.float32)
        if feat.ndim == 1 and feat.size == 0:
            feat = feat.reshape(n, 0)
        if feat.ndim != 2 or feat.shape[0] != n:
            raise SchemaError(f"features must be {n}xF, got {feat.shape}")
        if not np.isfinite(pos).all():
            raise ParameterError("positions contain non-finite values")
        lab = self.labels
        if lab is not None:
            lab = np.ascontiguousarray(lab)
            if lab.shape != (n,):
                raise SchemaError(f"labels must have {n} rows, got {lab.shape}")
            if lab.size and (lab.min() < 0 or lab.max() > 0xFFFF):
                raise SchemaError("labels must fit in u16")
            lab = lab.astype(np.uint16)
            lab.setflags(write=False)
        chans = tuple(self.channels) if self.channels is not None else default_channels(feat.shape[1])
        if len(chans) != feat.shape[1]:
            raise SchemaError(f"{len(chans)} channel names for {feat.shape[1]} feature columns")
        pos.setflags(write=False)
        feat.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "features", feat)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "channels", chans)
        object.__setattr__(self, "domain_id", int(self.domain_id))

    @property
    def N(self) -> int:
        return self.positions.shape[0]

    @property
    def F(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.N

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        return PointCloud(
            self.positions[idx],
            self.features[idx],
            None if self.labels is None else self.labels[idx],
            self.domain_id,
            self.channels,
        )

    def with_labels(self, labels) -> "PointCloud":
        return PointCloud(self.positions, self.features, labels, self.domain_id, self.channels)

    @staticmethod
    def empty(F: int = 3, labels: bool = True) -> "PointCloud":
        return PointCloud(np.zeros((0, 3)), np.zeros((0, F)),
                          np.zeros(0, np.uint16) if labels else None)


def concat_clouds(clouds: Sequence[PointCloud]) -> PointCloud:
    first = clouds[0]
    labs = None
    if all(c.labels is not None for c in clouds):
        labs = np.concatenate([c.labels for c in clouds])
    return PointCloud(
        np.concatenate([c.positions for c in clouds]),
        np.concatenate([c.features for c in clouds]),
        labs, first.domain_id, first.channels,
    )


# ---------------------------------------------------------------- CSPC I/O

def encode_cloud(cloud: PointCloud) -> bytes:
    has_labels = cloud.labels is not None
    parts = [
        _HEADER.pack(CSPC_MAGIC, CSPC_VERSION, cloud.N, cloud.F, int(has_labels)),
        cloud.positions.astype("<f4").tobytes(),
        cloud.features.astype("<f4").tobytes(),
    ]
    if has_labels:
        parts.append(cloud.labels.astype("<u2").tobytes())
    return b"".join(parts)


def decode_cloud(buf: bytes, domain_id: int = 0) -> PointCloud:
    if len(buf) < _HEADER.size:
        if buf[:4] and buf[:4] != CSPC_MAGIC[: len(buf[:4])]:
            raise FormatError("bad magic, not a CSPC file")
        raise TruncatedError("truncated CSPC header", len(buf))
    magic, version, n, F, has_labels = _HEADER.unpack_from(buf, 0)
    if magic != CSPC_MAGIC:
        raise FormatError(f"bad magic {magic!r}, not a CSPC file")
    if version != CSPC_VERSION:
        raise FormatError(f"unsupported CSPC version {version}")
    if has_labels not in (0, 1):
        raise FormatError(f"has_labels byte must be 0 or 1, got {has_labels}")
    if buf[21:24] != b"\x00\x00\x00":
        raise FormatError("reserved header bytes must be zero")
    off = _HEADER.size
    sizes = [("positions", n * 3 * 4), ("features", n * F * 4)]
    if has_labels:
        sizes.append(("labels", n * 2))
    chunks = {}
    for name, size in sizes:
        if off + size > len(buf):
            raise TruncatedError(f"truncated CSPC payload while reading {name}", len(buf))
        chunks[name] = buf[off: off + size]
        off += size
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after CSPC payload at offset {off}")
    pos = np.frombuffer(chunks["positions"], dtype="<f4").reshape(n, 3)
    feat = np.frombuffer(chunks["features"], dtype="<f4").reshape(n, F)
    lab = np.frombuffer(chunks["labels"], dtype="<u2") if has_labels else None
    return PointCloud(pos, feat, lab, domain_id)


def load_cloud(path, domain_id: int = 0) -> PointCloud:
    """Read a CSPC file.  The domain id is not stored on disk; pass it in."""
    return decode_cloud(Path(path).read_bytes(), domain_id)


def save_cloud(cloud: PointCloud, path) -> None:
    Path(path).write_bytes(encode_cloud(cloud))


# ---------------------------------------------------------------- attributes

def fill_missing_attributes(cloud: PointCloud, schema: Sequence[str] = DEFAULT_SCHEMA) -> PointCloud:
    """Return a cloud whose feature columns are exactly ``schema``.

    Channels the input lacks are zero-filled; present channels are copied
    unchanged.
    """
    schema = tuple(schema)
    extra = [c for c in cloud.channels if c not in schema]
    if extra:
        raise SchemaError(f"channels {extra} are not in schema {schema}")
    if cloud.channels == schema:
        return cloud
    feat = np.zeros((cloud.N, len(schema)), dtype=np.float32)
    for j, name in enumerate(cloud.channels):
        feat[:, schema.index(name)] = cloud.features[:, j]
    return PointCloud(cloud.positions, feat, cloud.labels, cloud.domain_id, schema)


# ---------------------------------------------------------------- synthetic scenes

@dataclass(frozen=True)
class LayoutItem:
    base: int
    subclass: int
    primitive: str
    count: int = 1
    points: Optional[int] = None  # per-instance override of density x area


@dataclass(frozen=True)
class SceneSpec:
    extent: tuple = (32.0, 32.0, 24.0)
    density: float = 4.0
    class_layout: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.density <= 0:
            raise ParameterError("density must be positive")
        if len(self.extent) != 3 or min(self.extent) <= 0:
            raise ParameterError("extent must be three positive lengths")


@dataclass(frozen=True)
class DatasetManifest:
    """Per-domain file lists with the node ids each domain annotates."""

    entries: tuple = ()  # (path, domain_id, tuple of annotated node ids)

    def __post_init__(self):
        ids = [e[1] for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ParameterError("domain ids must be unique within a manifest")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        entries = []
        for line in Path(path).read_text().splitlines():
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise FormatError(f"manifest line needs path, domain and node list: {line!r}")
            nodes = tuple(int(x) for x in parts[2].split(",") if x.strip()) if len(parts) == 3 else ()
            entries.append((parts[0], int(parts[1]), nodes))
        return cls(tuple(entries))

    def write(self, path) -> None:
        lines = [f"{p}\t{d}\t{','.join(str(n) for n in nodes)}" for p, d, nodes in self.entries]
        Path(path).write_text("\n".join(lines) + "\n")


# primitive presets: geometry ranges in meters, base color and return intensity in [0,1]
PRESETS = {
    "ground_plane": dict(kind="plane", z=0.0, rough=0.08, color=(0.45, 0.38, 0.25), intensity=0.30),
    "road_strip": dict(kind="strip", width=(4.0, 6.0), z=0.15, rough=0.005, color=(0.35, 0.35, 0.37), intensity=0.15),
    "river": dict(kind="strip", width=(3.0, 5.0), z=-0.5, rough=0.01, color=(0.20, 0.35, 0.50), intensity=0.05),
    "pond": dict(kind="patch", size=(6.0, 9.0), z=-1.2, rough=0.01, color=(0.15, 0.45, 0.75), intensity=0.10),
    "low_building": dict(kind="box", size=((6.0, 10.0), (6.0, 10.0), (3.0, 6.0)), color=(0.75, 0.60, 0.50), intensity=0.45),
    "tall_building": dict(kind="box", size=((7.0, 10.0), (7.0, 10.0), (12.0, 20.0)), color=(0.60, 0.62, 0.68), intensity=0.55),
    "tree": dict(kind="ellipsoid", radius=((1.5, 3.0), (1.5, 2.5)), center_z=(4.0, 7.0), color=(0.15, 0.45, 0.15), intensity=0.65),
    "shrub": dict(kind="ellipsoid", radius=((0.8, 1.4), (0.6, 1.0)), center_z=None, color=(0.45, 0.65, 0.30), intensity=0.75),
    "car": dict(kind="box", size=((4.0, 5.0), (1.7, 2.0), (1.4, 1.6)), color=(0.70, 0.10, 0.10), intensity=0.85),
    "truck": dict(kind="box", size=((7.0, 9.0), (2.4, 2.6), (3.0, 3.8)), color=(0.90, 0.90, 0.85), intensity=0.95),
    "boat": dict(kind="box", size=((3.0, 5.0), (1.4, 2.0), (0.8, 1.2)), color=(0.90, 0.55, 0.10), intensity=0.35, on_water=True),
}
_COLOR_NOISE = 0.04
_INTENSITY_NOISE = 0.04
SCENE_CHANNELS = ("r", "g", "b", "intensity")
_SENSOR_NOISE = 0.02


def _box_area(sx, sy, h):
    return sx * sy + 2.0 * (sx + sy) * h


def _ellipsoid_area(a, b, c):
    p = 1.6075
    return 4 * math.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3.0) ** (1.0 / p)


def _sample_box(rng, n, x0, y0, z0, sx, sy, h):
    faces = np.array([sx * sy, sx * h, sx * h, sy * h, sy * h])
    face = rng.choice(5, size=n, p=faces / faces.sum())
    u, v = rng.random(n), rng.random(n)
    pts = np.empty((n, 3))
    top = face == 0
    pts[top] = np.stack([x0 + u[top] * sx, y0 + v[top] * sy, np.full(top.sum(), z0 + h)], 1)
    for f, y in ((1, y0), (2, y0 + sy)):
        m = face == f
        pts[m] = np.stack([x0 + u[m] * sx, np.full(m.sum(), y), z0 + v[m] * h], 1)
    for f, x in ((3, x0), (4, x0 + sx)):
        m = face == f
        pts[m] = np.stack([np.full(m.sum(), x), y0 + u[m] * sy, z0 + v[m] * h], 1)
    return pts


def _overlaps(rect, others, pad=0.5):
    x0, y0, x1, y1 = rect
    for a0, b0, a1, b1 in others:
        if x0 < a1 + pad and a0 < x1 + pad and y0 < b1 + pad and b0 < y1 + pad:
            return True
    return False


def _inside_any(xy, rects):
    m = np.zeros(xy.shape[0], bool)
    for x0, y0, x1, y1 in rects:
        m |= (xy[:, 0] >= x0) & (xy[:, 0] <= x1) & (xy[:, 1] >= y0) & (xy[:, 1] <= y1)
    return m


def _place(rng, ex, ey, sx, sy, taken, tries=200):
    rect = None
    for _ in range(tries):
        x0 = rng.uniform(0.0, max(ex - sx, 1e-6))
        y0 = rng.uniform(0.0, max(ey - sy, 1e-6))
        rect = (x0, y0, x0 + sx, y0 + sy)
        if not _overlaps(rect, taken):
            break
    return rect


def _npoints(item: LayoutItem, density: float, area: float) -> int:
    if item.points is not None:
        return int(item.points)
    return max(int(round(density * area)), 1)


def generate_scene(spec: SceneSpec, hierarchy=None, channels: Sequence[str] = DEFAULT_SCHEMA) -> PointCloud:
    """Build a synthetic labelled scene from primitive presets.

    Point counts are fixed per instance (density x exposed area, rounded)
    unless a layout item overrides them.  Every point carries the subclass
    label of the primitive that produced it.
    """
    from .hierarchy import default_hierarchy

    h = hierarchy if hierarchy is not None else default_hierarchy()
    for item in spec.class_layout:
        if item.subclass not in h.nodes or item.base not in h.nodes:
            raise HierarchyError(f"layout label {item.subclass}/{item.base} not in hierarchy")
        if h.merge_to_base(item.subclass) != item.base:
            raise HierarchyError(f"label {item.subclass} does not merge to base {item.base}")
        if item.primitive not in PRESETS:
            raise ParameterError(f"unknown primitive {item.primitive!r}")
    ex, ey, _ = (float(v) for v in spec.extent)
    taken: list = []
    flat_cover: list = []  # footprints that replace the ground surface
    water: list = []
    chunks: dict = {}
    planes = []
    # strips and patches first so solid objects avoid them
    order = sorted(range(len(spec.class_layout)),
                   key=lambda i: {"strip": 0, "patch": 1}.get(PRESETS[spec.class_layout[i].primitive]["kind"], 2))
    for idx in order:
        item = spec.class_layout[idx]
        pre = PRESETS[item.primitive]
        rng = np.random.default_rng([spec.seed, idx])
        out = []
        for _ in range(item.count):
            kind = pre["kind"]
            if kind == "plane":
                planes.append(idx)
                break
            if kind in ("strip", "patch"):
                if kind == "strip":
                    w = rng.uniform(*pre["width"])
                    c = rng.uniform(w, max(min(ex, ey) - w, w + 1e-6))
                    rect = (0.0, c - w / 2, ex, c + w / 2) if rng.random() < 0.5 else (c - w / 2, 0.0, c + w / 2, ey)
                else:
                    s = rng.uniform(*pre["size"]), rng.uniform(*pre["size"])
                    rect = _place(rng, ex, ey, s[0], s[1], taken)
                    taken.append(rect)
                area = (rect[2] - rect[0]) * (rect[3] - rect[1])
                n = _npoints(item, spec.density, area)
                xy = np.stack([rng.uniform(rect[0], rect[2], n), rng.uniform(rect[1], rect[3], n)], 1)
                z = pre["z"] + rng.normal(0.0, pre["rough"], n)
                out.append(np.column_stack([xy, z]))
                flat_cover.append(rect)
                if pre["z"] < 0:
                    water.append((rect, pre["z"]))
                if kind == "strip":
                    taken.append(rect)
            elif kind == "box":
                (a0, a1), (b0, b1), (c0, c1) = pre["size"]
                sx, sy, hgt = rng.uniform(a0, a1), rng.uniform(b0, b1), rng.uniform(c0, c1)
                if rng.random() < 0.5:
                    sx, sy = sy, sx
                z0 = 0.0
                if pre.get("on_water") and water:
                    (wr, wz) = water[int(rng.integers(len(water)))]
                    x0 = rng.uniform(wr[0], max(wr[2] - sx, wr[0] + 1e-6))
                    y0 = rng.uniform(wr[1], max(wr[3] - sy, wr[1] + 1e-6))
                    rect, z0 = (x0, y0, x0 + sx, y0 + sy), wz
                else:
                    rect = _place(rng, ex, ey, sx, sy, taken)
                    taken.append(rect)
                    flat_cover.append(rect)
                n = _npoints(item, spec.density, _box_area(sx, sy, hgt))
                out.append(_sample_box(rng, n, rect[0], rect[1], z0, sx, sy, hgt))
            elif kind == "ellipsoid":
                (r0, r1), (q0, q1) = pre["radius"]
                a, b, c = rng.uniform(r0, r1), rng.uniform(r0, r1), rng.uniform(q0, q1)
                cz = rng.uniform(*pre["center_z"]) if pre["center_z"] else c
                rect = _place(rng, ex, ey, 2 * a, 2 * b, taken)
                taken.append(rect)
                n = _npoints(item, spec.density, _ellipsoid_area(a, b, c))
                d = rng.normal(size=(n, 3))
                d /= np.linalg.norm(d, axis=1, keepdims=True)
                ctr = np.array([rect[0] + a, rect[1] + b, cz])
                pts = ctr + d * np.array([a, b, c])
                if cz - c < 0:
                    pts[:, 2] = np.maximum(pts[:, 2], 0.0)
                out.append(pts)
        chunks[idx] = out
    for idx in planes:
        item = spec.class_layout[idx]
        pre = PRESETS[item.primitive]
        rng = np.random.default_rng([spec.seed, idx])
        n = _npoints(item, spec.density, ex * ey)
        got, have = [], 0
        for _ in range(64):
            if have >= n:
                break
            cand = np.stack([rng.uniform(0, ex, 2 * n), rng.uniform(0, ey, 2 * n)], 1)
            cand = cand[~_inside_any(cand, flat_cover)]
            got.append(cand[: n - have])
            have += got[-1].shape[0]
        else:
            if have < n:
                raise ParameterError("flat cover leaves no room for the ground plane")
        xy = np.concatenate(got)[:n]
        z = pre["z"] + rng.normal(0.0, pre["rough"], n)
        chunks[idx] = [np.column_stack([xy, z])]
    pos_list, lab_list, col_list = [], [], []
    for idx, item in enumerate(spec.class_layout):
        pre = PRESETS[item.primitive]
        rng = np.random.default_rng([spec.seed, idx, 7])
        for pts in chunks.get(idx, []):
            pts = pts + rng.normal(0.0, _SENSOR_NOISE, pts.shape)
            pos_list.append(pts)
            lab_list.append(np.full(pts.shape[0], item.subclass, np.uint16))
            col = np.clip(np.asarray(pre["color"]) + rng.normal(0.0, _COLOR_NOISE, pts.shape), 0.0, 1.0)
            inten = np.clip(pre["intensity"] + rng.normal(0.0, _INTENSITY_NOISE, (pts.shape[0], 1)), 0.0, 1.0)
            col_list.append(np.hstack([col, inten]))
    channels = tuple(channels)
    bad = [c for c in channels if c not in SCENE_CHANNELS]
    if bad:
        raise SchemaError(f"scene generator cannot produce channels {bad}")
    if not pos_list:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, len(channels))), np.zeros(0, np.uint16), 0, channels)
    pos = np.concatenate(pos_list)
    labels = np.concatenate(lab_list)
    feats = np.concatenate(col_list)[:, [SCENE_CHANNELS.index(c) for c in channels]]
    return PointCloud(pos, feats, labels, 0, channels)
