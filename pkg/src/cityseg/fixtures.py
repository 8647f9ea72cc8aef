"""Synthetic multi-domain datasets built from the scene generator.

A domain is a sensor style (which attribute channels it records, a colour
tint) plus the node set its annotators use.  Every cloud is widened to the
shared ``r, g, b, intensity`` schema with absent channels zero-filled.  Scenes are generated with leaf labels and then
re-annotated at the domain's granularity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .hierarchy import LabelHierarchy, default_hierarchy, parse_hierarchy
from .pcio import (PRESETS, SCENE_CHANNELS, LayoutItem, PointCloud, SceneSpec, fill_missing_attributes,
                   generate_scene)

BOAT_PARENT = 4  # water


@dataclass(frozen=True)
class DomainStyle:
    domain_id: int
    channels: tuple = ("r", "g", "b")
    tint: tuple = (0.0, 0.0, 0.0)
    density: float = 2.5
    ground_fraction: float = 0.4
    extent: tuple = (32.0, 32.0, 24.0)
    with_boats: bool = False
    same_building_color: bool = False
    zoned: bool = False


DEFAULT_STYLES = (
    DomainStyle(0),
    DomainStyle(1, channels=("intensity",)),
    DomainStyle(2, tint=(0.04, -0.03, 0.02)),
)


def scene_layout(seed: int, with_boats: bool = False, ground_points: Optional[int] = None,
                 zoned: bool = False) -> tuple:
    """Random street block.  Every leaf class is present unless ``zoned``.

    ``ground_points`` thins the bare-terrain surface, which otherwise
    outnumbers every other class several times over.  A zoned block is either
    residential (low buildings only) or downtown (high-rises only).
    """
    rng = np.random.default_rng([seed, 1234])
    water = "river" if rng.random() < 0.5 else "pond"
    items = [
        LayoutItem(1, 6, "ground_plane", points=ground_points),
        LayoutItem(1, 7, "road_strip"),
        LayoutItem(4, 12 if water == "river" else 13, water),
        LayoutItem(4, 13 if water == "river" else 12, "pond" if water == "river" else "river"),
        LayoutItem(3, 10, "low_building", int(rng.integers(1, 3))),
        LayoutItem(3, 11, "tall_building", 1),
        LayoutItem(2, 8, "tree", int(rng.integers(2, 4))),
        LayoutItem(2, 9, "shrub", int(rng.integers(4, 7))),
        LayoutItem(5, 14, "car", int(rng.integers(1, 3))),
        LayoutItem(5, 15, "truck", 1),
    ]
    if zoned:
        downtown = rng.random() < 0.5
        items[4] = LayoutItem(3, 10, "low_building", 0 if downtown else int(rng.integers(2, 4)))
        items[5] = LayoutItem(3, 11, "tall_building", int(rng.integers(1, 3)) if downtown else 0)
    if with_boats:
        items.append(LayoutItem(BOAT_PARENT, 16, "boat", int(rng.integers(1, 3))))
    return tuple(items)


def boat_hierarchy(h: Optional[LabelHierarchy] = None) -> LabelHierarchy:
    """The default tree plus a ``boat`` leaf under water (id 16), used only for scene generation."""
    h = h or default_hierarchy()
    return h.insert_leaf(BOAT_PARENT, "boat")[0]


def _attrs(preset: str) -> tuple:
    return (*PRESETS[preset]["color"], PRESETS[preset]["intensity"])


def make_scene(style: DomainStyle, seed: int, hierarchy: Optional[LabelHierarchy] = None) -> PointCloud:
    """Leaf-labelled scene in the style's sensor modality (labels not yet re-annotated)."""
    gen_h = boat_hierarchy(hierarchy) if style.with_boats else (hierarchy or default_hierarchy())
    ground = int(round(style.ground_fraction * style.density * style.extent[0] * style.extent[1]))
    spec = SceneSpec(style.extent, style.density, scene_layout(seed, style.with_boats, ground, style.zoned), seed)
    cloud = generate_scene(spec, gen_h, channels=SCENE_CHANNELS)
    feats = cloud.features
    if style.same_building_color:
        shift = [a - b for a, b in zip(_attrs("low_building"), _attrs("tall_building"))]
        feats = feats.copy()
        feats[cloud.labels == 11] += np.asarray(shift, np.float32)
    rgb = feats[:, :3] + np.asarray(style.tint, np.float32)
    feats = np.hstack([np.clip(rgb, 0.0, 1.0), feats[:, 3:]])
    keep = [SCENE_CHANNELS.index(c) for c in style.channels]
    raw = PointCloud(cloud.positions, feats[:, keep], cloud.labels, style.domain_id, tuple(style.channels))
    return fill_missing_attributes(raw, SCENE_CHANNELS)


def annotate_cloud(cloud: PointCloud, hierarchy: LabelHierarchy, active: Sequence[int]) -> PointCloud:
    return cloud.with_labels(hierarchy.annotate(cloud.labels, active))


def make_domain(style: DomainStyle, seeds: Sequence[int], hierarchy: LabelHierarchy,
                annotate: bool = True) -> list:
    """Scenes for one domain, labelled at the nodes tagged for that domain."""
    out = []
    for s in seeds:
        cloud = make_scene(style, int(s), hierarchy)
        if annotate:
            cloud = annotate_cloud(cloud, hierarchy, hierarchy.nodes_for_domain(style.domain_id))
        out.append(cloud)
    return out


@dataclass
class ToyDataset:
    hierarchy: LabelHierarchy
    train: list  # annotated clouds, all domains
    test_fine: list  # held-out leaf-labelled clouds, domain 0 style
    styles: tuple = DEFAULT_STYLES
    test_by_domain: dict = field(default_factory=dict)  # domain -> leaf-labelled held-out clouds

    @property
    def n_points(self) -> int:
        return sum(c.N for c in self.train)


def toy_dataset(scenes_per_domain: int = 13, test_scenes: int = 3, seed: int = 0,
                styles: Sequence[DomainStyle] = DEFAULT_STYLES,
                hierarchy: Optional[LabelHierarchy] = None) -> ToyDataset:
    """Three-domain, five-base / ten-leaf fixture with held-out scenes per domain."""
    h = hierarchy or default_hierarchy()
    train, tests = [], {}
    for k, st in enumerate(styles):
        base = seed * 100_000 + k * 1000
        train += make_domain(st, range(base, base + scenes_per_domain), h)
        tests[st.domain_id] = make_domain(st, range(base + 500, base + 500 + test_scenes), h, annotate=False)
    return ToyDataset(h, train, tests[styles[0].domain_id], tuple(styles), tests)


# ---------------------------------------------------------------- granularity-conflict fixture

CONFLICT_COARSE = (1, 5, 8, 9, 10, 11, 12, 13)  # ground and object only at base level
CONFLICT_FINE = (6, 7, 8, 9, 10, 11, 12, 13, 14, 15)


def conflict_hierarchy() -> LabelHierarchy:
    """Default tree re-tagged: domain 0 coarse on ground/object, domain 1 fully fine."""
    h = default_hierarchy()
    lines = []
    for nid in h.ids():
        n = h[nid]
        tags = [d for d, ids in ((0, CONFLICT_COARSE), (1, CONFLICT_FINE)) if nid in ids]
        row = f"{nid}\t{n.parent_id}\t{n.level}\t{n.text}"
        if nid != h.root_id:
            row += "\t" + ",".join(str(t) for t in tags)
        lines.append(row)
    return parse_hierarchy("\n".join(lines) + "\n")


def flat_hierarchy(h: LabelHierarchy, domains: Sequence[int]) -> tuple:
    """Naive text merge: every label text any domain uses becomes a root child.

    Returns ``(flat tree, map from original node id to flat id)``.
    """
    used = sorted({n for d in domains for n in h.nodes_for_domain(d)})
    texts = sorted({h[n].text for n in used})
    fid = {t: i + 1 for i, t in enumerate(texts)}
    tags = ",".join(str(d) for d in domains)
    lines = ["0\t-1\t0\troot"] + [f"{fid[t]}\t0\t1\t{t}\t{tags}" for t in texts]
    mapping = {n: fid[h[n].text] for n in used}
    return parse_hierarchy("\n".join(lines) + "\n"), mapping


def relabel(cloud: PointCloud, mapping: dict) -> PointCloud:
    lut = np.zeros(max(mapping) + 1, np.uint16)
    for k, v in mapping.items():
        lut[k] = v
    return cloud.with_labels(lut[cloud.labels])


@dataclass
class ConflictDataset:
    hierarchy: LabelHierarchy
    train: list
    test: list  # leaf-labelled held-out clouds in the fine domain's style


def conflict_dataset(scenes_per_domain: int = 10, test_scenes: int = 3, seed: int = 0,
                     channels: tuple = ("r", "g", "b")) -> ConflictDataset:
    """Two same-style domains that annotate ground and object at different depths.

    Low and high-rise buildings share one colour and blocks are zoned, so a
    wall point's class follows from what else stands in the block rather than
    from the point's own attributes.
    """
    h = conflict_hierarchy()
    train = []
    for d in (0, 1):
        st = DomainStyle(d, channels=channels, same_building_color=True, zoned=True)
        base = seed * 100_000 + 7000 + d * 1000
        train += make_domain(st, range(base, base + scenes_per_domain), h)
    st = DomainStyle(1, channels=channels, same_building_color=True, zoned=True)
    base = seed * 100_000 + 9000
    test = make_domain(st, range(base, base + test_scenes), h, annotate=False)
    return ConflictDataset(h, train, test)


# ---------------------------------------------------------------- unseen-class domain

NEW_DOMAIN = 3


def boat_domain(scenes: int = 6, test_scenes: int = 3, seed: int = 0,
                channels: tuple = ("r", "g", "b")) -> tuple:
    """Leaf-labelled scenes of a new colour domain that also contains boats (id 16).

    Returns ``(train clouds, held-out clouds)``; both keep the boat label, so
    callers insert the ``boat`` leaf before using them.
    """
    st = DomainStyle(NEW_DOMAIN, channels=channels, tint=(-0.03, 0.02, 0.03), with_boats=True)
    base = seed * 100_000 + 20_000
    train = [make_scene(st, s) for s in range(base, base + scenes)]
    test = [make_scene(st, s) for s in range(base + 500, base + 500 + test_scenes)]
    return train, test
