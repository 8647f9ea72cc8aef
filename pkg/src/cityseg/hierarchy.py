"""Label tree, text-embedding provider and the tree message-passing encoder."""
from __future__ import annotations

import hashlib
import struct
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import EmbeddingLookupError, FormatError, HierarchyError, ShapeError

ROOT_PARENT = -1


@dataclass(frozen=True)
class HierarchyNode:
    id: int
    text: str
    level: int
    parent_id: int
    child_ids: tuple = ()
    dataset_tags: frozenset = frozenset()


class LabelHierarchy:
    """Immutable rooted label tree.  Node ids double as stored label ids."""

    def __init__(self, nodes: Mapping[int, HierarchyNode], root_id: int):
        self._nodes = MappingProxyType(dict(nodes))
        self.root_id = root_id
        self.depth = max(n.level for n in self._nodes.values())

    # -- construction ----------------------------------------------------
    @classmethod
    def from_records(cls, records: Sequence[tuple]) -> "LabelHierarchy":
        """Validate ``(id, parent_id, text[, tags])`` records into a tree."""
        parent: dict = {}
        text: dict = {}
        tags: dict = {}
        for rec in records:
            nid, pid, txt = int(rec[0]), int(rec[1]), str(rec[2])
            if nid in parent:
                if parent[nid] != pid:
                    raise HierarchyError(f"node {nid} has multiple parents ({parent[nid]}, {pid})")
                raise HierarchyError(f"duplicate node id {nid}")
            if nid < 0 or nid > 0xFFFF:
                raise HierarchyError(f"node id {nid} does not fit a u16 label")
            parent[nid] = pid
            text[nid] = txt
            tags[nid] = frozenset(int(t) for t in (rec[3] if len(rec) > 3 else ()))
        roots = [n for n, p in parent.items() if p == ROOT_PARENT]
        if len(roots) != 1:
            raise HierarchyError(f"expected exactly one root, found {sorted(roots)}")
        for n, p in parent.items():
            if p != ROOT_PARENT and p not in parent:
                raise HierarchyError(f"node {n} is an orphan: parent {p} does not exist")
            if p == n:
                raise HierarchyError(f"node {n} is its own parent (cycle)")
        children: dict = {n: [] for n in parent}
        for n, p in sorted(parent.items()):
            if p != ROOT_PARENT:
                children[p].append(n)
        root = roots[0]
        level = {root: 0}
        queue = deque([root])
        while queue:
            v = queue.popleft()
            for c in children[v]:
                level[c] = level[v] + 1
                queue.append(c)
        unreached = sorted(set(parent) - set(level))
        if unreached:
            raise HierarchyError(f"node {unreached[0]} is on a cycle (unreachable from root)")
        nodes = {
            n: HierarchyNode(n, text[n], level[n], parent[n], tuple(children[n]), tags[n])
            for n in parent
        }
        return cls(nodes, root)

    # -- queries ---------------------------------------------------------
    @property
    def nodes(self) -> Mapping[int, HierarchyNode]:
        return self._nodes

    def __getitem__(self, nid: int) -> HierarchyNode:
        try:
            return self._nodes[nid]
        except KeyError:
            raise HierarchyError(f"unknown node {nid}") from None

    def __len__(self) -> int:
        return len(self._nodes)

    def ids(self) -> list:
        return sorted(self._nodes)

    def label_ids(self) -> list:
        """All non-root node ids, ascending."""
        return [n for n in sorted(self._nodes) if n != self.root_id]

    def base_classes(self) -> list:
        return [n for n in sorted(self._nodes) if self._nodes[n].level == 1]

    def leaves(self) -> list:
        return [n for n in self.label_ids() if not self._nodes[n].child_ids]

    def path(self, nid: int) -> list:
        """Node ids from the root down to ``nid``."""
        out = [nid]
        while self[out[-1]].parent_id != ROOT_PARENT:
            out.append(self[out[-1]].parent_id)
        return out[::-1]

    def neighbors(self, nid: int) -> list:
        node = self[nid]
        nb = [node.parent_id] if node.parent_id != ROOT_PARENT else []
        return nb + list(node.child_ids)

    def hops(self, a: int, b: int) -> int:
        pa, pb = self.path(a), self.path(b)
        k = 0
        while k < min(len(pa), len(pb)) and pa[k] == pb[k]:
            k += 1
        return (len(pa) - k) + (len(pb) - k)

    def siblings(self, nid: int) -> list:
        node = self[nid]
        if nid == self.root_id:
            raise HierarchyError("the root has no siblings")
        return [c for c in self[node.parent_id].child_ids if c != nid]

    def merge_to_base(self, nid: int) -> int:
        if self[nid].level == 0:
            raise HierarchyError("the root cannot be merged to a base class")
        return self.path(nid)[1]

    def nodes_for_domain(self, domain_id: int) -> list:
        return [n for n in self.label_ids() if domain_id in self._nodes[n].dataset_tags]

    def annotate(self, leaf_labels: np.ndarray, active: Sequence[int]) -> np.ndarray:
        """Map each label to its nearest ancestor-or-self inside ``active``."""
        active = set(active)
        leaf_labels = np.asarray(leaf_labels)
        lut = np.zeros(max(self._nodes) + 1, dtype=np.uint16)
        for n in np.unique(leaf_labels):
            n = int(n)
            hit = [a for a in self.path(n) if a in active]
            if not hit:
                raise HierarchyError(f"label {n} has no ancestor in the active set")
            lut[n] = hit[-1]
        return lut[leaf_labels.astype(np.int64)]

    # -- edits -----------------------------------------------------------
    def insert_leaf(self, parent_id: int, text: str, tags: Sequence[int] = ()) -> tuple:
        """Return ``(new_hierarchy, new_id)`` with a fresh leaf under ``parent_id``."""
        if parent_id not in self._nodes:
            raise HierarchyError(f"unknown parent {parent_id}")
        new_id = max(self._nodes) + 1
        records = [(n.id, n.parent_id, n.text, n.dataset_tags) for n in self._nodes.values()]
        records.append((new_id, parent_id, text, tuple(tags)))
        return LabelHierarchy.from_records(records), new_id

    def with_tags(self, domain_id: int, node_ids: Sequence[int]) -> "LabelHierarchy":
        nodes = dict(self._nodes)
        for n in node_ids:
            nodes[n] = replace(self[n], dataset_tags=self[n].dataset_tags | {domain_id})
        return LabelHierarchy(nodes, self.root_id)

    # -- serialisation ---------------------------------------------------
    def to_text(self) -> str:
        lines = ["# id\tparent_id\tlevel\ttext[\tdomain tags]"]
        for n in sorted(self._nodes):
            node = self._nodes[n]
            row = f"{node.id}\t{node.parent_id}\t{node.level}\t{node.text}"
            if node.dataset_tags:
                row += "\t" + ",".join(str(t) for t in sorted(node.dataset_tags))
            lines.append(row)
        return "\n".join(lines) + "\n"


def parse_hierarchy(text: str) -> LabelHierarchy:
    records = []
    declared = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (4, 5):
            raise FormatError(f"line {lineno}: expected id, parent_id, level, text[, tags]")
        try:
            nid, pid, lvl = int(parts[0]), int(parts[1]), int(parts[2])
        except ValueError:
            raise FormatError(f"line {lineno}: id, parent_id and level must be integers") from None
        tags = tuple(int(t) for t in parts[4].split(",") if t.strip()) if len(parts) == 5 else ()
        records.append((nid, pid, parts[3], tags))
        declared.setdefault(nid, lvl)
    h = LabelHierarchy.from_records(records)
    for nid, lvl in declared.items():
        if h[nid].level != lvl:
            raise HierarchyError(f"node {nid} declares level {lvl} but sits at depth {h[nid].level}")
    return h


def build_hierarchy(path) -> LabelHierarchy:
    return parse_hierarchy(Path(path).read_text(encoding="utf-8"))


# 5 base classes, 10 subclasses.  Domain tags: 0 = colour/fine, 1 = lidar/mixed,
# 2 = colour/base-only.
DEFAULT_HIERARCHY_TEXT = """\
0\t-1\t0\troot
1\t0\t1\tground\t1,2
2\t0\t1\tvegetation\t2
3\t0\t1\tbuilding\t2
4\t0\t1\twater\t1,2
5\t0\t1\tobject\t2
6\t1\t2\tterrain\t0
7\t1\t2\troad\t0
8\t2\t2\ttree\t0,1
9\t2\t2\tshrub\t0,1
10\t3\t2\tresidential building\t0,1
11\t3\t2\thigh-rise building\t0,1
12\t4\t2\triver\t0
13\t4\t2\tpond\t0
14\t5\t2\tcar\t0,1
15\t5\t2\ttruck\t0,1
"""


def default_hierarchy() -> LabelHierarchy:
    return parse_hierarchy(DEFAULT_HIERARCHY_TEXT)


# ---------------------------------------------------------------- text embeddings

CSEM_MAGIC = b"CSEM"
CSEM_VERSION = 1


def write_csem(path, table: Mapping[str, np.ndarray]) -> None:
    items = list(table.items())
    C = len(items[0][1]) if items else 0
    parts = [CSEM_MAGIC, struct.pack("<II", CSEM_VERSION, C)]
    for text, vec in items:
        raw = text.encode("utf-8")
        vec = np.asarray(vec, dtype="<f4")
        if vec.shape != (C,):
            raise ShapeError(f"embedding for {text!r} has shape {vec.shape}, expected ({C},)")
        parts += [struct.pack("<I", len(raw)), raw, vec.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def read_csem(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:4] != CSEM_MAGIC or len(buf) < 12:
        raise FormatError("not a CSEM embedding table")
    version, C = struct.unpack_from("<II", buf, 4)
    if version != CSEM_VERSION:
        raise FormatError(f"unsupported CSEM version {version}")
    off, table = 12, {}
    while off < len(buf):
        if off + 4 > len(buf):
            raise FormatError(f"truncated CSEM record at offset {off}")
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        if off + n + 4 * C > len(buf):
            raise FormatError(f"truncated CSEM record at offset {off}")
        text = buf[off: off + n].decode("utf-8")
        off += n
        table[text] = np.frombuffer(buf, dtype="<f4", count=C, offset=off).astype(np.float64)
        off += 4 * C
    return table


@dataclass
class EmbeddingProvider:
    """Frozen text-embedding source: a CSEM table or a seeded text hash."""

    mode: str = "hashed"
    dim: int = 32
    seed: int = 0
    path: Optional[str] = None
    _table: Optional[dict] = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("hashed", "file"):
            raise ValueError(f"unknown embedding mode {self.mode!r}")
        if self.mode == "file":
            self._table = read_csem(self.path)
            if self._table:
                self.dim = len(next(iter(self._table.values())))

    def embed(self, text: str) -> np.ndarray:
        if self.mode == "file":
            if text not in self._table:
                raise EmbeddingLookupError(f"no embedding for label text {text!r}")
            v = self._table[text].copy()
        else:
            digest = hashlib.sha256(f"{self.seed}\x00{text}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)


@dataclass(frozen=True)
class TextEmbeddings:
    ids: tuple
    vectors: np.ndarray  # len(ids) x C, unit rows

    def row(self, nid: int) -> np.ndarray:
        return self.vectors[self.ids.index(nid)]

    def rows(self, nids: Sequence[int]) -> np.ndarray:
        pos = {n: i for i, n in enumerate(self.ids)}
        return self.vectors[[pos[n] for n in nids]]


@dataclass(frozen=True)
class HierarchicalEmbeddings(TextEmbeddings):
    L: int = 0


def embed_labels(h: LabelHierarchy, provider: EmbeddingProvider) -> TextEmbeddings:
    ids = tuple(h.label_ids())
    vecs = np.array([provider.embed(h[n].text) for n in ids]).reshape(len(ids), provider.dim)
    return TextEmbeddings(ids, vecs)


# ---------------------------------------------------------------- graph encoder

def init_graph_params(C: int, L: int, rng: np.random.Generator) -> dict:
    params = {"ge.root": rng.standard_normal(C) / np.sqrt(C)}
    eye = np.eye(C)
    for l in range(1, L + 1):
        params[f"ge.W{l}"] = np.vstack([eye, eye]) + rng.normal(0.0, 0.1 / np.sqrt(C), (2 * C, C))
        params[f"ge.b{l}"] = np.zeros(C)
    return params


def graph_layers(params: Mapping[str, np.ndarray]) -> int:
    return sum(1 for k in params if k.startswith("ge.W"))


def _nb_mean(H, nbrs):
    if not nbrs:
        return np.zeros_like(H[0])
    s = H[nbrs[0]].copy()
    for u in nbrs[1:]:
        s += H[u]
    return s / len(nbrs)


def graph_encode(h: LabelHierarchy, E_t: TextEmbeddings, params: Mapping[str, np.ndarray],
                 L: Optional[int] = None, cache: Optional[dict] = None) -> HierarchicalEmbeddings:
    """Mean-aggregation message passing over undirected tree edges.

    Each node row is computed on its own (vector-matrix products, fixed
    neighbour order), so rows far from an edit are bitwise stable.
    """
    if L is None:
        L = graph_layers(params)
    if L == 0:
        return HierarchicalEmbeddings(E_t.ids, E_t.vectors.copy(), 0)
    C = E_t.vectors.shape[1]
    if params["ge.root"].shape != (C,):
        raise ShapeError(f"graph encoder width {params['ge.root'].shape[0]} != text width {C}")
    order = h.ids()
    pos = {n: i for i, n in enumerate(order)}
    nbrs = [[pos[u] for u in h.neighbors(n)] for n in order]
    H = np.empty((len(order), C))
    epos = {n: i for i, n in enumerate(E_t.ids)}
    for n in order:
        H[pos[n]] = params["ge.root"] if n == h.root_id else E_t.vectors[epos[n]]
    layers = [H]
    mids = []
    for l in range(1, L + 1):
        W, b = params[f"ge.W{l}"], params[f"ge.b{l}"]
        M = np.empty_like(H)
        Hn = np.empty_like(H)
        for i in range(len(order)):
            M[i] = _nb_mean(H, nbrs[i])
            Hn[i] = np.tanh(np.concatenate([H[i], M[i]]) @ W + b)
        mids.append(M)
        layers.append(Hn)
        H = Hn
    ids = tuple(n for n in order if n != h.root_id)
    rows = np.array([pos[n] for n in ids], dtype=np.int64)
    out = H[rows]
    norms = np.sqrt((out * out).sum(1, keepdims=True))
    if cache is not None:
        cache.update(order=order, nbrs=nbrs, layers=layers, mids=mids, rows=rows,
                     norms=norms, out=out / norms, epos=epos, root=h.root_id, L=L)
    return HierarchicalEmbeddings(ids, out / norms, L)


def graph_encode_backward(cache: dict, d_out: np.ndarray, params: Mapping[str, np.ndarray],
                          grads: dict) -> np.ndarray:
    """Accumulate parameter grads; return the gradient w.r.t. the text embeddings."""
    L = cache["L"]
    layers, mids, nbrs = cache["layers"], cache["mids"], cache["nbrs"]
    y, norms = cache["out"], cache["norms"]
    dH = np.zeros_like(layers[-1])
    dH[cache["rows"]] = (d_out - y * (y * d_out).sum(1, keepdims=True)) / norms
    C = dH.shape[1]
    for l in range(L, 0, -1):
        W = params[f"ge.W{l}"]
        Hp, Hl, M = layers[l - 1], layers[l], mids[l - 1]
        dz = dH * (1.0 - Hl * Hl)
        X = np.concatenate([Hp, M], axis=1)
        grads[f"ge.W{l}"] = grads.get(f"ge.W{l}", 0) + X.T @ dz
        grads[f"ge.b{l}"] = grads.get(f"ge.b{l}", 0) + dz.sum(0)
        dX = dz @ W.T
        dprev = dX[:, :C].copy()
        dM = dX[:, C:]
        for i, nb in enumerate(nbrs):
            if nb:
                share = dM[i] / len(nb)
                for u in nb:
                    dprev[u] += share
        dH = dprev
    root_row = cache["order"].index(cache["root"])
    grads["ge.root"] = grads.get("ge.root", 0) + dH[root_row]
    d_text = np.zeros((len(cache["epos"]), C))
    for n, i in cache["epos"].items():
        d_text[i] = dH[cache["order"].index(n)]
    return d_text
