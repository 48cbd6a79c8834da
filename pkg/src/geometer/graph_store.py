"""Attributed-graph snapshots, the on-disk dataset format, and class-incremental
session streams built from a static labeled graph.

Dataset directory layout:
  features.bin  magic b"GFSC", u32 node count N, u32 feature dim d,
                then N*d little-endian float32 values, row-major
  edges.tsv     one edge per line, two tab-separated node indices; directed
                duplicates (a,b)/(b,a) are merged on load, exact repeats are
                an error
  labels.tsv    one line per node: index TAB class-id, -1 meaning unlabeled

Split manifest: JSON with keys base_classes, sessions[].novel_classes,
sessions[].supports, k_shot, seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

UNLABELED = -1
_FEATURES_MAGIC = b"GFSC"

__all__ = [
    "UNLABELED", "Graph", "ClassPartition", "SessionSpec", "SessionStream",
    "GraphStoreError", "DatasetFileMissingError", "DatasetFormatError",
    "DuplicateEdgeError", "SelfLoopError", "NodeIdError",
    "ClassOverlapError", "UnknownClassError", "InsufficientLabelsError", "ManifestError",
    "make_graph", "load_graph", "save_dataset", "induced_subgraph",
    "degree_of", "neighbors_of", "build_session_stream",
    "save_manifest", "load_session_stream", "graphs_equal", "streams_equal",
]


class GraphStoreError(Exception):
    """Base class for dataset and split failures."""


class DatasetFileMissingError(GraphStoreError):
    pass


class DatasetFormatError(GraphStoreError):
    pass


class DuplicateEdgeError(GraphStoreError):
    pass


class SelfLoopError(GraphStoreError):
    pass


class NodeIdError(GraphStoreError):
    pass


class ClassOverlapError(GraphStoreError):
    pass


class UnknownClassError(GraphStoreError):
    pass


class InsufficientLabelsError(GraphStoreError):
    pass


class ManifestError(GraphStoreError):
    pass


class Graph:
    """Immutable attributed graph snapshot.

    Node rows are 0..node_count-1; ``node_ids`` maps each row to a stable
    external identifier that survives subgraph extraction.  Edges are stored
    once per unordered pair over row indices, with no self-loops.
    """

    __slots__ = ("node_ids", "features", "labels", "edges",
                 "_indptr", "_indices", "_degrees", "_id_to_row", "_feat_csr", "_op_cache")

    def __init__(self, node_ids, features, labels, edges):
        self.node_ids = node_ids
        self.features = features
        self.labels = labels
        self.edges = edges
        n = features.shape[0]
        if len(edges):
            src = np.concatenate([edges[:, 0], edges[:, 1]])
            dst = np.concatenate([edges[:, 1], edges[:, 0]])
            order = np.lexsort((dst, src))
            self._indices = dst[order]
            counts = np.bincount(src, minlength=n)
        else:
            self._indices = np.empty(0, dtype=np.int64)
            counts = np.zeros(n, dtype=np.int64)
        self._indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self._degrees = counts.astype(np.int64)
        self._id_to_row = {int(v): i for i, v in enumerate(node_ids)}
        self._feat_csr = None
        self._op_cache = {}    # lazy derived structures (e.g. attention neighborhoods)
        for arr in (self.node_ids, self.features, self.labels, self.edges):
            arr.setflags(write=False)

    @property
    def node_count(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def row_of(self, node_id: int) -> int:
        try:
            return self._id_to_row[int(node_id)]
        except KeyError:
            raise NodeIdError(f"unknown node id {node_id}") from None

    def rows_of(self, node_ids) -> np.ndarray:
        return np.fromiter((self.row_of(v) for v in node_ids), dtype=np.int64,
                           count=len(node_ids))

    def neighbor_rows(self, row: int) -> np.ndarray:
        return self._indices[self._indptr[row]:self._indptr[row + 1]]

    def degrees(self) -> np.ndarray:
        return self._degrees

    def labeled_ids(self, class_id: int) -> np.ndarray:
        """Node ids carrying the given label, ascending."""
        rows = np.nonzero(self.labels == class_id)[0]
        return np.sort(self.node_ids[rows])

    def present_classes(self) -> np.ndarray:
        return np.unique(self.labels[self.labels != UNLABELED])

    def features_sparse(self):
        """CSR view of the feature matrix, built once; None if too dense to pay off."""
        if self._feat_csr is None:
            from scipy import sparse
            density = np.count_nonzero(self.features) / max(1, self.features.size)
            if density < 0.25 and self.features.size > 65536:
                self._feat_csr = sparse.csr_matrix(self.features)
            else:
                self._feat_csr = False
        return self._feat_csr if self._feat_csr is not False else None


def make_graph(features, edge_pairs, labels, node_ids=None) -> Graph:
    """Validate and canonicalize raw parts into a Graph.

    ``edge_pairs`` holds row-index pairs; orientation and unordered duplicates
    are normalized away.  Self-loops and out-of-range endpoints are rejected.
    """
    features = np.ascontiguousarray(features, dtype=np.float32)
    if features.ndim != 2:
        raise DatasetFormatError(f"features must be 2-D, got shape {features.shape}")
    n = features.shape[0]
    if features.size and not np.all(np.isfinite(features)):
        raise DatasetFormatError("features contain NaN or Inf")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DatasetFormatError(f"labels length {labels.shape} does not match {n} nodes")
    if np.any(labels < UNLABELED):
        raise DatasetFormatError("labels must be >= 0 or the unlabeled sentinel -1")
    if node_ids is None:
        node_ids = np.arange(n, dtype=np.int64)
    else:
        node_ids = np.asarray(node_ids, dtype=np.int64)
        if node_ids.shape != (n,) or len(np.unique(node_ids)) != n:
            raise NodeIdError("node_ids must be unique and one per node")

    pairs = np.asarray(list(edge_pairs), dtype=np.int64).reshape(-1, 2)
    if len(pairs):
        if pairs.min() < 0 or pairs.max() >= n:
            bad = pairs[(pairs < 0).any(axis=1) | (pairs >= n).any(axis=1)][0]
            raise NodeIdError(f"edge endpoint out of range: {tuple(bad)}")
        if np.any(pairs[:, 0] == pairs[:, 1]):
            bad = pairs[pairs[:, 0] == pairs[:, 1]][0]
            raise SelfLoopError(f"self-loop on node {bad[0]}")
        lo = np.minimum(pairs[:, 0], pairs[:, 1])
        hi = np.maximum(pairs[:, 0], pairs[:, 1])
        canon = np.unique(np.stack([lo, hi], axis=1), axis=0)
    else:
        canon = np.empty((0, 2), dtype=np.int64)
    return Graph(node_ids, features, labels, canon)


# ---------------------------------------------------------------------------
# on-disk format

def load_graph(directory_path) -> Graph:
    """Read the canonical three-file dataset directory."""
    directory = Path(directory_path)
    feat_path = directory / "features.bin"
    edge_path = directory / "edges.tsv"
    label_path = directory / "labels.tsv"
    for p in (feat_path, edge_path, label_path):
        if not p.is_file():
            raise DatasetFileMissingError(f"missing dataset file: {p}")

    raw = feat_path.read_bytes()
    if len(raw) < 12 or raw[:4] != _FEATURES_MAGIC:
        raise DatasetFormatError(f"{feat_path}: bad magic, expected {_FEATURES_MAGIC!r}")
    n, d = struct.unpack_from("<II", raw, 4)
    if d == 0:
        raise DatasetFormatError(f"{feat_path}: feature dim must be positive")
    expected = 12 + 4 * n * d
    if len(raw) != expected:
        raise DatasetFormatError(
            f"{feat_path}: payload length {len(raw)} does not match header "
            f"({n} x {d} floats -> {expected} bytes)")
    features = np.frombuffer(raw, dtype="<f4", offset=12).reshape(n, d)

    pairs = []
    seen = set()
    for ln, line in enumerate(edge_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise DatasetFormatError(f"{edge_path}:{ln}: expected two columns, got {len(cols)}")
        try:
            a, b = int(cols[0]), int(cols[1])
        except ValueError:
            raise DatasetFormatError(f"{edge_path}:{ln}: non-integer node index") from None
        if (a, b) in seen:
            raise DuplicateEdgeError(f"{edge_path}:{ln}: duplicate edge ({a}, {b})")
        seen.add((a, b))
        pairs.append((a, b))

    labels = np.full(n, UNLABELED, dtype=np.int64)
    filled = np.zeros(n, dtype=bool)
    for ln, line in enumerate(label_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise DatasetFormatError(f"{label_path}:{ln}: expected two columns, got {len(cols)}")
        try:
            idx, cls = int(cols[0]), int(cols[1])
        except ValueError:
            raise DatasetFormatError(f"{label_path}:{ln}: non-integer field") from None
        if not 0 <= idx < n:
            raise NodeIdError(f"{label_path}:{ln}: node index {idx} out of range")
        if filled[idx]:
            raise DatasetFormatError(f"{label_path}:{ln}: node {idx} labeled twice")
        if cls < UNLABELED:
            raise DatasetFormatError(f"{label_path}:{ln}: bad class id {cls}")
        filled[idx] = True
        labels[idx] = cls
    if not filled.all():
        missing = int(np.nonzero(~filled)[0][0])
        raise DatasetFormatError(f"{label_path}: node {missing} has no label line")

    return make_graph(features, pairs, labels)


def save_dataset(g: Graph, directory_path) -> None:
    """Reference writer for the canonical format (one line per undirected edge)."""
    directory = Path(directory_path)
    directory.mkdir(parents=True, exist_ok=True)
    header = _FEATURES_MAGIC + struct.pack("<II", g.node_count, g.feature_dim)
    payload = np.ascontiguousarray(g.features, dtype="<f4").tobytes()
    (directory / "features.bin").write_bytes(header + payload)
    with open(directory / "edges.tsv", "w") as fh:
        for a, b in g.edges:
            fh.write(f"{a}\t{b}\n")
    with open(directory / "labels.tsv", "w") as fh:
        for i, cls in enumerate(g.labels):
            fh.write(f"{i}\t{cls}\n")


# ---------------------------------------------------------------------------
# basic graph operations

def degree_of(g: Graph, node_id: int) -> int:
    """Number of distinct neighbors, undirected, self excluded."""
    return int(g._degrees[g.row_of(node_id)])


def neighbors_of(g: Graph, node_id: int) -> set:
    """Adjacent node ids; the node itself is not included."""
    rows = g.neighbor_rows(g.row_of(node_id))
    return {int(v) for v in g.node_ids[rows]}


def induced_subgraph(g: Graph, keep) -> Graph:
    """Subgraph on the given node ids; rows remap, external ids are preserved."""
    keep_ids = sorted({int(v) for v in keep})
    rows = np.array([g.row_of(v) for v in keep_ids], dtype=np.int64)
    order = np.argsort(rows)                  # preserve original row order
    rows = rows[order]
    remap = np.full(g.node_count, -1, dtype=np.int64)
    remap[rows] = np.arange(len(rows))
    if len(g.edges):
        mask = (remap[g.edges[:, 0]] >= 0) & (remap[g.edges[:, 1]] >= 0)
        sub_edges = remap[g.edges[mask]]
    else:
        sub_edges = np.empty((0, 2), dtype=np.int64)
    return make_graph(g.features[rows], sub_edges, g.labels[rows], g.node_ids[rows])


def graphs_equal(a: Graph, b: Graph) -> bool:
    return (np.array_equal(a.node_ids, b.node_ids)
            and np.array_equal(a.features, b.features)
            and np.array_equal(a.labels, b.labels)
            and np.array_equal(a.edges, b.edges))


# ---------------------------------------------------------------------------
# session streams

@dataclass(frozen=True)
class SessionSpec:
    novel_classes: tuple
    supports: dict  # class id -> tuple of support node ids


@dataclass(frozen=True)
class ClassPartition:
    base_classes: tuple
    sessions: tuple  # of SessionSpec


@dataclass(frozen=True)
class SessionStream:
    """Base stage plus streaming sessions over cumulative graph snapshots."""

    partition: ClassPartition
    snapshots: tuple       # index 0 = base graph, index t = session-t graph
    eval_pools: tuple      # per stage: {class id -> node id array}
    k_shot: int
    seed: int

    @property
    def num_sessions(self) -> int:
        return len(self.partition.sessions)

    def classes_at(self, stage: int) -> tuple:
        """All encountered class ids through the given stage, ascending."""
        classes = list(self.partition.base_classes)
        for spec in self.partition.sessions[:stage]:
            classes.extend(spec.novel_classes)
        return tuple(sorted(classes))

    def novel_at(self, session: int) -> tuple:
        return tuple(sorted(self.partition.sessions[session - 1].novel_classes))

    def supports_at(self, session: int) -> dict:
        return dict(self.partition.sessions[session - 1].supports)


def _assemble_stream(g: Graph, partition: ClassPartition, k_shot: int, seed: int) -> SessionStream:
    base = list(partition.base_classes)
    snapshots, eval_pools = [], []
    cumulative = list(base)
    support_ids = {}
    for spec in (None, *partition.sessions):
        if spec is not None:
            cumulative.extend(spec.novel_classes)
            for cls, sup in spec.supports.items():
                support_ids[cls] = set(sup)
        keep_mask = np.isin(g.labels, cumulative) | (g.labels == UNLABELED)
        snapshot = induced_subgraph(g, g.node_ids[keep_mask])
        pools = {}
        for cls in sorted(cumulative):
            labeled = g.labeled_ids(cls)
            held_out = support_ids.get(cls)
            if held_out:
                labeled = labeled[~np.isin(labeled, sorted(held_out))]
            pools[cls] = labeled
        snapshots.append(snapshot)
        eval_pools.append(pools)
    return SessionStream(partition, tuple(snapshots), tuple(eval_pools), k_shot, seed)


def _validate_partition_classes(g: Graph, base_classes, session_novel_classes):
    listed = list(base_classes)
    for novel in session_novel_classes:
        listed.extend(novel)
    if len(set(listed)) != len(listed):
        raise ClassOverlapError("base and session class lists must be pairwise disjoint")
    present = set(int(c) for c in g.present_classes())
    unknown = [c for c in listed if int(c) not in present]
    if unknown:
        raise UnknownClassError(f"classes not present in graph labels: {unknown}")


def build_session_stream(g: Graph, base_classes: Sequence[int],
                         session_novel_classes: Sequence[Sequence[int]],
                         k_shot: int, seed: int) -> SessionStream:
    """Construct the base-plus-sessions stream, sampling K-shot supports.

    Supports are drawn uniformly without replacement per novel class,
    deterministically under ``seed``; everything else (snapshots, eval pools)
    is derived from the partition.
    """
    if k_shot < 1:
        raise ValueError(f"k_shot must be positive, got {k_shot}")
    _validate_partition_classes(g, base_classes, session_novel_classes)
    rng = np.random.default_rng(seed)
    sessions = []
    for novel in session_novel_classes:
        supports = {}
        for cls in novel:
            labeled = g.labeled_ids(int(cls))
            if len(labeled) < k_shot + 1:
                raise InsufficientLabelsError(
                    f"class {cls} has {len(labeled)} labeled nodes, needs >= {k_shot + 1}")
            chosen = rng.choice(labeled, size=k_shot, replace=False)
            supports[int(cls)] = tuple(int(v) for v in np.sort(chosen))
        sessions.append(SessionSpec(tuple(int(c) for c in novel), supports))
    partition = ClassPartition(tuple(int(c) for c in base_classes), tuple(sessions))
    return _assemble_stream(g, partition, k_shot, seed)


def save_manifest(stream: SessionStream, path) -> None:
    doc = {
        "base_classes": list(stream.partition.base_classes),
        "sessions": [
            {
                "novel_classes": list(spec.novel_classes),
                "supports": {str(cls): list(sup) for cls, sup in sorted(spec.supports.items())},
            }
            for spec in stream.partition.sessions
        ],
        "k_shot": stream.k_shot,
        "seed": stream.seed,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_session_stream(g: Graph, path) -> SessionStream:
    """Rebuild a stream from its manifest; snapshots and pools are rederived."""
    p = Path(path)
    if not p.is_file():
        raise DatasetFileMissingError(f"missing manifest: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{p}: invalid JSON ({exc})") from None
    try:
        base = [int(c) for c in doc["base_classes"]]
        k_shot = int(doc["k_shot"])
        seed = int(doc["seed"])
        sessions = []
        for entry in doc["sessions"]:
            novel = [int(c) for c in entry["novel_classes"]]
            supports = {int(c): tuple(int(v) for v in ids)
                        for c, ids in entry["supports"].items()}
            sessions.append((novel, supports))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{p}: malformed manifest ({exc})") from None

    _validate_partition_classes(g, base, [novel for novel, _ in sessions])
    specs = []
    for novel, supports in sessions:
        if sorted(supports) != sorted(novel):
            raise ManifestError(f"{p}: supports must cover exactly the novel classes {novel}")
        for cls, sup in supports.items():
            if len(sup) != k_shot:
                raise ManifestError(f"{p}: class {cls} has {len(sup)} supports, expected {k_shot}")
            for v in sup:
                row = g.row_of(v)
                if int(g.labels[row]) != cls:
                    raise ManifestError(f"{p}: support node {v} is not labeled {cls}")
        specs.append(SessionSpec(tuple(novel), supports))
    partition = ClassPartition(tuple(base), tuple(specs))
    return _assemble_stream(g, partition, k_shot, seed)


def streams_equal(a: SessionStream, b: SessionStream) -> bool:
    if (a.partition != b.partition or a.k_shot != b.k_shot or a.seed != b.seed
            or len(a.snapshots) != len(b.snapshots)):
        return False
    if not all(graphs_equal(x, y) for x, y in zip(a.snapshots, b.snapshots)):
        return False
    for pa, pb in zip(a.eval_pools, b.eval_pools):
        if sorted(pa) != sorted(pb):
            return False
        if not all(np.array_equal(pa[c], pb[c]) for c in pa):
            return False
    return True
