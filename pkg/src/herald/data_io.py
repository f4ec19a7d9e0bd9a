"""Dataset ingestion: hypergraph JSON documents, TU graph-classification text files, fixtures."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.model_selection import train_test_split

from .hypergraph import Hypergraph, StructuralError, from_simple_graph

logger = logging.getLogger(__name__)

DOCUMENT_KEYS = {"num_nodes", "hyperedges", "features", "node_labels", "graph_label", "edge_weights", "splits"}
SPLIT_KEYS = {"train", "val", "test"}


class DataError(ValueError):
    """A dataset file failed validation.  ``code`` is a stable machine-readable tag."""

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


@dataclass
class HypergraphDocument:
    num_nodes: int
    hyperedges: list[list[int]]
    features: list[list[float]] | None = None
    node_labels: list[int] | None = None
    graph_label: int | None = None
    edge_weights: list[float] | None = None
    splits: dict[str, list[int]] | None = None

    def to_dict(self) -> dict:
        d = {"num_nodes": self.num_nodes, "hyperedges": self.hyperedges}
        for key in ("features", "node_labels", "graph_label", "edge_weights", "splits"):
            value = getattr(self, key)
            if value is not None:
                d[key] = value
        return d

    @classmethod
    def from_dict(cls, d: dict, strict: bool = True) -> "HypergraphDocument":
        if not isinstance(d, dict):
            raise DataError("malformed", "top-level JSON value must be an object")
        unknown = set(d) - DOCUMENT_KEYS
        if unknown:
            if strict:
                raise DataError("unknown_key", f"unknown keys {sorted(unknown)}")
            logger.warning("ignoring unknown keys %s", sorted(unknown))
        for key in ("num_nodes", "hyperedges"):
            if key not in d:
                raise DataError("missing_key", f"required key {key!r} is missing")
        doc = cls(**{k: d[k] for k in DOCUMENT_KEYS if k in d})
        doc.validate()
        return doc

    def validate(self) -> None:
        n = self.num_nodes
        if not isinstance(n, int) or isinstance(n, bool) or n < 1:
            raise DataError("malformed", f"num_nodes must be a positive integer, got {n!r}")
        if not isinstance(self.hyperedges, list):
            raise DataError("malformed", "hyperedges must be a list of id lists")
        for i, e in enumerate(self.hyperedges):
            if not isinstance(e, list) or not e:
                raise DataError("malformed", f"hyperedge {i} must be a non-empty list")
            for v in e:
                if not isinstance(v, int) or isinstance(v, bool):
                    raise DataError("malformed", f"hyperedge {i} contains non-integer id {v!r}")
                if not 0 <= v < n:
                    raise DataError("id_out_of_range", f"hyperedge {i} references vertex {v} outside [0, {n})")
        if self.features is not None:
            if not isinstance(self.features, list) or len(self.features) != n:
                raise DataError("ragged_features", f"features must have exactly {n} rows")
            widths = {len(row) if isinstance(row, list) else -1 for row in self.features}
            if len(widths) != 1 or -1 in widths:
                raise DataError("ragged_features", f"feature rows have inconsistent widths {sorted(widths)}")
        if self.node_labels is not None and len(self.node_labels) != n:
            raise DataError("malformed", f"node_labels must have {n} entries")
        if self.edge_weights is not None:
            if len(self.edge_weights) != len(self.hyperedges):
                raise DataError("malformed", "edge_weights must have one entry per hyperedge")
            if any(not (isinstance(w, (int, float)) and w > 0) for w in self.edge_weights):
                raise DataError("malformed", "edge weights must be positive numbers")
        if self.splits is not None:
            if not isinstance(self.splits, dict) or set(self.splits) - SPLIT_KEYS:
                raise DataError("malformed", f"splits keys must be a subset of {sorted(SPLIT_KEYS)}")
            seen: set[int] = set()
            for name, ids in self.splits.items():
                for v in ids:
                    if not isinstance(v, int) or not 0 <= v < n:
                        raise DataError("id_out_of_range", f"split {name!r} has invalid vertex {v!r}")
                if seen & set(ids):
                    raise DataError("split_overlap", f"split {name!r} overlaps another split")
                seen |= set(ids)
        covered = np.zeros(n, dtype=bool)
        for e in self.hyperedges:
            covered[e] = True
        if not covered.all():
            raise DataError("isolated_vertices", f"vertices in no hyperedge: {np.flatnonzero(~covered).tolist()}")

    def to_hypergraph(self, dedup: bool = False) -> Hypergraph:
        """Build the hypergraph; ``dedup`` drops repeated hyperedges (first occurrence wins)."""
        edges, weights = self.hyperedges, self.edge_weights
        if dedup:
            keep, seen = [], set()
            for i, e in enumerate(edges):
                key = tuple(sorted(set(e)))
                if key not in seen:
                    seen.add(key)
                    keep.append(i)
            edges = [edges[i] for i in keep]
            weights = None if weights is None else [weights[i] for i in keep]
        labels = None
        if self.node_labels is not None:
            labels = self.node_labels
        elif self.graph_label is not None:
            labels = [self.graph_label]
        try:
            return Hypergraph.from_edges(self.num_nodes, edges, weights, self.features, labels)
        except StructuralError as exc:
            raise DataError("structure", str(exc)) from exc

    @classmethod
    def from_hypergraph(cls, g: Hypergraph, splits: dict | None = None) -> "HypergraphDocument":
        doc = cls(g.num_nodes, [list(e) for e in g.hyperedges])
        if g.features is not None:
            doc.features = g.features.tolist()
        if g.labels is not None:
            if g.labels.shape == (g.num_nodes,):
                doc.node_labels = g.labels.tolist()
            else:
                doc.graph_label = int(g.labels.ravel()[0])
        if not np.all(g.edge_weights == 1.0):
            doc.edge_weights = g.edge_weights.tolist()
        if splits is not None:
            doc.splits = {k: [int(v) for v in ids] for k, ids in splits.items()}
        return doc


def load_document(path, strict: bool = True) -> HypergraphDocument:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError("malformed_json", f"{path}: {exc}") from exc
    except OSError as exc:
        raise DataError("unreadable", f"{path}: {exc}") from exc
    return HypergraphDocument.from_dict(raw, strict=strict)


def save_document(doc: HypergraphDocument, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc.to_dict(), fh)


def load_hypergraph_json(path, strict: bool = True, dedup: bool = False) -> tuple[Hypergraph, dict | None]:
    """Validated hypergraph plus its ``splits`` mapping (or None).  Duplicate hyperedges are kept
    unless ``dedup`` is set."""
    doc = load_document(path, strict=strict)
    return doc.to_hypergraph(dedup=dedup), doc.splits


def save_hypergraph_json(g: Hypergraph, path, splits: dict | None = None) -> None:
    save_document(HypergraphDocument.from_hypergraph(g, splits), path)


def file_checksum(path) -> str:
    """sha256 of a file, or of every file (sorted by name) in a directory."""
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(f for f in p.iterdir() if f.is_file()) if p.is_dir() else [p]
    for f in files:
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


# --- node-classification datasets -------------------------------------------------


@dataclass
class NodeDataset:
    graph: Hypergraph
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    name: str = ""

    def __post_init__(self):
        if self.graph.features is None or self.graph.labels is None:
            raise DataError("malformed", "node datasets need features and node labels")
        if self.graph.labels.shape != (self.graph.num_nodes,):
            raise DataError("malformed", "node datasets need one label per node")
        for name in ("train_idx", "val_idx", "test_idx"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.size == 0:
                raise DataError("malformed", f"{name} is empty")
            setattr(self, name, arr)

    @property
    def num_classes(self) -> int:
        return int(self.graph.labels.max()) + 1

    @property
    def num_features(self) -> int:
        return self.graph.feature_dim

    @classmethod
    def from_hypergraph(cls, g: Hypergraph, splits: dict | None, seed: int = 0, val_fraction: float = 0.2,
                        name: str = "") -> "NodeDataset":
        """Use the given splits; carve ``val_fraction`` of train into validation when absent.

        With no splits at all, a seeded stratified 30/20/50 train/val/test split is drawn.
        """
        if g.features is None or g.labels is None or g.labels.shape != (g.num_nodes,):
            raise DataError("malformed", "node datasets need features and one label per node")
        if not splits:
            train, val, test = random_node_split(g.labels, seed)
            return cls(g, train, val, test, name)
        if "train" not in splits or "test" not in splits:
            raise DataError("malformed", "splits need at least 'train' and 'test'")
        train = np.asarray(splits["train"], dtype=np.int64)
        test = np.asarray(splits["test"], dtype=np.int64)
        if splits.get("val"):
            val = np.asarray(splits["val"], dtype=np.int64)
        else:
            rng = np.random.default_rng(seed)
            shuffled = rng.permutation(train)
            n_val = max(1, int(round(val_fraction * len(train))))
            val, train = np.sort(shuffled[:n_val]), np.sort(shuffled[n_val:])
        return cls(g, train, val, test, name)


def random_node_split(labels: np.ndarray, seed: int, train: float = 0.3, val: float = 0.2):
    idx = np.arange(len(labels))
    _, counts = np.unique(labels, return_counts=True)
    strat = labels if counts.min() >= 3 else None
    tr, rest = train_test_split(idx, train_size=train, random_state=seed, stratify=strat)
    strat_rest = labels[rest] if strat is not None else None
    va, te = train_test_split(rest, train_size=val / (1.0 - train), random_state=seed, stratify=strat_rest)
    return np.sort(tr), np.sort(va), np.sort(te)


def load_node_dataset(path, seed: int = 0, strict: bool = True) -> NodeDataset:
    g, splits = load_hypergraph_json(path, strict=strict)
    return NodeDataset.from_hypergraph(g, splits, seed=seed, name=Path(path).stem)


# --- TU graph-classification format ----------------------------------------------


@dataclass
class SimpleGraph:
    num_nodes: int
    edges: list[tuple[int, int]]
    label: int
    node_labels: list[int] | None = None


@dataclass
class GraphSample:
    graph: Hypergraph
    label: int


_SPLIT_RE = re.compile(r"[,\s]+")


def _read_int_rows(path: Path) -> list[list[int]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([int(tok) for tok in _SPLIT_RE.split(line) if tok])
            except ValueError:
                raise DataError("format", f"{path.name} line {lineno}: not integers: {line!r}") from None
    return rows


def _tu_file(directory: Path, name: str, suffix: str) -> Path:
    return directory / f"{name}_{suffix}.txt"


def _guess_tu_name(directory: Path) -> str:
    hits = sorted(directory.glob("*_graph_indicator.txt"))
    if len(hits) != 1:
        raise DataError("missing_file", f"expected exactly one *_graph_indicator.txt in {directory}")
    return hits[0].name[: -len("_graph_indicator.txt")]


def load_tu_dataset(directory, name: str | None = None) -> list[SimpleGraph]:
    """Parse ``DS_A``, ``DS_graph_indicator``, ``DS_graph_labels`` and optional ``DS_node_labels``.

    Ids in the files are 1-based; returned graphs use 0-based local ids.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError("missing_file", f"{directory} is not a directory")
    name = name or _guess_tu_name(directory)
    for suffix in ("A", "graph_indicator", "graph_labels"):
        if not _tu_file(directory, name, suffix).exists():
            raise DataError("missing_file", f"missing {name}_{suffix}.txt")

    indicator = [r[0] for r in _read_int_rows(_tu_file(directory, name, "graph_indicator"))]
    graph_labels = [r[0] for r in _read_int_rows(_tu_file(directory, name, "graph_labels"))]
    n_graphs = len(graph_labels)
    if not indicator or min(indicator) < 1 or max(indicator) > n_graphs:
        raise DataError("format", "graph indicator references graphs outside the label file")

    # Nodes of each graph are contiguous in the TU layout; local id = global - offset.
    graph_of = np.asarray(indicator) - 1
    offsets = np.zeros(n_graphs, dtype=np.int64)
    counts = np.bincount(graph_of, minlength=n_graphs)
    offsets[1:] = np.cumsum(counts)[:-1]
    if np.any(counts == 0):
        raise DataError("format", f"graphs without nodes: {(np.flatnonzero(counts == 0) + 1).tolist()}")
    if np.any(np.diff(graph_of) < 0):
        raise DataError("format", "graph indicator is not grouped by graph")

    edges: list[set[tuple[int, int]]] = [set() for _ in range(n_graphs)]
    with open(_tu_file(directory, name, "A"), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                u, v = (int(tok) for tok in _SPLIT_RE.split(line) if tok)
            except ValueError:
                raise DataError("format", f"{name}_A.txt line {lineno}: expected two integers, got {line!r}") from None
            if not (1 <= u <= len(indicator) and 1 <= v <= len(indicator)):
                raise DataError("format", f"{name}_A.txt line {lineno}: node id out of range")
            gu, gv = graph_of[u - 1], graph_of[v - 1]
            if gu != gv:
                raise DataError("cross_graph_edge", f"{name}_A.txt line {lineno}: edge {u}-{v} joins graphs {gu + 1} and {gv + 1}")
            a, b = u - 1 - offsets[gu], v - 1 - offsets[gu]
            if a != b:
                edges[gu].add((int(min(a, b)), int(max(a, b))))

    node_label_path = _tu_file(directory, name, "node_labels")
    node_labels = None
    if node_label_path.exists():
        node_labels = [r[0] for r in _read_int_rows(node_label_path)]
        if len(node_labels) != len(indicator):
            raise DataError("format", "node label count does not match graph indicator")

    graphs = []
    for k in range(n_graphs):
        lo, hi = offsets[k], offsets[k] + counts[k]
        graphs.append(SimpleGraph(
            num_nodes=int(counts[k]),
            edges=sorted(edges[k]),
            label=graph_labels[k],
            node_labels=None if node_labels is None else node_labels[lo:hi],
        ))
    return graphs


def tu_to_samples(graphs: Sequence[SimpleGraph]) -> list[GraphSample]:
    """Centroid-expand every graph; features are one-hot node labels, or a constant 1.

    Graph labels are remapped to ``0..C-1`` in sorted order.
    """
    classes = {c: i for i, c in enumerate(sorted({g.label for g in graphs}))}
    vocab = None
    if all(g.node_labels is not None for g in graphs):
        vocab = {c: i for i, c in enumerate(sorted({c for g in graphs for c in g.node_labels}))}
    samples = []
    for g in graphs:
        if vocab is None:
            feats = np.ones((g.num_nodes, 1))
        else:
            feats = np.zeros((g.num_nodes, len(vocab)))
            feats[np.arange(g.num_nodes), [vocab[c] for c in g.node_labels]] = 1.0
        label = classes[g.label]
        samples.append(GraphSample(from_simple_graph(g.num_nodes, g.edges, feats, [label]), label))
    return samples


def save_tu_dataset(graphs: Sequence[SimpleGraph], directory, name: str) -> None:
    """Write graphs in the TU text layout (1-based ids)."""
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    offset = 0
    a_lines, ind_lines, lab_lines, nl_lines = [], [], [], []
    for k, g in enumerate(graphs, start=1):
        for u, v in g.edges:
            a_lines.append(f"{u + offset + 1}, {v + offset + 1}")
            a_lines.append(f"{v + offset + 1}, {u + offset + 1}")
        ind_lines.extend([str(k)] * g.num_nodes)
        lab_lines.append(str(g.label))
        if g.node_labels is not None:
            nl_lines.extend(str(c) for c in g.node_labels)
        offset += g.num_nodes
    (directory / f"{name}_A.txt").write_text("\n".join(a_lines) + "\n")
    (directory / f"{name}_graph_indicator.txt").write_text("\n".join(ind_lines) + "\n")
    (directory / f"{name}_graph_labels.txt").write_text("\n".join(lab_lines) + "\n")
    if nl_lines and len(nl_lines) == offset:
        (directory / f"{name}_node_labels.txt").write_text("\n".join(nl_lines) + "\n")


# --- fixtures ------------------------------------------------------------------------

FIXTURE_KINDS = ("two_blobs", "ring", "separable_node_task", "coauthorship")


def make_fixture(kind: str, seed: int = 0, **kwargs) -> Hypergraph:
    """Seeded synthetic hypergraphs with planted class structure (recipes in docs/fixtures.md)."""
    builders = {
        "two_blobs": _two_blobs,
        "ring": _ring,
        "separable_node_task": _separable_node_task,
        "coauthorship": _coauthorship,
    }
    if kind not in builders:
        raise ValueError(f"unknown fixture {kind!r}; choose from {FIXTURE_KINDS}")
    return builders[kind](np.random.default_rng(seed), **kwargs)


def _planted_edge(rng, by_class, n, home, size, purity):
    """One hyperedge whose members come from class ``home`` with probability ``purity``, else anywhere."""
    members = set()
    while len(members) < size:
        pool = by_class[home] if rng.random() < purity else np.arange(n)
        members.add(int(rng.choice(pool)))
    return sorted(members)


def _planted_edges(rng, labels, num_edges, size, purity):
    """Hyperedges cycling through the classes as their home class."""
    n = len(labels)
    by_class = [np.flatnonzero(labels == c) for c in range(labels.max() + 1)]
    edges = [_planted_edge(rng, by_class, n, j % len(by_class), size, purity) for j in range(num_edges)]
    # Cover any vertex the random draws missed with a same-class pair.
    covered = np.zeros(n, dtype=bool)
    for e in edges:
        covered[e] = True
    for v in np.flatnonzero(~covered):
        peer = int(rng.choice(by_class[labels[v]]))
        edges.append(sorted({int(v), peer}))
    return edges


def _two_blobs(rng, n: int = 40, dim: int = 4, shift: float = 1.5):
    labels = np.repeat([0, 1], n // 2)
    feats = rng.normal(size=(n, dim))
    feats[:, 0] += np.where(labels == 0, -shift, shift)
    edges = _planted_edges(rng, labels, num_edges=n // 2, size=4, purity=0.8)
    return Hypergraph.from_edges(n, edges, None, feats, labels)


def _ring(rng, n: int = 12, dim: int = 3):
    edges = [(v, (v + 1) % n) for v in range(n)]
    labels = (np.arange(n) >= n // 2).astype(np.int64)
    return from_simple_graph(n, edges, rng.normal(size=(n, dim)), labels)


def _separable_node_task(rng, n: int = 60, classes: int = 3, dim: int = 8, noise: float = 0.6,
                         purity: float = 0.7):
    """First ``classes`` coordinates carry ``2 * onehot(label)`` plus noise bounded by ``noise`` < 1,
    so ``argmax`` over those coordinates is a perfect linear classifier.  With ``purity=1`` every
    hyperedge is single-class and the features stay separable after any within-edge averaging."""
    labels = np.arange(n) % classes
    feats = rng.uniform(-noise, noise, size=(n, dim))
    feats[np.arange(n), labels] += 2.0
    edges = _planted_edges(rng, labels, num_edges=n // 3, size=4, purity=purity)
    return Hypergraph.from_edges(n, edges, None, feats, labels)


def _coauthorship(rng, n: int = 200, classes: int = 4, dim: int = 16, authors: int = 120,
                  signal: float = 0.5, purity: float = 0.85):
    """Papers (nodes) grouped by authors (hyperedges); weak noisy class signal in the features."""
    labels = rng.integers(0, classes, size=n)
    labels[:classes] = np.arange(classes)
    centers = rng.normal(size=(classes, dim))
    feats = signal * centers[labels] + rng.normal(size=(n, dim))
    sizes = rng.integers(2, 6, size=authors)
    homes = rng.integers(0, classes, size=authors)
    by_class = [np.flatnonzero(labels == c) for c in range(classes)]
    edges = [_planted_edge(rng, by_class, n, int(homes[j]), int(sizes[j]), purity) for j in range(authors)]
    covered = np.zeros(n, dtype=bool)
    for e in edges:
        covered[e] = True
    for v in np.flatnonzero(~covered):
        same = np.flatnonzero(labels == labels[v])
        edges.append(sorted({int(v), int(rng.choice(same))}))
    return Hypergraph.from_edges(n, edges, None, feats, labels)


def make_graph_fixture(seed: int = 0, num_graphs: int = 60, min_nodes: int = 8, max_nodes: int = 16,
                       feature_dim: int = 3) -> list[SimpleGraph]:
    """Two-class graph-classification fixture: class 0 graphs are long cycles with chords,
    class 1 graphs are clusters of triangles.  Node labels are drawn from a class-dependent mix."""
    rng = np.random.default_rng(seed)
    graphs = []
    for k in range(num_graphs):
        label = k % 2
        n = int(rng.integers(min_nodes, max_nodes + 1))
        edges = set()
        if label == 0:
            for v in range(n):
                edges.add((v, (v + 1) % n))
            for _ in range(max(1, n // 6)):
                u, v = rng.choice(n, size=2, replace=False)
                edges.add((int(u), int(v)))
        else:
            for base in range(0, n - 2, 3):
                edges.update({(base, base + 1), (base + 1, base + 2), (base, base + 2)})
            for base in range(0, n - 3, 3):
                edges.add((base + 2, base + 3))
            for v in range(n - n % 3, n):
                edges.add((v, v - 1))
        edges = {(min(u, v), max(u, v)) for u, v in edges if u != v}
        probs = np.full(feature_dim, 1.0 / feature_dim)
        probs[label % feature_dim] += 0.2
        probs /= probs.sum()
        node_labels = rng.choice(feature_dim, size=n, p=probs).tolist()
        graphs.append(SimpleGraph(n, sorted(edges), label + 1, node_labels))
    return graphs


def fixture_checksum(g: Hypergraph) -> str:
    """sha256 of the canonical JSON document of ``g`` (features rendered with ``repr``)."""
    payload = json.dumps(HypergraphDocument.from_hypergraph(g).to_dict(), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def graph_fixture_checksum(graphs: Sequence[SimpleGraph]) -> str:
    """sha256 of ``[num_nodes, edges, label, node_labels]`` per graph, as compact JSON."""
    payload = json.dumps([[g.num_nodes, [list(e) for e in g.edges], g.label, g.node_labels] for g in graphs])
    return hashlib.sha256(payload.encode()).hexdigest()
