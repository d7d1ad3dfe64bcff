"""Graph and attribute data model, dataset files and the synthetic generator.

A dataset directory holds whitespace-separated UTF-8 text files where ``#``
starts a comment:

``meta``
    ``key value`` lines: ``name``, ``nodes``, ``features``, ``kind``
    (``categorical`` or ``real``) and optionally ``classes``.
``edges``
    one ``i j`` pair per line; either or both directions may be listed.
``attrs``
    sparse ``i f v`` triplets; absent entries are zero.
``labels`` (optional)
    ``i c`` pairs covering every node.
``split`` (optional)
    ``i part`` pairs with part in ``train``/``val``/``test``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .autograd import Rng, SparseMatrix
from .errors import InvalidArgumentError, InvalidDataError, LoadError

logger = logging.getLogger(__name__)

CATEGORICAL = "categorical"
REAL = "real"
ATTRIBUTE_KINDS = (CATEGORICAL, REAL)
SPLIT_PARTS = ("train", "val", "test")


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected simple graph: symmetric binary adjacency, empty diagonal."""

    adjacency: SparseMatrix

    def __post_init__(self):
        a = self.adjacency
        if a.n_rows != a.n_cols:
            raise InvalidDataError("adjacency must be square")
        if a.nnz and not np.all(a.values == 1.0):
            raise InvalidDataError("adjacency must be binary")
        if np.any(a.rows == a.cols):
            raise InvalidDataError("adjacency must not contain self loops")
        if not a.is_symmetric():
            raise InvalidDataError("adjacency must be symmetric")

    @classmethod
    def from_edges(cls, n_nodes, edges):
        """Build from (i, j) pairs; reverse directions and repeats are merged."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if len(edges) and np.any(edges[:, 0] == edges[:, 1]):
            raise InvalidDataError("self loop in edge list")
        m = sp.coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n_nodes, n_nodes))
        m = ((m + m.T) > 0).astype(np.float64)
        return cls(SparseMatrix.from_scipy(m, symmetric=True))

    @property
    def n_nodes(self):
        return self.adjacency.n_rows

    @property
    def n_edges(self):
        """Undirected edge count (each edge stored twice in the adjacency)."""
        return self.adjacency.nnz // 2

    def degrees(self):
        return np.bincount(self.adjacency.rows, minlength=self.n_nodes)

    def neighbors(self, i):
        csr = self.adjacency.to_csr()
        return csr.indices[csr.indptr[i]:csr.indptr[i + 1]]

    def edge_list(self):
        """Upper-triangular (i < j) edge pairs."""
        a = self.adjacency
        keep = a.rows < a.cols
        return np.stack([a.rows[keep], a.cols[keep]], axis=1)

    def __eq__(self, other):
        return isinstance(other, Graph) and self.adjacency == other.adjacency

    __hash__ = None


@dataclass(frozen=True, eq=False)
class AttributeMatrix:
    values: np.ndarray
    kind: str = CATEGORICAL

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise InvalidDataError("attribute matrix must be 2-D")
        if self.kind not in ATTRIBUTE_KINDS:
            raise InvalidDataError(f"unknown attribute kind {self.kind!r}")
        if not np.all(np.isfinite(values)):
            raise InvalidDataError("attribute values must be finite")
        if self.kind == CATEGORICAL and not np.all((values == 0) | (values == 1)):
            raise InvalidDataError("categorical attributes must be 0/1")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def n_features(self):
        return self.values.shape[1]

    @property
    def is_categorical(self):
        return self.kind == CATEGORICAL

    def rows(self, index):
        return self.values[np.asarray(index, dtype=np.int64)]

    def __eq__(self, other):
        return (isinstance(other, AttributeMatrix) and self.kind == other.kind
                and np.array_equal(self.values, other.values))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class NodeSplit:
    """Observed-train / observed-validation / unobserved-test node ids."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in SPLIT_PARTS:
            arr = np.sort(np.asarray(getattr(self, name), dtype=np.int64))
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        every = np.concatenate([self.train, self.val, self.test])
        if len(np.unique(every)) != len(every):
            raise InvalidDataError("split parts overlap")
        if len(every) and not np.array_equal(np.sort(every), np.arange(len(every))):
            raise InvalidDataError("split parts must cover nodes 0..N-1")

    @property
    def n_nodes(self):
        return len(self.train) + len(self.val) + len(self.test)

    @property
    def observed(self):
        return np.sort(np.concatenate([self.train, self.val]))

    @property
    def unobserved(self):
        return self.test

    def __eq__(self, other):
        return isinstance(other, NodeSplit) and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in SPLIT_PARTS)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    graph: Graph
    attributes: AttributeMatrix
    split: NodeSplit
    labels: np.ndarray | None = None
    name: str = "dataset"
    n_classes: int | None = None

    def __post_init__(self):
        n = self.graph.n_nodes
        if self.attributes.values.shape[0] != n:
            raise InvalidDataError("attribute rows must equal node count")
        if self.split.n_nodes != n:
            raise InvalidDataError("split must cover every node")
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (n,):
                raise InvalidDataError("need exactly one label per node")
            n_classes = self.n_classes if self.n_classes is not None else int(labels.max()) + 1
            if labels.min() < 0 or labels.max() >= n_classes:
                raise InvalidDataError("class ids must lie in 0..classes-1")
            labels.flags.writeable = False
            object.__setattr__(self, "labels", labels)
            object.__setattr__(self, "n_classes", int(n_classes))

    @property
    def n_nodes(self):
        return self.graph.n_nodes

    @property
    def n_features(self):
        return self.attributes.n_features

    def with_split(self, split):
        return DatasetBundle(self.graph, self.attributes, split, self.labels, self.name, self.n_classes)

    def __eq__(self, other):
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None
            and np.array_equal(self.labels, other.labels))
        return (self.name == other.name and self.graph == other.graph
                and self.attributes == other.attributes and self.split == other.split
                and same_labels and self.n_classes == other.n_classes)

    __hash__ = None


# ---------------------------------------------------------------------------
# preprocessing


def normalize_adjacency(graph: Graph) -> SparseMatrix:
    """Symmetric renormalisation D^-1/2 (A + I) D^-1/2 with D the degrees of A + I."""
    n = graph.n_nodes
    a = graph.adjacency.to_csr() + sp.identity(n, format="csr")
    deg = np.asarray(a.sum(axis=1)).reshape(-1)
    coo = sp.coo_matrix(a)
    # one rounding per entry; exact for hand cases such as 1/sqrt(2*2)
    vals = coo.data / np.sqrt(deg[coo.row] * deg[coo.col])
    return SparseMatrix(n, n, coo.row, coo.col, vals)


def split_nodes(n_nodes, ratios=(0.4, 0.1, 0.5), rng: Rng | None = None) -> NodeSplit:
    """Random partition with floor(r0*N), floor(r1*N) and the remainder."""
    if n_nodes < 3:
        raise InvalidArgumentError("need at least 3 nodes to split")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise InvalidArgumentError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    if rng is None:
        rng = np.random.default_rng(0)
    perm = rng.permutation(n_nodes)
    n_train = int(math.floor(ratios[0] * n_nodes + 1e-9))
    n_val = int(math.floor(ratios[1] * n_nodes + 1e-9))
    return NodeSplit(perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])


def compute_pos_weight(x_train) -> float:
    """#zero / #one over a categorical training block (1.0 when no zeros)."""
    x = np.asarray(x_train.values if isinstance(x_train, AttributeMatrix) else x_train)
    if isinstance(x_train, AttributeMatrix) and not x_train.is_categorical:
        raise InvalidDataError("pos weight is defined for categorical attributes only")
    ones = int(np.count_nonzero(x))
    if ones == 0:
        raise InvalidDataError("training attributes contain no non-zero entries")
    zero_count = x.size - ones
    if zero_count == 0:
        return 1.0
    return zero_count / ones


def binarize_cooccurrence(counts: SparseMatrix, threshold=10) -> Graph:
    """Keep off-diagonal pairs whose co-occurrence count reaches ``threshold``."""
    if counts.n_rows != counts.n_cols or not counts.is_symmetric():
        raise InvalidDataError("co-occurrence counts must be a symmetric square matrix")
    if counts.nnz and counts.values.min() < 0:
        raise InvalidDataError("co-occurrence counts must be non-negative")
    keep = (counts.values >= threshold) & (counts.rows != counts.cols)
    n = counts.n_rows
    return Graph(SparseMatrix(n, n, counts.rows[keep], counts.cols[keep], np.ones(int(keep.sum()))))


# ---------------------------------------------------------------------------
# synthetic data


def synth_dataset(blocks=3, nodes_per_block=60, p_in=0.2, p_out=0.02, attr_dim=30, signal=0.9,
                  rng: Rng | None = None, ratios=(0.4, 0.1, 0.5), name="sbm") -> DatasetBundle:
    """Stochastic block model with block-aligned multi-hot attributes.

    Block ``c`` owns attribute dims ``[c*F/b, (c+1)*F/b)``; a node sets its own
    block's dims with probability ``signal`` and every other dim with
    probability ``1 - signal``. Labels are block ids.
    """
    if blocks < 1 or nodes_per_block < 1:
        raise InvalidArgumentError("blocks and nodes_per_block must be positive")
    if not 0.0 <= p_out < p_in <= 1.0:
        raise InvalidArgumentError("need 0 <= p_out < p_in <= 1")
    if not 0.5 < signal <= 1.0:
        raise InvalidArgumentError("signal must lie in (0.5, 1]")
    if attr_dim % blocks:
        raise InvalidArgumentError("attr_dim must be divisible by blocks")
    if rng is None:
        rng = np.random.default_rng(0)
    n = blocks * nodes_per_block
    labels = np.repeat(np.arange(blocks), nodes_per_block)
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    upper = np.triu(rng.random((n, n)) < prob, k=1)
    adj = upper | upper.T
    graph = Graph(SparseMatrix.from_dense(adj.astype(np.float64), symmetric=True))

    width = attr_dim // blocks
    owner = np.arange(attr_dim) // width
    on_prob = np.where(labels[:, None] == owner[None, :], signal, 1.0 - signal)
    x = (rng.random((n, attr_dim)) < on_prob).astype(np.float64)
    split = split_nodes(n, ratios, rng)
    return DatasetBundle(graph, AttributeMatrix(x, CATEGORICAL), split, labels, name, blocks)


# ---------------------------------------------------------------------------
# file format


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def _parse_ints(path, lineno, tokens, count):
    if len(tokens) != count:
        raise LoadError(f"expected {count} fields, got {len(tokens)}", path, lineno)
    try:
        return [int(t) for t in tokens]
    except ValueError as exc:
        raise LoadError(f"bad integer field: {exc}", path, lineno) from None


def read_meta(path):
    path = Path(path)
    meta = {}
    for lineno, tokens in _data_lines(path):
        if len(tokens) != 2:
            raise LoadError("meta lines must be 'key value'", path, lineno)
        key, value = tokens
        if key in ("nodes", "features", "classes"):
            try:
                meta[key] = int(value)
            except ValueError:
                raise LoadError(f"{key} must be an integer", path, lineno) from None
        elif key in ("name", "kind"):
            meta[key] = value
        else:
            raise LoadError(f"unknown meta key {key!r}", path, lineno)
    for key in ("nodes", "features", "kind"):
        if key not in meta:
            raise LoadError(f"missing meta key {key!r}", path)
    if meta["kind"] not in ATTRIBUTE_KINDS:
        raise LoadError(f"kind must be one of {ATTRIBUTE_KINDS}", path)
    return meta


def read_edges(path, n_nodes):
    path = Path(path)
    pairs = []
    for lineno, tokens in _data_lines(path):
        i, j = _parse_ints(path, lineno, tokens, 2)
        if not (0 <= i < n_nodes and 0 <= j < n_nodes):
            raise LoadError(f"node id out of range 0..{n_nodes - 1}", path, lineno)
        if i == j:
            logger.warning("%s:%d: dropping self loop on node %d", path, lineno, i)
            continue
        pairs.append((i, j))
    return Graph.from_edges(n_nodes, np.array(pairs, dtype=np.int64).reshape(-1, 2))


def read_attribute_triplets(path, n_nodes, n_features, kind):
    path = Path(path)
    values = np.zeros((n_nodes, n_features))
    seen = set()
    for lineno, tokens in _data_lines(path):
        if len(tokens) != 3:
            raise LoadError(f"expected 3 fields, got {len(tokens)}", path, lineno)
        i, f = _parse_ints(path, lineno, tokens[:2], 2)
        try:
            v = float(tokens[2])
        except ValueError:
            raise LoadError(f"bad value {tokens[2]!r}", path, lineno) from None
        if not (0 <= i < n_nodes and 0 <= f < n_features):
            raise LoadError("attribute index out of range", path, lineno)
        if not math.isfinite(v):
            raise LoadError("attribute value must be finite", path, lineno)
        if kind == CATEGORICAL and v not in (0.0, 1.0):
            raise LoadError(f"categorical attribute value must be 0 or 1, got {tokens[2]}", path, lineno)
        if (i, f) in seen:
            raise LoadError(f"duplicate attribute entry ({i}, {f})", path, lineno)
        seen.add((i, f))
        values[i, f] = v
    return AttributeMatrix(values, kind)


def read_labels(path, n_nodes, n_classes=None):
    path = Path(path)
    labels = np.full(n_nodes, -1, dtype=np.int64)
    for lineno, tokens in _data_lines(path):
        i, c = _parse_ints(path, lineno, tokens, 2)
        if not 0 <= i < n_nodes:
            raise LoadError("node id out of range", path, lineno)
        if c < 0 or (n_classes is not None and c >= n_classes):
            raise LoadError(f"class id {c} out of range", path, lineno)
        if labels[i] != -1:
            raise LoadError(f"node {i} labelled twice", path, lineno)
        labels[i] = c
    missing = np.flatnonzero(labels < 0)
    if len(missing):
        raise LoadError(f"{len(missing)} nodes have no label (first: {missing[0]})", path)
    return labels


def read_split(path, n_nodes):
    path = Path(path)
    parts = {name: [] for name in SPLIT_PARTS}
    for lineno, tokens in _data_lines(path):
        if len(tokens) != 2 or tokens[1] not in parts:
            raise LoadError("split lines must be 'node train|val|test'", path, lineno)
        (i,) = _parse_ints(path, lineno, tokens[:1], 1)
        if not 0 <= i < n_nodes:
            raise LoadError("node id out of range", path, lineno)
        parts[tokens[1]].append(i)
    try:
        return NodeSplit(**{k: np.array(v, dtype=np.int64) for k, v in parts.items()})
    except InvalidDataError as exc:
        raise LoadError(str(exc), path) from None


def load_dataset(path, ratios=(0.4, 0.1, 0.5), rng: Rng | None = None) -> DatasetBundle:
    """Load a dataset directory; a missing ``split`` file is drawn from ``rng``."""
    root = Path(path)
    if not root.is_dir():
        raise LoadError("dataset directory not found", root)
    meta = read_meta(root / "meta")
    n, f, kind = meta["nodes"], meta["features"], meta["kind"]
    graph = read_edges(root / "edges", n)
    attrs = read_attribute_triplets(root / "attrs", n, f, kind)
    labels = None
    if (root / "labels").exists():
        labels = read_labels(root / "labels", n, meta.get("classes"))
    if (root / "split").exists():
        split = read_split(root / "split", n)
    else:
        split = split_nodes(n, ratios, rng)
    try:
        return DatasetBundle(graph, attrs, split, labels, meta.get("name", root.name), meta.get("classes"))
    except InvalidDataError as exc:
        raise LoadError(str(exc), root) from None


def _fmt(v):
    return repr(float(v)) if not float(v).is_integer() else str(int(v))


def write_dataset(bundle: DatasetBundle, path, header=None):
    """Write ``bundle`` in the directory format read by :func:`load_dataset`."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lead = "".join(f"# {line}\n" for line in (header or []))
    meta = [f"name {bundle.name}", f"nodes {bundle.n_nodes}", f"features {bundle.n_features}",
            f"kind {bundle.attributes.kind}"]
    if bundle.n_classes is not None:
        meta.append(f"classes {bundle.n_classes}")
    (root / "meta").write_text(lead + "\n".join(meta) + "\n", encoding="utf-8")
    edges = bundle.graph.edge_list()
    (root / "edges").write_text(lead + "".join(f"{i} {j}\n" for i, j in edges), encoding="utf-8")
    write_attribute_triplets(root / "attrs", bundle.attributes.values, header=header)
    if bundle.labels is not None:
        (root / "labels").write_text(
            lead + "".join(f"{i} {c}\n" for i, c in enumerate(bundle.labels)), encoding="utf-8")
    lines = []
    for name in SPLIT_PARTS:
        lines.extend(f"{i} {name}\n" for i in getattr(bundle.split, name))
    (root / "split").write_text(lead + "".join(lines), encoding="utf-8")
    return root


def write_attribute_triplets(path, values, node_ids=None, header=None):
    values = np.asarray(values, dtype=np.float64)
    ids = np.arange(len(values)) if node_ids is None else np.asarray(node_ids)
    out = ["".join(f"# {line}\n" for line in (header or []))]
    for row, node in zip(values, ids):
        for f in np.flatnonzero(row):
            out.append(f"{int(node)} {int(f)} {_fmt(row[f])}\n")
    Path(path).write_text("".join(out), encoding="utf-8")


# ---------------------------------------------------------------------------
# generated attribute fragments


def write_predictions(path, node_ids, values, kind, header=None):
    """Write generated attributes for ``node_ids``.

    Categorical predictions are written as sparse ``i f 1`` triplets of the
    entries whose probability is at least 0.5; real-valued predictions as
    dense ``i v1 ... vF`` rows.
    """
    values = np.asarray(values, dtype=np.float64)
    lines = [f"# {line}\n" for line in (header or [])]
    fmt = "triplets" if kind == CATEGORICAL else "dense"
    lines.append(f"# format {fmt} features {values.shape[1]} kind {kind}\n")
    # triplets omit all-zero rows, so the covered nodes are listed explicitly
    lines.append("# nodes " + ",".join(str(int(i)) for i in node_ids) + "\n")
    if kind == CATEGORICAL:
        for node, row in zip(node_ids, values):
            lines.extend(f"{int(node)} {int(f)} 1\n" for f in np.flatnonzero(row >= 0.5))
    else:
        for node, row in zip(node_ids, values):
            lines.append(f"{int(node)} " + " ".join(repr(float(v)) for v in row) + "\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_predictions(path, n_nodes):
    """Parse a fragment from :func:`write_predictions` into (node ids, AttributeMatrix)."""
    path = Path(path)
    fmt = features = kind = None
    rows = {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            tokens = raw.lstrip("#").split()
            if raw.startswith("#") and tokens[:1] == ["format"] and len(tokens) == 6:
                fmt, features, kind = tokens[1], int(tokens[3]), tokens[5]
            elif raw.startswith("#") and tokens[:1] == ["nodes"] and fmt is not None:
                try:
                    listed = [int(t) for t in tokens[1].split(",")] if len(tokens) > 1 else []
                except ValueError:
                    raise LoadError("bad '# nodes' header", path) from None
                for i in listed:
                    if not 0 <= i < n_nodes:
                        raise LoadError("index out of range", path)
                    rows[i] = np.zeros(features)
                break
    if fmt is None:
        raise LoadError("missing '# format' header", path)
    for lineno, tokens in _data_lines(path):
        if fmt == "triplets":
            if len(tokens) != 3:
                raise LoadError("expected 'i f v'", path, lineno)
            i, f = _parse_ints(path, lineno, tokens[:2], 2)
            if not (0 <= i < n_nodes and 0 <= f < features):
                raise LoadError("index out of range", path, lineno)
            v = float(tokens[2])
            if kind == CATEGORICAL and v not in (0.0, 1.0):
                raise LoadError("categorical value must be 0 or 1", path, lineno)
            rows.setdefault(i, np.zeros(features))[f] = v
        else:
            if len(tokens) != features + 1:
                raise LoadError(f"expected {features + 1} fields", path, lineno)
            (i,) = _parse_ints(path, lineno, tokens[:1], 1)
            if not 0 <= i < n_nodes:
                raise LoadError("index out of range", path, lineno)
            rows[i] = np.array([float(t) for t in tokens[1:]])
    ids = np.array(sorted(rows), dtype=np.int64)
    block = np.stack([rows[i] for i in ids]) if len(ids) else np.zeros((0, features))
    return ids, AttributeMatrix(block, kind)
