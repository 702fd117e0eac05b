"""
Heterogeneous multi-relation graphs, labels and splits.

A HeteroGraph stores one directed adjacency per relation in compressed sparse
row form (scipy.sparse CSR), together with its transpose so that both
out-neighbors and in-neighbors answer in time proportional to the output.
Graphs are immutable after construction: the underlying index arrays are
flagged read-only and the class exposes no mutators, so a loaded graph can be
shared by concurrent readers.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from lib.logger import get_logger
from lib.utils import atomic_write_bytes

BOT = 1
HUMAN = 0
UNLABELED = -1

SPLIT_NAMES = ("train", "val", "test")

logger = get_logger()


class GraphError(Exception):
    """
    Exception raised for graph, label and split errors.

    Used for malformed input rows, out-of-range node ids, unknown relations and
    violated label/split invariants.
    """


def _freeze(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def _build_csr(n: int, src: np.ndarray, dst: np.ndarray) -> sp.csr_matrix:
    data = np.ones(len(src), dtype=np.int8)
    matrix = sp.csr_matrix((data, (src, dst)), shape=(n, n))
    matrix.sum_duplicates()
    matrix.sort_indices()
    _freeze(matrix.indptr)
    _freeze(matrix.indices)
    _freeze(matrix.data)
    return matrix


@dataclass(frozen=True, eq=False)
class RelationView:
    """
    Read-only view of one relation's adjacency.

    ``indptr``/``indices`` describe the walk direction of the view: stored
    out-edges for a normal view, in-edges for a reversed view (used by PPR's
    ``reverse`` mode). Degrees always refer to that walk direction.
    """

    relation: str
    n: int
    indptr: np.ndarray
    indices: np.ndarray
    in_indptr: np.ndarray
    in_indices: np.ndarray
    reverse: bool = False
    degrees: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "degrees", _freeze(np.diff(self.indptr)))

    @property
    def edge_count(self) -> int:
        return int(self.indices.shape[0])

    def out_neighbors(self, v: int) -> np.ndarray:
        """Neighbors reachable in one step along the view direction (sorted)."""
        return self.indices[self.indptr[v] : self.indptr[v + 1]]

    def in_neighbors(self, v: int) -> np.ndarray:
        """Nodes with an edge into v along the view direction (sorted)."""
        return self.in_indices[self.in_indptr[v] : self.in_indptr[v + 1]]

    def degree(self, v: int) -> int:
        """Out-degree of v along the view direction."""
        return int(self.degrees[v])

    def has_edge(self, u: int, v: int) -> bool:
        neighbors = self.out_neighbors(u)
        pos = np.searchsorted(neighbors, v)
        return bool(pos < len(neighbors) and neighbors[pos] == v)

    def flipped(self) -> "RelationView":
        """The same relation walked against the stored edge direction."""
        return RelationView(
            relation=self.relation,
            n=self.n,
            indptr=self.in_indptr,
            indices=self.in_indices,
            in_indptr=self.indptr,
            in_indices=self.indices,
            reverse=not self.reverse,
        )


class HeteroGraph:
    """
    Immutable directed graph with named relations.

    Attributes:
        n: Node count; node ids are dense integers in [0, n)
        relations: Ordered tuple of unique relation names

    Example:
        >>> g = HeteroGraph.from_edges(3, ["follow", "reply"], {
        ...     "follow": [(0, 1), (1, 0)], "reply": [(0, 2)]})
        >>> g.edge_count("follow")
        2
        >>> list(relation_view(g, "follow").out_neighbors(0))
        [1]
    """

    def __init__(
        self,
        n: int,
        relations: Sequence[str],
        adjacency: Mapping[str, sp.csr_matrix],
    ):
        if n < 0:
            raise GraphError(f"Node count must be non-negative, got {n}")
        if len(set(relations)) != len(relations):
            raise GraphError(f"Relation names must be unique: {list(relations)}")
        missing = [r for r in relations if r not in adjacency]
        if missing:
            raise GraphError(f"No adjacency given for relations {missing}")

        self._n = int(n)
        self._relations: Tuple[str, ...] = tuple(relations)
        self._out: Dict[str, sp.csr_matrix] = {}
        self._in: Dict[str, sp.csr_matrix] = {}
        for name in self._relations:
            out = adjacency[name]
            if out.shape != (n, n):
                raise GraphError(
                    f"Adjacency of '{name}' has shape {out.shape}, expected {(n, n)}"
                )
            coo = out.tocoo()
            self._out[name] = _build_csr(n, coo.row, coo.col)
            self._in[name] = _build_csr(n, coo.col, coo.row)

    @classmethod
    def from_edges(
        cls,
        n: int,
        relation_names: Sequence[str],
        edges: Mapping[str, Union[np.ndarray, Iterable[Tuple[int, int]]]],
    ) -> "HeteroGraph":
        """
        Build a graph from per-relation (src, dst) pairs.

        Duplicate edges collapse to one; self-loops are kept.

        Raises:
            GraphError: On unknown relations or node ids outside [0, n)
        """
        adjacency: Dict[str, sp.csr_matrix] = {}
        unknown = [r for r in edges if r not in relation_names]
        if unknown:
            raise GraphError(
                f"Unknown relation(s) {unknown}; known: {list(relation_names)}"
            )
        for name in relation_names:
            pairs = np.asarray(list(edges.get(name, [])), dtype=np.int64).reshape(-1, 2)
            if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
                raise GraphError(f"node id out of range in relation '{name}' (n={n})")
            pairs = np.unique(pairs, axis=0) if pairs.size else pairs
            adjacency[name] = sp.csr_matrix(
                (np.ones(len(pairs), dtype=np.int8), (pairs[:, 0], pairs[:, 1])),
                shape=(n, n),
            )
        return cls(n, relation_names, adjacency)

    @property
    def n(self) -> int:
        return self._n

    @property
    def relations(self) -> Tuple[str, ...]:
        return self._relations

    def _check_relation(self, relation: str) -> None:
        if relation not in self._out:
            raise GraphError(
                f"Unknown relation '{relation}'; known: {list(self._relations)}"
            )

    def edge_count(self, relation: str) -> int:
        self._check_relation(relation)
        return int(self._out[relation].nnz)

    @property
    def total_edges(self) -> int:
        return sum(self.edge_count(r) for r in self._relations)

    def edges(self, relation: str) -> np.ndarray:
        """All (src, dst) pairs of a relation, sorted by src then dst."""
        self._check_relation(relation)
        matrix = self._out[relation]
        src = np.repeat(np.arange(self._n, dtype=np.int64), np.diff(matrix.indptr))
        return np.stack([src, matrix.indices.astype(np.int64)], axis=1)

    def adjacency(self, relation: str) -> sp.csr_matrix:
        """Read-only CSR adjacency (rows = sources)."""
        self._check_relation(relation)
        return self._out[relation]

    def view(self, relation: str, reverse: bool = False) -> RelationView:
        self._check_relation(relation)
        out, inc = self._out[relation], self._in[relation]
        view = RelationView(
            relation=relation,
            n=self._n,
            indptr=out.indptr,
            indices=out.indices,
            in_indptr=inc.indptr,
            in_indices=inc.indices,
        )
        return view.flipped() if reverse else view

    def neighbor_set(self, v: int) -> np.ndarray:
        """
        Undirected neighbor set of v across all relations, v itself excluded.

        This is the N(v) used by node homophily.
        """
        parts = [np.empty(0, dtype=np.int64)]
        for name in self._relations:
            out, inc = self._out[name], self._in[name]
            parts.append(out.indices[out.indptr[v] : out.indptr[v + 1]])
            parts.append(inc.indices[inc.indptr[v] : inc.indptr[v + 1]])
        merged = np.unique(np.concatenate(parts).astype(np.int64))
        return merged[merged != v]

    def __repr__(self) -> str:
        counts = ", ".join(f"{r}={self.edge_count(r)}" for r in self._relations)
        return f"HeteroGraph(n={self._n}, {counts})"


def relation_view(g: HeteroGraph, r: str, reverse: bool = False) -> RelationView:
    """
    Extract the read-only adjacency of relation r.

    Args:
        g: Graph
        r: Registered relation name
        reverse: Walk in-edges instead of stored out-edges

    Raises:
        GraphError: If r is not registered
    """
    return g.view(r, reverse=reverse)


def load_graph(
    edges_path: Union[str, Path], n: int, relation_names: Sequence[str]
) -> HeteroGraph:
    """
    Load a graph from a TSV edge file (``src<TAB>dst<TAB>relation``, no header).

    Args:
        edges_path: Edge file path
        n: Node count
        relation_names: Relations to register, in order

    Returns:
        HeteroGraph with edges bucketed by relation and duplicates removed

    Raises:
        FileNotFoundError: If the file doesn't exist
        GraphError: On a malformed row, out-of-range id or unknown relation;
            the message names the line number
    """
    path = Path(edges_path)
    if not path.exists():
        raise FileNotFoundError(f"Edge file not found: {path}")

    known = set(relation_names)
    buckets: Dict[str, List[Tuple[int, int]]] = {r: [] for r in relation_names}
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise GraphError(
                    f"{path}:{line_no}: malformed row, expected 3 tab-separated "
                    f"fields, got {len(fields)}"
                )
            try:
                src, dst = int(fields[0]), int(fields[1])
            except ValueError as e:
                raise GraphError(
                    f"{path}:{line_no}: malformed row, non-integer node id"
                ) from e
            relation = fields[2].strip()
            if not 0 <= src < n or not 0 <= dst < n:
                raise GraphError(
                    f"{path}:{line_no}: node id out of range ({src}, {dst}) for n={n}"
                )
            if relation not in known:
                raise GraphError(
                    f"{path}:{line_no}: unknown relation '{relation}'; "
                    f"known: {list(relation_names)}"
                )
            buckets[relation].append((src, dst))

    graph = HeteroGraph.from_edges(n, relation_names, buckets)
    logger.debug(f"Loaded {graph!r} from {path}")
    return graph


def scan_edge_file(edges_path: Union[str, Path]) -> Tuple[int, List[str]]:
    """
    Smallest node count and the relation names (in first-seen order) of an edge file.

    Used when a command gets an edge file without a dataset manifest.
    """
    path = Path(edges_path)
    if not path.exists():
        raise FileNotFoundError(f"Edge file not found: {path}")
    top = -1
    relations: List[str] = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            fields = line.rstrip("\r\n").split("\t")
            if not line.strip():
                continue
            if len(fields) != 3:
                raise GraphError(f"{path}:{line_no}: malformed row, expected 3 fields")
            try:
                top = max(top, int(fields[0]), int(fields[1]))
            except ValueError as e:
                raise GraphError(
                    f"{path}:{line_no}: malformed row, non-integer node id"
                ) from e
            relation = fields[2].strip()
            if relation not in relations:
                relations.append(relation)
    return top + 1, relations


def save_graph(g: HeteroGraph, edges_path: Union[str, Path]) -> Path:
    """Write a graph as a TSV edge file, relation by relation."""
    lines: List[str] = []
    for relation in g.relations:
        for src, dst in g.edges(relation):
            lines.append(f"{src}\t{dst}\t{relation}")
    text = "\n".join(lines) + ("\n" if lines else "")
    return atomic_write_bytes(edges_path, text.encode("utf-8"))


@dataclass(frozen=True, eq=False)
class LabelSet:
    """
    Node labels (BOT=1, HUMAN=0, UNLABELED=-1) and disjoint splits.

    Attributes:
        labels: int8 array of length n
        train / val / test: sorted node-id arrays
    """

    labels: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self) -> None:
        for name in SPLIT_NAMES:
            members = getattr(self, name)
            if len(np.unique(members)) != len(members):
                raise GraphError(f"Duplicate node ids inside split '{name}'")
        for i, first in enumerate(SPLIT_NAMES):
            for second in SPLIT_NAMES[i + 1 :]:
                shared = np.intersect1d(getattr(self, first), getattr(self, second))
                if shared.size:
                    raise GraphError(
                        f"overlapping splits: node {int(shared[0])} is in both "
                        f"'{first}' and '{second}'"
                    )
        for name in SPLIT_NAMES:
            members = getattr(self, name)
            unlabeled = members[self.labels[members] == UNLABELED]
            if unlabeled.size:
                raise GraphError(
                    f"unlabeled split member: node {int(unlabeled[0])} in '{name}'"
                )
        for array in (self.labels, self.train, self.val, self.test):
            _freeze(array)

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    def split(self, name: str) -> np.ndarray:
        if name not in SPLIT_NAMES:
            raise GraphError(f"Unknown split '{name}'; expected one of {SPLIT_NAMES}")
        return getattr(self, name)

    @property
    def fitting(self) -> np.ndarray:
        """Train and validation nodes together, sorted."""
        return np.union1d(self.train, self.val)

    def is_labeled(self, v: int) -> bool:
        return bool(self.labels[v] != UNLABELED)

    @classmethod
    def from_arrays(
        cls,
        labels: np.ndarray,
        train: Iterable[int],
        val: Iterable[int] = (),
        test: Iterable[int] = (),
    ) -> "LabelSet":
        return cls(
            labels=np.asarray(labels, dtype=np.int8).copy(),
            train=np.sort(np.asarray(list(train), dtype=np.int64)),
            val=np.sort(np.asarray(list(val), dtype=np.int64)),
            test=np.sort(np.asarray(list(test), dtype=np.int64)),
        )


def load_labels(
    labels_path: Union[str, Path], splits_path: Optional[Union[str, Path]], n: int
) -> LabelSet:
    """
    Load labels (``node_id<TAB>{0|1}``) and splits (``[train]``/``[val]``/``[test]``
    sections with one node id per line).

    With ``splits_path=None`` every split is empty.

    Raises:
        GraphError: On malformed rows, ids outside [0, n), a node listed in two
            splits, or a split member without a label
    """
    labels_path = Path(labels_path)
    paths = [labels_path] if splits_path is None else [labels_path, Path(splits_path)]
    for path in paths:
        if not path.exists():
            raise FileNotFoundError(f"Label file not found: {path}")

    labels = np.full(n, UNLABELED, dtype=np.int8)
    with open(labels_path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            fields = line.strip().split("\t")
            if len(fields) != 2 or fields[1] not in ("0", "1"):
                raise GraphError(
                    f"{labels_path}:{line_no}: expected 'node_id<TAB>0|1', "
                    f"got {line.strip()!r}"
                )
            try:
                node = int(fields[0])
            except ValueError as e:
                raise GraphError(f"{labels_path}:{line_no}: non-integer node id") from e
            if not 0 <= node < n:
                raise GraphError(
                    f"{labels_path}:{line_no}: labeled id {node} out of range for n={n}"
                )
            labels[node] = int(fields[1])

    splits: Dict[str, List[int]] = {name: [] for name in SPLIT_NAMES}
    current: Optional[str] = None
    split_lines: List[str] = []
    if splits_path is not None:
        split_lines = Path(splits_path).read_text(encoding="utf-8").splitlines()
    for line_no, line in enumerate(split_lines, start=1):
        text = line.strip()
        if not text:
            continue
        if text.startswith("[") and text.endswith("]"):
            current = text[1:-1].strip()
            if current not in splits:
                raise GraphError(
                    f"{splits_path}:{line_no}: unknown split header {text}"
                )
            continue
        if current is None:
            raise GraphError(
                f"{splits_path}:{line_no}: node id before any split header"
            )
        try:
            node = int(text)
        except ValueError as e:
            raise GraphError(f"{splits_path}:{line_no}: non-integer node id") from e
        if not 0 <= node < n:
            raise GraphError(
                f"{splits_path}:{line_no}: split node {node} out of range for n={n}"
            )
        splits[current].append(node)

    label_set = LabelSet.from_arrays(
        labels, splits["train"], splits["val"], splits["test"]
    )
    logger.debug(
        f"Loaded labels: {int((labels != UNLABELED).sum())} labeled, "
        f"splits train={len(label_set.train)} val={len(label_set.val)} "
        f"test={len(label_set.test)}"
    )
    return label_set


def save_labels(
    labels: LabelSet, labels_path: Union[str, Path], splits_path: Union[str, Path]
) -> None:
    """Write a LabelSet in the formats read by load_labels()."""
    rows = [f"{v}\t{int(y)}" for v, y in enumerate(labels.labels) if y != UNLABELED]
    atomic_write_bytes(labels_path, ("\n".join(rows) + "\n").encode("utf-8"))
    sections: List[str] = []
    for name in SPLIT_NAMES:
        sections.append(f"[{name}]")
        sections.extend(str(int(v)) for v in labels.split(name))
    atomic_write_bytes(splits_path, ("\n".join(sections) + "\n").encode("utf-8"))
