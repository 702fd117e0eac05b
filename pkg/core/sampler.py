"""
Biased heterogeneous subgraphs and homophily measurements.

For a start node v and each relation r, candidates are the nodes reached by
the approximate PPR vector of v. Each candidate u is scored

    p(u) = lam * ppr(u) + (1 - lam) * similarity(v, u)

with similarity taken from the pre-classifier's hidden representations, and
the k best candidates are kept. The subgraph of r holds the original r-edges
among {v} and the selected nodes, plus a star edge v -> u for every selected u.
The union over relations is the biased subgraph of v.

Subgraphs are computed once and stored in a versioned binary cache, which is
also the export format for external consumers.
"""

import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from core.graph import BOT, HUMAN, UNLABELED, HeteroGraph, LabelSet
from core.ppr import DEFAULT_ALPHA, DEFAULT_EPS, approx_ppr
from core.preclassifier import similarity_to
from lib.logger import get_logger
from lib.utils import atomic_write_bytes, format_bytes

CACHE_MAGIC = b"BOTGBSG\x00"
CACHE_VERSION = 1
HOMOPHILY_BINS = (0.0, 0.25, 0.5, 0.75, 1.0)

logger = get_logger()


class SamplerError(Exception):
    """
    Exception raised for sampling and homophily errors.

    Used for out-of-range start nodes, invalid k or lambda, unlabeled nodes in
    homophily queries, and malformed cache files.
    """


@dataclass(frozen=True, eq=False)
class BiasedSubgraph:
    """
    Selection of one start node, with per-relation local edges.

    Attributes:
        start: Global id of the start node (local id 0)
        k: Selection size limit per relation
        relations: Relation names, in graph order
        node_ids: Local -> global id map; start first, then the selected union ascending
        selected: relation -> selected global ids, best first
        scores: relation -> combined score of each selected node
        edges: relation -> E x 2 local (src, dst) pairs, sorted
    """

    start: int
    k: int
    relations: Tuple[str, ...]
    node_ids: np.ndarray
    selected: Dict[str, np.ndarray]
    scores: Dict[str, np.ndarray]
    edges: Dict[str, np.ndarray]
    _local: Dict[int, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "_local", {int(g): i for i, g in enumerate(self.node_ids.tolist())}
        )

    @property
    def n_local(self) -> int:
        return int(self.node_ids.shape[0])

    def local_id(self, global_id: int) -> int:
        try:
            return self._local[int(global_id)]
        except KeyError as e:
            raise SamplerError(
                f"node {global_id} is not in the subgraph of {self.start}"
            ) from e

    def global_edges(self, relation: str) -> np.ndarray:
        """Edges of a relation in global ids."""
        edges = self.edges[relation]
        if not len(edges):
            return np.empty((0, 2), dtype=np.int64)
        return self.node_ids[edges]

    def neighborhood(self) -> np.ndarray:
        """Union of the selected nodes over all relations, ascending."""
        return self.node_ids[1:]


@dataclass
class HomophilyReport:
    """
    Node homophily summary of a graph or of a set of subgraphs.

    Attributes:
        node_values: node -> homophily, only nodes where it is defined
        graph_homophily: Mean of node_values
        histogram: Counts over [0,.25), [.25,.5), [.5,.75), [.75,1]
        class_means: "bot"/"human" -> mean homophily (classes without values omitted)
        source: "graph" or "subgraphs"
    """

    node_values: Dict[int, float]
    graph_homophily: float
    histogram: List[int]
    class_means: Dict[str, float]
    source: str = "graph"

    def to_dict(self) -> Dict[str, object]:
        return {
            "source": self.source,
            "h": self.graph_homophily,
            "class_means": self.class_means,
            "histogram": {
                "bins": [
                    list(pair) for pair in zip(HOMOPHILY_BINS[:-1], HOMOPHILY_BINS[1:])
                ],
                "counts": self.histogram,
            },
            "defined_nodes": len(self.node_values),
        }

    def bin_of(self, value: float) -> int:
        return homophily_bin(value)


HomophilySource = Union[HeteroGraph, Sequence[BiasedSubgraph]]
LabelInput = Union[LabelSet, np.ndarray]

_UNDEFINED_GRAPH_HOMOPHILY = (
    "graph homophily is undefined: no labeled node has labeled neighbors"
)


def _concat(parts: Sequence[np.ndarray]) -> np.ndarray:
    if not parts:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(parts).astype(np.int64)


def _label_array(labels: LabelInput) -> np.ndarray:
    return labels.labels if isinstance(labels, LabelSet) else np.asarray(labels)


def homophily_bin(value: float) -> int:
    """Index of the histogram bin holding value; 1.0 falls in the last bin."""
    return min(int(value * 4), 3)


def node_homophily(
    neighbors: Iterable[int], labels: LabelInput, v: int
) -> Optional[float]:
    """
    Fraction of v's labeled neighbors that share v's label.

    v itself is ignored if listed. Returns None when v has no labeled neighbor.

    Raises:
        SamplerError: If v is unlabeled

    Example:
        >>> node_homophily([1, 2, 3, 4], np.array([1, 1, 0, 1, 0]), 0)
        0.5
    """
    y = _label_array(labels)
    if y[v] == UNLABELED:
        raise SamplerError(
            f"node {v} is unlabeled; homophily is defined for labeled nodes"
        )
    same = total = 0
    for u in set(int(u) for u in neighbors):
        if u == v or y[u] == UNLABELED:
            continue
        total += 1
        same += int(y[u] == y[v])
    if total == 0:
        return None
    return same / total


def _neighborhoods(
    source: HomophilySource, labels: np.ndarray
) -> Iterable[Tuple[int, np.ndarray]]:
    if isinstance(source, HeteroGraph):
        for v in np.flatnonzero(labels != UNLABELED).tolist():
            yield v, source.neighbor_set(v)
    else:
        for subgraph in source:
            if labels[subgraph.start] != UNLABELED:
                yield subgraph.start, subgraph.neighborhood()


def node_homophilies(source: HomophilySource, labels: LabelInput) -> Dict[int, float]:
    """Defined homophilies of labeled nodes (graph) or start nodes (subgraphs)."""
    y = _label_array(labels)
    values: Dict[int, float] = {}
    for v, neighbors in _neighborhoods(source, y):
        value = node_homophily(neighbors, y, v)
        if value is not None:
            values[v] = value
    return values


def graph_homophily(source: HomophilySource, labels: LabelInput) -> float:
    """
    Mean of the defined node homophilies.

    Raises:
        SamplerError: If no node has a defined homophily
    """
    values = node_homophilies(source, labels)
    if not values:
        raise SamplerError(_UNDEFINED_GRAPH_HOMOPHILY)
    return float(np.mean(list(values.values())))


def homophily_report(source: HomophilySource, labels: LabelInput) -> HomophilyReport:
    """
    Node homophily distribution, overall and per class.

    For subgraphs, each start node is measured against its selected nodes.

    Raises:
        SamplerError: If no node has a defined homophily
    """
    y = _label_array(labels)
    values = node_homophilies(source, y)
    if not values:
        raise SamplerError(_UNDEFINED_GRAPH_HOMOPHILY)

    histogram = [0, 0, 0, 0]
    for value in values.values():
        histogram[homophily_bin(value)] += 1

    class_means: Dict[str, float] = {}
    for name, cls in (("bot", BOT), ("human", HUMAN)):
        members = [h for v, h in values.items() if y[v] == cls]
        if members:
            class_means[name] = float(np.mean(members))

    return HomophilyReport(
        node_values=values,
        graph_homophily=float(np.mean(list(values.values()))),
        histogram=histogram,
        class_means=class_means,
        source="graph" if isinstance(source, HeteroGraph) else "subgraphs",
    )


def combined_scores(
    ppr: Union[np.ndarray, Mapping[int, float]],
    sims: Union[np.ndarray, Mapping[int, float]],
    lam: float = 0.5,
) -> Union[np.ndarray, Dict[int, float]]:
    """
    ``lam * ppr + (1 - lam) * sims`` per candidate.

    Arrays are combined elementwise; mappings are combined over the keys of
    ``ppr`` (the candidate pool), missing similarities counting as 0.

    Raises:
        SamplerError: If lam lies outside [0, 1]

    Example:
        >>> round(float(combined_scores(np.array([0.4]), np.array([0.8]), 0.5)[0]), 6)
        0.6
    """
    if not 0.0 <= lam <= 1.0:
        raise SamplerError(f"lambda must lie in [0, 1], got {lam}")
    if isinstance(ppr, Mapping):
        sims_map = sims if isinstance(sims, Mapping) else {}
        return {u: lam * p + (1.0 - lam) * sims_map.get(u, 0.0) for u, p in ppr.items()}
    ppr_arr = np.asarray(ppr, dtype=np.float64)
    return lam * ppr_arr + (1.0 - lam) * np.asarray(sims, dtype=np.float64)


def select_top_k(
    ids: np.ndarray, scores: np.ndarray, ppr: np.ndarray, k: int
) -> np.ndarray:
    """
    Positions of the k best candidates: highest score, then highest PPR, then lowest id.
    """
    if len(ids) == 0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((ids, -ppr, -scores))
    return order[:k]


def _relation_edges(
    g: HeteroGraph, relation: str, members: np.ndarray, start: int, selected: np.ndarray
) -> np.ndarray:
    """Original edges among members plus the star, as global (src, dst) pairs."""
    view = g.view(relation)
    pairs = set()
    for u in members.tolist():
        targets = view.out_neighbors(u)
        for w in targets[np.isin(targets, members)].tolist():
            pairs.add((u, w))
    for u in selected.tolist():
        pairs.add((start, u))
    if not pairs:
        return np.empty((0, 2), dtype=np.int64)
    return np.array(sorted(pairs), dtype=np.int64)


def build_biased_subgraph(
    g: HeteroGraph,
    v: int,
    k: int,
    hidden: Optional[np.ndarray] = None,
    alpha: float = DEFAULT_ALPHA,
    eps: float = DEFAULT_EPS,
    lam: float = 0.5,
    reverse: bool = False,
) -> BiasedSubgraph:
    """
    Build the biased subgraph of start node v.

    Args:
        g: Graph
        v: Start node
        k: Nodes selected per relation
        hidden: n x h pre-classifier hidden representations of all nodes
            (see core.preclassifier.hidden_repr); may be None only when lam = 1
        alpha: PPR teleport probability
        eps: PPR tolerance
        lam: Weight of PPR in the combined score
        reverse: Run PPR over in-edges

    Returns:
        BiasedSubgraph; relations where v has no PPR support contribute no
        selected nodes and no edges

    Raises:
        SamplerError: On an invalid start node, k, lambda or missing hidden matrix
    """
    if not 0 <= v < g.n:
        raise SamplerError(f"start node {v} out of range for n={g.n}")
    if k < 1:
        raise SamplerError(f"k must be >= 1, got {k}")
    if not 0.0 <= lam <= 1.0:
        raise SamplerError(f"lambda must lie in [0, 1], got {lam}")
    if lam < 1.0 and hidden is None:
        raise SamplerError(
            "similarity-biased sampling needs the hidden representation matrix"
        )

    selected: Dict[str, np.ndarray] = {}
    scores: Dict[str, np.ndarray] = {}
    for relation in g.relations:
        vector = approx_ppr(g.view(relation, reverse=reverse), v, alpha, eps)
        ids, pi = vector.as_arrays()
        keep = ids != v
        ids, pi = ids[keep], pi[keep]
        sims = similarity_to(hidden, v, ids) if lam < 1.0 else np.zeros_like(pi)
        combined = combined_scores(pi, sims, lam)
        top = select_top_k(ids, combined, pi, k)
        selected[relation] = ids[top]
        scores[relation] = np.asarray(combined)[top]

    union = np.unique(_concat(list(selected.values())))
    node_ids = np.concatenate([[v], union[union != v]]).astype(np.int64)
    local = {int(gid): i for i, gid in enumerate(node_ids.tolist())}

    edges: Dict[str, np.ndarray] = {}
    for relation in g.relations:
        members = np.concatenate([[v], selected[relation]]).astype(np.int64)
        global_pairs = _relation_edges(g, relation, members, v, selected[relation])
        edges[relation] = np.array(
            [[local[a], local[b]] for a, b in global_pairs.tolist()], dtype=np.int64
        ).reshape(-1, 2)

    return BiasedSubgraph(
        start=v,
        k=k,
        relations=g.relations,
        node_ids=node_ids,
        selected=selected,
        scores=scores,
        edges=edges,
    )


# Subgraph cache
#
# File: magic, header (version, relation count, record count), relation names
# as length-prefixed UTF-8, then one record per start node:
#   (start, k, relation count, local node count), node ids (i8), and per
#   relation (selected count, edge count), selected ids (i8), scores (f8),
#   local edges (i4 pairs).

_FILE_HEADER = struct.Struct("<III")
_RECORD_HEADER = struct.Struct("<qIII")
_RELATION_HEADER = struct.Struct("<II")
_NAME_LENGTH = struct.Struct("<H")


@dataclass
class SubgraphCache:
    """Subgraphs keyed by start node, all over the same relations."""

    relations: Tuple[str, ...]
    subgraphs: Dict[int, BiasedSubgraph] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.subgraphs)

    def __contains__(self, v: int) -> bool:
        return int(v) in self.subgraphs

    def get(self, v: int) -> BiasedSubgraph:
        try:
            return self.subgraphs[int(v)]
        except KeyError as e:
            raise SamplerError(f"no cached subgraph for start node {v}") from e

    @property
    def starts(self) -> List[int]:
        return sorted(self.subgraphs)

    def missing(self, nodes: Iterable[int]) -> List[int]:
        return [int(v) for v in nodes if int(v) not in self.subgraphs]

    def ordered(self) -> List[BiasedSubgraph]:
        return [self.subgraphs[v] for v in self.starts]


def _encode_record(subgraph: BiasedSubgraph) -> bytes:
    parts = [
        _RECORD_HEADER.pack(
            subgraph.start, subgraph.k, len(subgraph.relations), subgraph.n_local
        ),
        np.ascontiguousarray(subgraph.node_ids, dtype="<i8").tobytes(),
    ]
    for relation in subgraph.relations:
        chosen = subgraph.selected[relation]
        edges = subgraph.edges[relation]
        parts.append(_RELATION_HEADER.pack(len(chosen), len(edges)))
        parts.append(np.ascontiguousarray(chosen, dtype="<i8").tobytes())
        scores = subgraph.scores[relation]
        parts.append(np.ascontiguousarray(scores, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(edges, dtype="<i4").tobytes())
    return b"".join(parts)


class SubgraphCacheWriter:
    """
    Collects subgraphs from concurrent producers and writes one cache file.

    Appends are serialized by a lock; records are written ordered by start
    node, so the file does not depend on completion order.
    """

    def __init__(self, path: Union[str, Path], relations: Sequence[str]):
        self.path = Path(path)
        self.relations = tuple(relations)
        self._records: Dict[int, bytes] = {}
        self._lock = threading.Lock()

    def append(self, subgraph: BiasedSubgraph) -> None:
        if subgraph.relations != self.relations:
            raise SamplerError(
                f"subgraph relations {subgraph.relations} differ from "
                f"cache relations {self.relations}"
            )
        record = _encode_record(subgraph)
        with self._lock:
            self._records[subgraph.start] = record

    def __len__(self) -> int:
        return len(self._records)

    def close(self) -> Path:
        with self._lock:
            names = b"".join(
                _NAME_LENGTH.pack(len(name.encode("utf-8"))) + name.encode("utf-8")
                for name in self.relations
            )
            header = CACHE_MAGIC + _FILE_HEADER.pack(
                CACHE_VERSION, len(self.relations), len(self._records)
            )
            body = b"".join(self._records[v] for v in sorted(self._records))
            payload = header + names + body
            path = atomic_write_bytes(self.path, payload)
        size = format_bytes(len(payload))
        logger.info(f"Wrote {len(self._records)} subgraphs to {path} ({size})")
        return path


def write_cache(
    path: Union[str, Path],
    subgraphs: Iterable[BiasedSubgraph],
    relations: Sequence[str],
) -> Path:
    """Write subgraphs to a cache file."""
    writer = SubgraphCacheWriter(path, relations)
    for subgraph in subgraphs:
        writer.append(subgraph)
    return writer.close()


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw = raw
        self.offset = 0
        self.path = path

    def unpack(self, layout: struct.Struct) -> Tuple:
        try:
            values = layout.unpack_from(self.raw, self.offset)
        except struct.error as e:
            raise SamplerError(
                f"{self.path}: truncated cache at byte {self.offset}"
            ) from e
        self.offset += layout.size
        return values

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.offset + size > len(self.raw):
            raise SamplerError(f"{self.path}: truncated cache at byte {self.offset}")
        values = np.frombuffer(self.raw, dtype=dtype, count=count, offset=self.offset)
        self.offset += size
        return values.copy()

    def text(self) -> str:
        (length,) = self.unpack(_NAME_LENGTH)
        data = self.raw[self.offset : self.offset + length]
        self.offset += length
        return data.decode("utf-8")


def read_cache(path: Union[str, Path]) -> SubgraphCache:
    """
    Read a cache file written by SubgraphCacheWriter.

    Raises:
        SamplerError: On a bad magic string, unknown version or truncated data
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Subgraph cache not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(CACHE_MAGIC):
        raise SamplerError(f"{path}: not a subgraph cache file")
    reader = _Reader(raw, path)
    reader.offset = len(CACHE_MAGIC)
    version, relation_count, record_count = reader.unpack(_FILE_HEADER)
    if version != CACHE_VERSION:
        raise SamplerError(f"{path}: unsupported cache version {version}")
    relations = tuple(reader.text() for _ in range(relation_count))

    cache = SubgraphCache(relations=relations)
    for _ in range(record_count):
        start, k, r_count, n_local = reader.unpack(_RECORD_HEADER)
        if r_count != relation_count:
            raise SamplerError(
                f"{path}: record of node {start} has {r_count} relations"
            )
        node_ids = reader.array("<i8", n_local).astype(np.int64)
        selected, scores, edges = {}, {}, {}
        for relation in relations:
            n_selected, n_edges = reader.unpack(_RELATION_HEADER)
            selected[relation] = reader.array("<i8", n_selected).astype(np.int64)
            scores[relation] = reader.array("<f8", n_selected).astype(np.float64)
            flat = reader.array("<i4", 2 * n_edges).astype(np.int64)
            edges[relation] = flat.reshape(-1, 2)
        cache.subgraphs[int(start)] = BiasedSubgraph(
            start=int(start),
            k=int(k),
            relations=relations,
            node_ids=node_ids,
            selected=selected,
            scores=scores,
            edges=edges,
        )
    if reader.offset != len(raw):
        raise SamplerError(f"{path}: {len(raw) - reader.offset} trailing bytes")
    return cache


def export_subgraphs(cache: SubgraphCache, path: Union[str, Path]) -> Path:
    """
    Write the cached subgraphs as a compressed edge-index bundle (``.npz``).

    Arrays:
        node_ids: concatenated local -> global maps
        ptr: offsets of each subgraph in node_ids (length m + 1)
        starts: start node of each subgraph
        edge_index: 2 x E edges, indices into node_ids
        edge_type: relation index of each edge
        relations: relation names
    """
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    node_parts: List[np.ndarray] = []
    edge_parts: List[np.ndarray] = []
    type_parts: List[np.ndarray] = []
    ptr = [0]
    for subgraph in cache.ordered():
        offset = ptr[-1]
        node_parts.append(subgraph.node_ids)
        for index, relation in enumerate(cache.relations):
            edges = subgraph.edges[relation]
            edge_parts.append(edges + offset)
            type_parts.append(np.full(len(edges), index, dtype=np.int64))
        ptr.append(offset + subgraph.n_local)

    edge_index = (
        np.concatenate(edge_parts).T if edge_parts else np.empty((2, 0), dtype=np.int64)
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        path,
        node_ids=_concat(node_parts),
        ptr=np.asarray(ptr, dtype=np.int64),
        starts=np.asarray(cache.starts, dtype=np.int64),
        edge_index=edge_index.reshape(2, -1).astype(np.int64),
        edge_type=_concat(type_parts),
        relations=np.asarray(cache.relations),
    )
    logger.info(f"Exported {len(cache)} subgraphs to {path}")
    return path
