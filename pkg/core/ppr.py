"""
Personalized PageRank per relation.

``approx_ppr`` runs the forward-push approximation: residual mass starts at 1
on the start node and is pushed along out-edges of the relation view until
every node holds less than ``eps * max(1, degree)``. ``exact_ppr_oracle``
solves the same linear system densely and exists for verification on small
graphs.

Nodes without out-edges send their walk mass back to the start node, so both
methods describe the same stochastic operator.
"""

import heapq
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from core.graph import RelationView
from lib.logger import get_logger
from lib.utils import atomic_write_bytes

DEFAULT_ALPHA = 0.15
DEFAULT_EPS = 1e-4
ORACLE_MAX_NODES = 2000

logger = get_logger()


class PprError(Exception):
    """
    Exception raised for PPR errors.

    Used for invalid teleport probabilities and tolerances, start nodes out of
    range, and oracle requests above the dense-solve guard.
    """


@dataclass(eq=False)
class PprVector:
    """
    Sparse PPR estimate of one start node.

    Attributes:
        start: Start node v
        alpha: Teleport probability
        eps: Push tolerance the vector was computed to
        estimates: node -> estimated score (only touched nodes)
        residuals: node -> residual mass not yet pushed
        relation: Relation the vector was computed on
        pushes: Number of push operations performed
    """

    start: int
    alpha: float
    eps: float
    estimates: Dict[int, float] = field(default_factory=dict)
    residuals: Dict[int, float] = field(default_factory=dict)
    relation: str = ""
    pushes: int = 0

    def estimate(self, u: int) -> float:
        return self.estimates.get(u, 0.0)

    def total_mass(self) -> float:
        """Estimate mass plus residual mass; 1 up to rounding."""
        return sum(self.estimates.values()) + sum(self.residuals.values())

    def support(self) -> np.ndarray:
        """Sorted ids of nodes with a nonzero estimate."""
        ids = sorted(u for u, p in self.estimates.items() if p > 0)
        return np.array(ids, dtype=np.int64)

    def as_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """(support ids, their estimates), ids ascending."""
        ids = self.support()
        values = [self.estimates[u] for u in ids.tolist()]
        return ids, np.array(values, dtype=np.float64)

    def ranked(self) -> List[Tuple[int, float]]:
        """(node, score) pairs by descending score, ties by ascending id."""
        return sorted(
            ((u, p) for u, p in self.estimates.items() if p > 0),
            key=lambda item: (-item[1], item[0]),
        )

    def dense(self, n: int) -> np.ndarray:
        out = np.zeros(n, dtype=np.float64)
        for u, p in self.estimates.items():
            out[u] = p
        return out


PushObserver = Callable[[PprVector], None]


def _validate(alpha: float, eps: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise PprError(f"alpha must lie in (0, 1), got {alpha}")
    if not eps > 0.0:
        raise PprError(f"eps must be positive, got {eps}")


def _push(
    vector: PprVector, view: RelationView, on_push: Optional[PushObserver]
) -> PprVector:
    """Push residual mass until no node is active; lowest active id first."""
    alpha, eps, start = vector.alpha, vector.eps, vector.start
    degrees = view.degrees
    estimates, residuals = vector.estimates, vector.residuals

    def threshold(u: int) -> float:
        return eps * max(1, int(degrees[u]))

    queued: Set[int] = {u for u, r in residuals.items() if r >= threshold(u)}
    heap: List[int] = sorted(queued)

    while heap:
        u = heapq.heappop(heap)
        queued.discard(u)
        mass = residuals.get(u, 0.0)
        if mass < threshold(u):
            continue

        residuals[u] = 0.0
        estimates[u] = estimates.get(u, 0.0) + alpha * mass
        outflow = (1.0 - alpha) * mass
        neighbors = view.out_neighbors(u).tolist()
        if neighbors:
            share = outflow / len(neighbors)
            targets = neighbors
        else:
            share = outflow
            targets = [start]

        for w in targets:
            residuals[w] = residuals.get(w, 0.0) + share
            if w not in queued and residuals[w] >= threshold(w):
                queued.add(w)
                heapq.heappush(heap, w)

        vector.pushes += 1
        if on_push is not None:
            on_push(vector)

    for u in [u for u, r in residuals.items() if r == 0.0]:
        del residuals[u]
    return vector


def approx_ppr(
    view: RelationView,
    v: int,
    alpha: float = DEFAULT_ALPHA,
    eps: float = DEFAULT_EPS,
    on_push: Optional[PushObserver] = None,
) -> PprVector:
    """
    Forward-push approximation of the PPR vector of v.

    Args:
        view: Relation to walk (its out-neighbors)
        v: Start node
        alpha: Teleport probability in (0, 1)
        eps: Tolerance; pushing stops once r(u) < eps * max(1, degree(u)) everywhere
        on_push: Called with the live vector after every push

    Returns:
        PprVector whose residuals all satisfy the stopping rule

    Raises:
        PprError: On invalid alpha, eps or start node

    Example:
        >>> from core.graph import HeteroGraph
        >>> g = HeteroGraph.from_edges(2, ["follow"], {"follow": [(0, 1), (1, 0)]})
        >>> vec = approx_ppr(g.view("follow"), 0, alpha=0.5, eps=1e-10)
        >>> round(vec.estimate(0), 6)
        0.666667
    """
    _validate(alpha, eps)
    if not 0 <= v < view.n:
        raise PprError(f"start node {v} out of range for n={view.n}")
    vector = PprVector(
        start=v, alpha=alpha, eps=eps, residuals={v: 1.0}, relation=view.relation
    )
    return _push(vector, view, on_push)


def refine_ppr(
    vector: PprVector,
    view: RelationView,
    eps: float,
    on_push: Optional[PushObserver] = None,
) -> PprVector:
    """
    Continue pushing an existing vector down to a smaller tolerance.

    The input is left untouched. Estimates of the returned vector are
    pointwise >= those of the input.

    Raises:
        PprError: If eps is larger than the vector's tolerance
    """
    _validate(vector.alpha, eps)
    if eps > vector.eps:
        raise PprError(
            f"refinement tolerance {eps} is larger than the current {vector.eps}"
        )
    refined = PprVector(
        start=vector.start,
        alpha=vector.alpha,
        eps=eps,
        estimates=dict(vector.estimates),
        residuals=dict(vector.residuals),
        relation=vector.relation,
        pushes=vector.pushes,
    )
    return _push(refined, view, on_push)


def exact_ppr_oracle(
    view: RelationView, v: int, alpha: float = DEFAULT_ALPHA
) -> np.ndarray:
    """
    Dense PPR vector from a direct linear solve.

    Solves ``pi = alpha * e_v + (1 - alpha) * P^T pi`` where P is the
    row-stochastic transition matrix over out-neighbors and dangling rows jump
    to v.

    Raises:
        PprError: If n exceeds the dense-solve guard or alpha is invalid
    """
    _validate(alpha, 1.0)
    n = view.n
    if n > ORACLE_MAX_NODES:
        raise PprError(f"dense oracle limited to n <= {ORACLE_MAX_NODES}, got n={n}")
    if not 0 <= v < n:
        raise PprError(f"start node {v} out of range for n={n}")

    transition = np.zeros((n, n), dtype=np.float64)
    for u in range(n):
        neighbors = view.out_neighbors(u)
        if len(neighbors):
            transition[u, neighbors] = 1.0 / len(neighbors)
        else:
            transition[u, v] = 1.0
    system = np.eye(n) - (1.0 - alpha) * transition.T
    rhs = np.zeros(n, dtype=np.float64)
    rhs[v] = alpha
    return np.linalg.solve(system, rhs)


def ppr_batch(
    view: RelationView,
    starts: Sequence[int],
    alpha: float = DEFAULT_ALPHA,
    eps: float = DEFAULT_EPS,
    workers: int = 1,
) -> List[PprVector]:
    """approx_ppr for many start nodes, results in input order."""
    if workers <= 1:
        return [approx_ppr(view, int(v), alpha, eps) for v in starts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda v: approx_ppr(view, int(v), alpha, eps), starts))


def write_ppr_scores(vector: PprVector, path: Union[str, Path]) -> Path:
    """Write ``node<TAB>score`` rows, highest score first."""
    lines = [f"{u}\t{p:.12g}" for u, p in vector.ranked()]
    text = "\n".join(lines) + ("\n" if lines else "")
    return atomic_write_bytes(path, text.encode("utf-8"))
