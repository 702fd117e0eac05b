"""
Engineered user features and feature-matrix assembly.

Per-user vectors are the concatenation of six named blocks, in this order:
description embedding, tweet embedding, numerical metadata, categorical
metadata, tweet content categories, and tweet temporal activity. The first four
arrive precomputed from files; the last two are computed here:

- content categories: all tweets are clustered with k-means (k=20), then each
  user gets the z-scored number of distinct clusters touched followed by the
  share of their tweets in each cluster;
- temporal activity: the share of a user's tweets posted in each of the last
  12 months, missing months filled with zero.

Learnable projections of these blocks belong to the consuming models; this
module stays deterministic and model-free.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from lib.logger import get_logger
from lib.matrix_io import read_feature_file, read_matrix, write_feature_file

BLOCK_ORDER = ("description", "tweet", "num_meta", "cat_meta", "category", "temporal")

DEFAULT_CATEGORIES = 20
DEFAULT_MAX_TWEETS = 200
DEFAULT_WINDOW = 12

# Rows of the squared-distance matrix evaluated at once in k-means.
_DISTANCE_CHUNK = 4096

logger = get_logger()


class FeatureError(Exception):
    """
    Exception raised for feature computation and assembly errors.

    Used for non-finite values, shape mismatches, too few points to cluster and
    invalid activity counts.
    """


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """
    Dense n x s per-node features with their block schema.

    Attributes:
        values: float64 array (read-only)
        schema: ordered (block name, width) pairs summing to s
    """

    values: np.ndarray
    schema: Tuple[Tuple[str, int], ...]

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise FeatureError(
                f"Feature values must be 2-D, got shape {self.values.shape}"
            )
        width = sum(w for _, w in self.schema)
        if width != self.values.shape[1]:
            raise FeatureError(
                f"Schema widths sum to {width} but matrix has "
                f"{self.values.shape[1]} columns"
            )
        if not np.all(np.isfinite(self.values)):
            raise FeatureError("Feature matrix contains NaN or Inf entries")
        self.values.setflags(write=False)

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    @property
    def s(self) -> int:
        return int(self.values.shape[1])

    def block_slice(self, name: str) -> slice:
        start = 0
        for block, width in self.schema:
            if block == name:
                return slice(start, start + width)
            start += width
        raise FeatureError(f"No block named '{name}' in schema {list(self.schema)}")

    def block(self, name: str) -> np.ndarray:
        return self.values[:, self.block_slice(name)]

    def rows(self, nodes: Union[Sequence[int], np.ndarray]) -> np.ndarray:
        return self.values[np.asarray(nodes, dtype=np.int64)]

    def without(self, names: Sequence[str]) -> "FeatureMatrix":
        """Copy with the named blocks removed (feature-block ablations)."""
        unknown = [name for name in names if name not in dict(self.schema)]
        if unknown:
            raise FeatureError(f"Cannot drop unknown blocks {unknown}")
        keep = [(b, w) for b, w in self.schema if b not in names]
        if not keep:
            raise FeatureError("Dropping every block leaves an empty feature matrix")
        columns = np.concatenate(
            [
                np.arange(self.block_slice(b).start, self.block_slice(b).stop)
                for b, _ in keep
            ]
        )
        return FeatureMatrix(self.values[:, columns].copy(), tuple(keep))


@dataclass(frozen=True, eq=False)
class KMeansResult:
    """
    Outcome of a k-means run.

    Attributes:
        centroids: k x d matrix
        assignments: per-point index of the nearest centroid (ties -> lowest)
        inertia: sum of squared distances to the assigned centroids
        inertia_history: inertia after every assignment step, non-increasing
        iterations: number of refinement iterations performed
    """

    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    inertia_history: Tuple[float, ...] = field(default=())
    iterations: int = 0


def _assign(points: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, float]:
    assignments = np.empty(points.shape[0], dtype=np.int64)
    inertia = 0.0
    for start in range(0, points.shape[0], _DISTANCE_CHUNK):
        chunk = points[start : start + _DISTANCE_CHUNK]
        dist = ((chunk[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        # argmin returns the first minimum, i.e. the lowest centroid index on ties
        nearest = np.argmin(dist, axis=1)
        assignments[start : start + len(chunk)] = nearest
        inertia += float(dist[np.arange(len(chunk)), nearest].sum())
    return assignments, inertia


def _seed_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(0, m)]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(m, p=closest / total))
        else:
            # every point coincides with a chosen centroid
            idx = int(rng.integers(0, m))
        centroids[i] = points[idx]
        closest = np.minimum(closest, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans(
    points: np.ndarray, k: int, max_iters: int = 100, seed: int = 0
) -> KMeansResult:
    """
    Lloyd's k-means from k-means++ seeding.

    Iterates until the assignments stop changing or max_iters refinements ran.
    Empty clusters keep their previous centroid, so inertia never increases.

    Args:
        points: m x d matrix of finite values
        k: Number of clusters, 1 <= k <= m
        max_iters: Maximum number of refinement iterations
        seed: Seed of the k-means++ draws

    Returns:
        KMeansResult

    Raises:
        FeatureError: If m < k, k < 1, d < 1 or points are not finite

    Example:
        >>> result = kmeans(np.array([[0.0], [0.1], [10.0], [10.1]]), k=2)
        >>> sorted(np.bincount(result.assignments))
        [2, 2]
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] < 1:
        raise FeatureError(
            f"k-means needs an m x d matrix with d >= 1, got {points.shape}"
        )
    m = points.shape[0]
    if k < 1:
        raise FeatureError(f"k must be >= 1, got {k}")
    if m < k:
        raise FeatureError(f"k-means needs at least k={k} points, got {m}")
    if not np.all(np.isfinite(points)):
        raise FeatureError("k-means input contains NaN or Inf entries")

    rng = np.random.default_rng(seed)
    centroids = _seed_plus_plus(points, k, rng)
    assignments, inertia = _assign(points, centroids)
    history = [inertia]

    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        updated = centroids.copy()
        counts = np.bincount(assignments, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assignments, points)
        filled = counts > 0
        updated[filled] = sums[filled] / counts[filled, None]

        new_assignments, new_inertia = _assign(points, updated)
        centroids = updated
        history.append(new_inertia)
        changed = not np.array_equal(new_assignments, assignments)
        assignments = new_assignments
        if not changed:
            break

    return KMeansResult(
        centroids=centroids,
        assignments=assignments,
        inertia=history[-1],
        inertia_history=tuple(history),
        iterations=iterations,
    )


def zscore(values: np.ndarray) -> np.ndarray:
    """Population z-score; a zero standard deviation yields all zeros."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return values.copy()
    std = values.std()
    if std == 0:
        return np.zeros_like(values)
    return (values - values.mean()) / std


def category_feature(
    per_user_tweet_embeddings: Sequence[np.ndarray],
    k: int = DEFAULT_CATEGORIES,
    max_tweets: int = DEFAULT_MAX_TWEETS,
    seed: int = 0,
    max_iters: int = 100,
) -> np.ndarray:
    """
    Tweet content category block: [z-scored distinct-cluster count ; k shares].

    Tweets of all users are pooled and clustered once. With fewer pooled
    tweets than k, only that many categories are fitted and the remaining
    shares stay zero. Users are expected to supply at most max_tweets
    embeddings, most recent last; longer lists keep their last max_tweets rows.
    Users without tweets get an all-zero row and are left out of the z-score
    statistics.

    Args:
        per_user_tweet_embeddings: one (t_i x d) array per user, t_i may be 0
        k: Number of content categories
        max_tweets: Per-user tweet cap
        seed: k-means seed
        max_iters: k-means iteration cap

    Returns:
        n x (k + 1) array

    Raises:
        FeatureError: On embedding dimension mismatch
    """
    n = len(per_user_tweet_embeddings)
    dims = {
        np.asarray(e).shape[1]
        for e in per_user_tweet_embeddings
        if np.asarray(e).ndim == 2 and np.asarray(e).shape[0] > 0
    }
    if len(dims) > 1:
        raise FeatureError(f"Tweet embedding dimension mismatch: {sorted(dims)}")

    trimmed: List[np.ndarray] = []
    truncated = 0
    for emb in per_user_tweet_embeddings:
        emb = np.asarray(emb, dtype=np.float64)
        if emb.size == 0:
            trimmed.append(np.empty((0, next(iter(dims), 1))))
            continue
        if emb.shape[0] > max_tweets:
            truncated += 1
            emb = emb[-max_tweets:]
        trimmed.append(emb)
    if truncated:
        logger.debug(f"Kept the most recent {max_tweets} tweets for {truncated} users")

    counts = np.array([e.shape[0] for e in trimmed], dtype=np.int64)
    block = np.zeros((n, k + 1), dtype=np.float64)
    if counts.sum() == 0:
        logger.warning("No tweets supplied; category block is all zeros")
        return block

    pooled = np.concatenate([e for e in trimmed if e.shape[0] > 0], axis=0)
    k_fit = min(k, pooled.shape[0])
    if k_fit < k:
        logger.warning(
            f"Only {pooled.shape[0]} tweets for k={k}; clustering into {k_fit} "
            f"categories and leaving the remaining shares at zero"
        )
    result = kmeans(pooled, k=k_fit, max_iters=max_iters, seed=seed)

    owners = np.repeat(np.arange(n), counts)
    per_cluster = np.zeros((n, k), dtype=np.float64)
    np.add.at(per_cluster, (owners, result.assignments), 1.0)

    active = counts > 0
    distinct = (per_cluster > 0).sum(axis=1).astype(np.float64)
    block[active, 0] = zscore(distinct[active])
    block[active, 1:] = per_cluster[active] / counts[active, None]
    if (~active).any():
        missing = int((~active).sum())
        logger.debug(f"{missing} users without tweets get a zero category block")
    return block


def temporal_feature(
    monthly_counts: Sequence[Sequence[Tuple[int, int]]], window: int = DEFAULT_WINDOW
) -> np.ndarray:
    """
    Temporal activity block: share of tweets posted in each month of the window.

    Args:
        monthly_counts: per user, (month index in [0, window), count >= 0) pairs;
            repeated months are summed, missing months count as zero
        window: Number of months

    Returns:
        n x window array; rows of users without tweets are zero

    Raises:
        FeatureError: On negative counts or months outside the window
    """
    block = np.zeros((len(monthly_counts), window), dtype=np.float64)
    for user, pairs in enumerate(monthly_counts):
        for month, count in pairs:
            if count < 0:
                raise FeatureError(
                    f"negative count {count} for user {user}, month {month}"
                )
            if not 0 <= month < window:
                raise FeatureError(
                    f"month index {month} of user {user} outside window [0, {window})"
                )
            block[user, month] += count
    totals = block.sum(axis=1)
    active = totals > 0
    block[active] /= totals[active, None]
    return block


def assemble_features(
    blocks: Union[Mapping[str, np.ndarray], Sequence[Tuple[str, np.ndarray]]],
    drop: Sequence[str] = (),
) -> FeatureMatrix:
    """
    Concatenate named per-user blocks into a FeatureMatrix.

    Blocks must follow the canonical order (description, tweet, num_meta,
    cat_meta, category, temporal); any subset is accepted, which is how
    datasets without e.g. tweet timestamps are represented.

    Args:
        blocks: (name, n x w array) pairs or a mapping in canonical order
        drop: Block names to leave out

    Returns:
        FeatureMatrix

    Raises:
        FeatureError: On unknown or misordered names, row-count mismatch or NaN

    Example:
        >>> fm = assemble_features([("description", np.zeros((3, 8))),
        ...                         ("temporal", np.zeros((3, 12)))])
        >>> fm.s, fm.schema
        (20, (('description', 8), ('temporal', 12)))
    """
    items = list(blocks.items()) if isinstance(blocks, Mapping) else list(blocks)
    if not items:
        raise FeatureError("No feature blocks given")

    names = [name for name, _ in items]
    unknown = [name for name in names if name not in BLOCK_ORDER]
    if unknown:
        raise FeatureError(
            f"Unknown feature blocks {unknown}; expected names from {BLOCK_ORDER}"
        )
    positions = [BLOCK_ORDER.index(name) for name in names]
    if positions != sorted(positions) or len(set(positions)) != len(positions):
        raise FeatureError(f"Blocks {names} are not in canonical order {BLOCK_ORDER}")

    arrays: List[np.ndarray] = []
    schema: List[Tuple[str, int]] = []
    n: Optional[int] = None
    for name, array in items:
        array = np.asarray(array, dtype=np.float64)
        if array.ndim == 1:
            array = array[:, None]
        if n is None:
            n = array.shape[0]
        elif array.shape[0] != n:
            raise FeatureError(
                f"Block '{name}' has {array.shape[0]} rows, expected {n}"
            )
        if np.isnan(array).any():
            raise FeatureError(f"Block '{name}' contains NaN entries")
        if name in drop:
            continue
        arrays.append(array)
        schema.append((name, array.shape[1]))

    if not arrays:
        raise FeatureError("Every block was dropped")
    return FeatureMatrix(np.concatenate(arrays, axis=1), tuple(schema))


# File I/O


def save_features(features: FeatureMatrix, path: Union[str, Path]) -> Path:
    """Serialize a FeatureMatrix (schema line + matrix payload)."""
    return write_feature_file(path, features.values, list(features.schema))


def load_features(path: Union[str, Path]) -> FeatureMatrix:
    """Read a FeatureMatrix written by save_features()."""
    matrix, schema = read_feature_file(path)
    return FeatureMatrix(matrix, tuple(schema))


def load_block(path: Union[str, Path], n: int, name: str) -> np.ndarray:
    """Read a precomputed per-user block (binary matrix or CSV) with n rows."""
    block = read_matrix(path)
    if block.shape[0] != n:
        raise FeatureError(
            f"Block '{name}' in {path} has {block.shape[0]} rows, expected {n}"
        )
    return block


def load_tweet_embeddings(
    matrix_path: Union[str, Path], owners_path: Union[str, Path], n: int
) -> List[np.ndarray]:
    """
    Read pooled tweet embeddings and split them per user.

    ``owners_path`` lists one user id per line, aligned with the matrix rows,
    each user's tweets in chronological order (most recent last).
    """
    pooled = read_matrix(matrix_path)
    owners_text = Path(owners_path).read_text(encoding="utf-8").split()
    owners = np.asarray([int(token) for token in owners_text], dtype=np.int64)
    if owners.shape[0] != pooled.shape[0]:
        raise FeatureError(
            f"{owners_path} lists {owners.shape[0]} owners for {pooled.shape[0]} tweets"
        )
    if owners.size and (owners.min() < 0 or owners.max() >= n):
        raise FeatureError(f"{owners_path}: tweet owner id outside [0, {n})")
    per_user: Dict[int, List[int]] = {}
    for row, owner in enumerate(owners):
        per_user.setdefault(int(owner), []).append(row)
    dim = pooled.shape[1] if pooled.ndim == 2 else 1
    return [
        pooled[per_user[u]] if u in per_user else np.empty((0, dim)) for u in range(n)
    ]


def load_monthly_counts(
    path: Union[str, Path], n: int
) -> List[List[Tuple[int, int]]]:
    """Read ``user_id<TAB>month_index<TAB>count`` rows into per-user pair lists."""
    counts: List[List[Tuple[int, int]]] = [[] for _ in range(n)]
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            fields = line.strip().split("\t")
            if len(fields) != 3:
                raise FeatureError(f"{path}:{line_no}: expected 3 tab-separated fields")
            try:
                user, month, count = (int(x) for x in fields)
            except ValueError as e:
                raise FeatureError(f"{path}:{line_no}: non-integer field") from e
            if not 0 <= user < n:
                raise FeatureError(f"{path}:{line_no}: user id {user} outside [0, {n})")
            counts[user].append((month, count))
    return counts
