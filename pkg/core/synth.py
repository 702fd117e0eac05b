"""
Synthetic labeled heterogeneous graphs.

Each relation is a directed stochastic block model over two classes
(0 = human, 1 = bot) with its own 2 x 2 edge-probability matrix. Node
features follow the six-block layout of real data:

- description, tweet, numerical and categorical metadata blocks are Gaussian
  with unit variance and class means ``delta`` apart in total;
- per-user tweet embeddings are drawn around topic centers; bots concentrate
  on a few topics;
- monthly tweet counts follow a bursty gamma-Poisson profile for humans and a
  steady rate for bots.

How distinct bot behaviour is follows ``behavior_gap`` (by default
min(1, delta / 20)), so delta = 0 yields classes with identical feature
distributions.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from core.config_loader import DatasetManifest, SynthConfig, dump_yaml, write_resolved
from core.features import (
    DEFAULT_CATEGORIES,
    FeatureMatrix,
    assemble_features,
    category_feature,
    temporal_feature,
)
from core.graph import BOT, HUMAN, HeteroGraph, LabelSet, save_graph, save_labels
from lib.logger import get_logger
from lib.matrix_io import write_matrix
from lib.utils import atomic_write_bytes, ensure_directory

SPLIT_FRACTIONS = (0.7, 0.1, 0.2)
BOT_TOPIC_COUNT = 3
TOPIC_SCALE = 3.0
TWEET_NOISE = 0.3

logger = get_logger()


class SynthError(Exception):
    """
    Exception raised for synthetic generation errors.

    Used for configurations whose derived probabilities or sizes are unusable.
    """


@dataclass
class SyntheticDataset:
    """Output of generate(), plus the raw inputs of the computed blocks."""

    graph: HeteroGraph
    features: FeatureMatrix
    labels: LabelSet
    blocks: Dict[str, np.ndarray]
    tweets: List[np.ndarray]
    monthly_counts: List[List[Tuple[int, int]]]
    config: SynthConfig


def preset_probabilities(
    cfg: SynthConfig, n_human: int, n_bot: int
) -> List[List[float]]:
    """
    Edge probabilities [source class][target class] of the configured preset.

    mixed-pattern: humans link mostly to humans; bots rarely link to bots but
    often to humans. planted: both classes link mostly within their class.
    Targets are expected out-degrees, scaled by ``mean_degree``.
    """
    m = cfg.mean_degree
    if cfg.preset == "mixed-pattern":
        degrees = [[0.8 * m, 0.2 * m], [0.6 * m, 0.1 * m]]
    else:
        degrees = [[0.9 * m, 0.1 * m], [0.1 * m, 0.9 * m]]
    sizes = [n_human, n_bot]
    return [
        [min(1.0, degrees[a][b] / max(1, sizes[b])) for b in (HUMAN, BOT)]
        for a in (HUMAN, BOT)
    ]


def _block_pairs(
    sources: np.ndarray,
    targets: np.ndarray,
    p: float,
    same_block: bool,
    rng: np.random.Generator,
) -> np.ndarray:
    """Each source-target pair independently with probability p, no self-loops."""
    m, t = sources.shape[0], targets.shape[0]
    width = t - 1 if same_block else t
    total = m * width
    if total <= 0 or p <= 0.0:
        return np.empty((0, 2), dtype=np.int64)
    count = int(rng.binomial(total, min(p, 1.0)))
    picks = rng.choice(total, size=count, replace=False)
    rows, cols = np.divmod(picks, width)
    if same_block:
        # column index skips the diagonal
        cols = cols + (cols >= rows)
    return np.stack([sources[rows], targets[cols]], axis=1).astype(np.int64)


def _sbm_edges(
    labels: np.ndarray, probs: List[List[float]], rng: np.random.Generator
) -> np.ndarray:
    """Directed SBM edges without self-loops, drawn per block pair."""
    members = [np.flatnonzero(labels == c) for c in (HUMAN, BOT)]
    parts = [
        _block_pairs(members[a], members[b], float(probs[a][b]), a == b, rng)
        for a in (HUMAN, BOT)
        for b in (HUMAN, BOT)
    ]
    edges = np.concatenate(parts, axis=0)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return edges[order]


def _gaussian_blocks(
    cfg: SynthConfig, labels: np.ndarray, rng: np.random.Generator
) -> Dict[str, np.ndarray]:
    widths = {
        "description": cfg.description_dim,
        "tweet": cfg.tweet_dim,
        "num_meta": cfg.num_meta_dim,
        "cat_meta": cfg.cat_meta_dim,
    }
    total = sum(widths.values())
    # +/- delta / 2 along the all-ones direction puts the class means delta apart
    offset = cfg.delta / (2.0 * np.sqrt(total))
    sign = np.where(labels == BOT, 1.0, -1.0)[:, None]
    blocks: Dict[str, np.ndarray] = {}
    for name, width in widths.items():
        values = sign * offset + rng.standard_normal((labels.shape[0], width))
        blocks[name] = values.astype(np.float32).astype(np.float64)
    return blocks


def _tweets(
    cfg: SynthConfig, labels: np.ndarray, gap: float, rng: np.random.Generator
) -> List[np.ndarray]:
    centers = TOPIC_SCALE * rng.standard_normal((cfg.topics, cfg.tweet_embedding_dim))
    bot_topics = rng.permutation(cfg.topics)[: min(BOT_TOPIC_COUNT, cfg.topics)]
    counts = rng.poisson(cfg.tweets_per_user, size=labels.shape[0])
    tweets: List[np.ndarray] = []
    for label, count in zip(labels.tolist(), counts.tolist()):
        topics = rng.integers(0, cfg.topics, size=count)
        if label == BOT and count:
            focused = rng.random(count) < gap
            topics[focused] = rng.choice(bot_topics, size=int(focused.sum()))
        noise = TWEET_NOISE * rng.standard_normal((count, cfg.tweet_embedding_dim))
        tweets.append((centers[topics] + noise).astype(np.float32).astype(np.float64))
    return tweets


def _monthly_counts(
    cfg: SynthConfig, labels: np.ndarray, gap: float, rng: np.random.Generator
) -> List[List[Tuple[int, int]]]:
    shape = cfg.human_burstiness
    size = (labels.shape[0], cfg.months)
    bursty = rng.gamma(shape, cfg.human_rate / shape, size=size)
    steady = np.full(cfg.months, cfg.bot_rate)
    bot_rates = gap * steady + (1.0 - gap) * bursty
    rates = np.where((labels == BOT)[:, None], bot_rates, bursty)
    counts = rng.poisson(rates)
    return [
        [(month, int(c)) for month, c in enumerate(row.tolist()) if c > 0]
        for row in counts
    ]


def _splits(
    n: int, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


def generate(cfg: SynthConfig) -> SyntheticDataset:
    """
    Generate a labeled graph, its features and a 70/10/20 split.

    Deterministic per ``cfg.seed``; every relation draws from its own child
    seed, so adding a relation leaves the others unchanged.

    Raises:
        SynthError: If the configuration leaves a class empty
    """
    n = cfg.n
    n_bot = int(round(cfg.bot_fraction * n))
    if n_bot == 0 or n_bot == n:
        raise SynthError(
            f"bot_fraction={cfg.bot_fraction} leaves a class empty for n={n}"
        )

    root = np.random.SeedSequence(cfg.seed)
    seeds = root.spawn(6)
    label_seed, feature_seed, tweet_seed, activity_seed, split_seed = seeds[:5]
    relation_root = seeds[5]
    relation_seeds = relation_root.spawn(len(cfg.relations))

    labels = np.zeros(n, dtype=np.int8)
    labels[np.random.default_rng(label_seed).permutation(n)[:n_bot]] = BOT

    edges: Dict[str, np.ndarray] = {}
    for relation, seed in zip(cfg.relations, relation_seeds):
        probs = cfg.edge_probs.get(relation)
        if not probs:
            probs = preset_probabilities(cfg, n - n_bot, n_bot)
        edges[relation] = _sbm_edges(labels, probs, np.random.default_rng(seed))
    graph = HeteroGraph.from_edges(n, cfg.relations, edges)

    gap = cfg.effective_behavior_gap
    blocks = _gaussian_blocks(cfg, labels, np.random.default_rng(feature_seed))
    tweets = _tweets(cfg, labels, gap, np.random.default_rng(tweet_seed))
    monthly = _monthly_counts(cfg, labels, gap, np.random.default_rng(activity_seed))

    features = assemble_features(
        [
            *blocks.items(),
            (
                "category",
                category_feature(tweets, k=DEFAULT_CATEGORIES, seed=cfg.seed),
            ),
            ("temporal", temporal_feature(monthly, window=cfg.months)),
        ]
    )

    train, val, test = _splits(n, np.random.default_rng(split_seed))
    label_set = LabelSet.from_arrays(labels, train, val, test)
    logger.info(
        f"Generated {graph!r} with {n_bot} bots, delta={cfg.delta}, "
        f"behavior_gap={gap:.2f}"
    )
    return SyntheticDataset(
        graph=graph,
        features=features,
        labels=label_set,
        blocks=blocks,
        tweets=tweets,
        monthly_counts=monthly,
        config=cfg,
    )


def _write_lines(path: Path, lines: List[str]) -> Path:
    return atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def write_dataset(dataset: SyntheticDataset, out_dir: Union[str, Path]) -> Path:
    """
    Write a dataset directory readable by the features stage.

    Files: edges.tsv, labels.tsv, splits.txt, one matrix per precomputed
    block, tweets.bin with tweet_owners.txt, monthly_counts.tsv,
    synth.resolved.yaml and the dataset.yaml manifest.
    """
    out = ensure_directory(out_dir)
    save_graph(dataset.graph, out / "edges.tsv")
    save_labels(dataset.labels, out / "labels.tsv", out / "splits.txt")

    block_files: Dict[str, str] = {}
    for name, block in dataset.blocks.items():
        write_matrix(out / f"{name}.bin", block)
        block_files[name] = f"{name}.bin"

    dim = dataset.config.tweet_embedding_dim
    pooled = [t for t in dataset.tweets if len(t)]
    tweets = np.concatenate(pooled) if pooled else np.empty((0, dim))
    write_matrix(out / "tweets.bin", tweets)
    owners = [str(u) for u, t in enumerate(dataset.tweets) for _ in range(len(t))]
    _write_lines(out / "tweet_owners.txt", owners)

    rows = [
        f"{user}\t{month}\t{count}"
        for user, pairs in enumerate(dataset.monthly_counts)
        for month, count in pairs
    ]
    _write_lines(out / "monthly_counts.tsv", rows)

    manifest = DatasetManifest(
        n=dataset.graph.n,
        relations=list(dataset.graph.relations),
        blocks=block_files,
        tweets="tweets.bin",
        tweet_owners="tweet_owners.txt",
        monthly_counts="monthly_counts.tsv",
    )
    atomic_write_bytes(
        out / "dataset.yaml",
        dump_yaml(manifest.model_dump(mode="json")).encode("utf-8"),
    )
    write_resolved(out / "synth.resolved.yaml", dataset.config)
    logger.info(f"Wrote synthetic dataset to {out}")
    return out
