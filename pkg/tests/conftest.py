"""
Shared pytest fixtures and configuration for botgraph tests.

This module provides small hand-built graphs, random instances and a cached
synthetic dataset directory used across multiple test files.
"""

from pathlib import Path
from typing import Dict

import numpy as np
import pytest

from core.config_loader import SynthConfig
from core.features import FeatureMatrix, assemble_features
from core.graph import HeteroGraph, LabelSet
from core.synth import generate, write_dataset
from lib.logger import setup_logger


@pytest.fixture(autouse=True)
def quiet_logger():
    """Keep test output to warnings and above."""
    setup_logger(log_level="WARNING")
    yield


# Small graphs


@pytest.fixture
def toy_graph() -> HeteroGraph:
    """
    Six nodes, two relations.

    follow: 0->1, 0->2, 1->2, 2->0, 3->4, 4->5, 5->3
    friend: 0->3, 3->0, 1->4
    """
    return HeteroGraph.from_edges(
        6,
        ["follow", "friend"],
        {
            "follow": [(0, 1), (0, 2), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)],
            "friend": [(0, 3), (3, 0), (1, 4)],
        },
    )


@pytest.fixture
def toy_labels() -> LabelSet:
    """Labels of toy_graph: nodes 0-2 human, 3-5 bot."""
    return LabelSet.from_arrays(
        np.array([0, 0, 0, 1, 1, 1], dtype=np.int8),
        train=[0, 1, 3, 4],
        val=[2],
        test=[5],
    )


def random_graph(
    n: int, avg_degree: float, seed: int, relations=("r0",)
) -> HeteroGraph:
    """Directed Erdos-Renyi graph per relation, without self-loops."""
    rng = np.random.default_rng(seed)
    p = min(1.0, avg_degree / max(1, n - 1))
    edges: Dict[str, np.ndarray] = {}
    for relation in relations:
        mask = rng.random((n, n)) < p
        np.fill_diagonal(mask, False)
        src, dst = np.nonzero(mask)
        edges[relation] = np.stack([src, dst], axis=1)
    return HeteroGraph.from_edges(n, list(relations), edges)


@pytest.fixture
def random_graph_factory():
    """Factory building seeded random directed graphs."""
    return random_graph


@pytest.fixture
def separable_problem():
    """
    Linearly separable two-class features with a 60/20/20 split.

    Returns (features, labels) over 50 nodes and 6 features; the class means
    lie 6 standard deviations apart in every feature.
    """
    rng = np.random.default_rng(7)
    n = 50
    y = (np.arange(n) % 2).astype(np.int8)
    x = rng.standard_normal((n, 6)) + np.where(y[:, None] == 1, 3.0, -3.0)
    order = rng.permutation(n)
    labels = LabelSet.from_arrays(y, order[:30], order[30:40], order[40:])
    features = assemble_features([("description", x[:, :4]), ("num_meta", x[:, 4:])])
    return features, labels


def small_synth_config(**overrides) -> SynthConfig:
    """A fast synthetic configuration."""
    values = dict(
        n=120,
        mean_degree=6,
        delta=3.0,
        description_dim=4,
        tweet_dim=4,
        num_meta_dim=2,
        cat_meta_dim=2,
        tweet_embedding_dim=4,
        topics=6,
        tweets_per_user=6,
        months=6,
        seed=3,
    )
    values.update(overrides)
    return SynthConfig(**values)


@pytest.fixture
def synth_config_factory():
    """Factory of small SynthConfig instances."""
    return small_synth_config


@pytest.fixture(scope="session")
def synth_dataset_dir(tmp_path_factory) -> Path:
    """A small synthetic dataset written once per session."""
    out = tmp_path_factory.mktemp("synth") / "data"
    write_dataset(generate(small_synth_config()), out)
    return out


@pytest.fixture
def feature_matrix() -> FeatureMatrix:
    """Deterministic 4 x 5 feature matrix with two blocks."""
    values = np.arange(20, dtype=np.float64).reshape(4, 5) / 10.0
    return FeatureMatrix(values, (("description", 3), ("temporal", 2)))


def pytest_configure(config):
    """Configure custom pytest markers."""
    config.addinivalue_line(
        "markers", "slow: marks tests as slow (deselect with '-m \"not slow\"')"
    )
    config.addinivalue_line("markers", "unit: marks tests as unit tests")
