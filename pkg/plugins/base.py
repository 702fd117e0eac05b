"""
Base classes for the plugin system.

Plugins are interchangeable subgraph samplers. Every sampler turns a start
node into a BiasedSubgraph; the shared batch driver shards start nodes over a
thread pool and streams results into a cache writer.
"""

from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, ClassVar, Dict, Iterable, List, Optional

import numpy as np

from core.graph import HeteroGraph
from core.sampler import BiasedSubgraph, SubgraphCacheWriter
from lib.logger import get_logger, log_context

ProgressCallback = Callable[[int, int], None]


class PluginBase(ABC):
    """
    Abstract base class for all plugins.

    Plugins receive their configuration during initialization and use it to
    decide whether they handle a requested mode.
    """

    def __init__(self, config: Dict[str, Any]):
        """
        Initialize the plugin with configuration.

        Args:
            config: Plugin configuration dictionary
        """
        self.config = config
        self.logger = get_logger()

    @property
    @abstractmethod
    def name(self) -> str:
        """Human-readable plugin name."""

    @classmethod
    @abstractmethod
    def matches(cls, target: str) -> bool:
        """
        Check if this plugin handles the given mode.

        Args:
            target: Requested mode (e.g. the ``sampling`` setting of a run)
        """


class SamplerPlugin(PluginBase):
    """
    Abstract base class for subgraph samplers.

    Subclasses set ``mode`` to the sampling mode they serve and implement
    sample() for one start node. sample() must be a pure function of the start
    node so that sample_many() can run it from several threads at once.

    Config keys read here:
        k, alpha, eps, reverse, workers
    """

    mode: ClassVar[str] = ""

    def __init__(self, graph: HeteroGraph, config: Dict[str, Any]):
        super().__init__(config)
        self.graph = graph
        self.k = int(config.get("k", 32))
        self.alpha = float(config.get("alpha", 0.15))
        self.eps = float(config.get("eps", 1e-4))
        self.reverse = bool(config.get("reverse", False))
        self.workers = int(config.get("workers", 1))

    @classmethod
    def matches(cls, target: str) -> bool:
        return bool(cls.mode) and target == cls.mode

    @classmethod
    def create(
        cls,
        graph: HeteroGraph,
        config: Dict[str, Any],
        hidden: Optional[np.ndarray] = None,
    ) -> "SamplerPlugin":
        """Build the sampler; samplers without similarity ignore ``hidden``."""
        return cls(graph, config)

    @abstractmethod
    def sample(self, v: int) -> BiasedSubgraph:
        """
        Build the subgraph of one start node.

        Args:
            v: Start node

        Returns:
            BiasedSubgraph
        """

    def sample_many(
        self,
        starts: Iterable[int],
        writer: Optional[SubgraphCacheWriter] = None,
        progress: Optional[ProgressCallback] = None,
    ) -> List[BiasedSubgraph]:
        """
        Sample every start node, in input order.

        Args:
            starts: Start nodes
            writer: Optional cache writer receiving every subgraph
            progress: Called as progress(done, total) after each subgraph

        Returns:
            Subgraphs in the order of ``starts``
        """
        nodes = [int(v) for v in starts]
        total = len(nodes)
        done = 0

        def record(subgraph: BiasedSubgraph) -> BiasedSubgraph:
            if writer is not None:
                writer.append(subgraph)
            return subgraph

        results: List[BiasedSubgraph] = []
        if self.workers <= 1:
            for v in nodes:
                results.append(record(self.sample(v)))
                done += 1
                if progress is not None:
                    progress(done, total)
        else:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                for subgraph in pool.map(lambda v: record(self.sample(v)), nodes):
                    results.append(subgraph)
                    done += 1
                    if progress is not None:
                        progress(done, total)

        self.logger.bind(**log_context(sampler=self.name, k=self.k)).debug(
            f"Sampled {total} subgraphs with {self.workers} worker(s)"
        )
        return results
