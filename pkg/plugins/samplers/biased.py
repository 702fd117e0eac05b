"""Similarity-biased sampler: PPR candidates ranked with pre-classifier similarity."""

from typing import Any, Dict, Optional

import numpy as np

from core.graph import HeteroGraph
from core.sampler import BiasedSubgraph, SamplerError, build_biased_subgraph
from plugins.base import SamplerPlugin


class BiasedSamplerPlugin(SamplerPlugin):
    """
    Sampler combining PPR and hidden-representation similarity.

    Config keys: ``lambda`` (PPR weight, default 0.5) plus the SamplerPlugin keys.
    """

    mode = "biased"

    def __init__(self, graph: HeteroGraph, hidden: np.ndarray, config: Dict[str, Any]):
        super().__init__(graph, config)
        if hidden.shape[0] != graph.n:
            raise SamplerError(
                f"hidden matrix has {hidden.shape[0]} rows "
                f"for a graph of {graph.n} nodes"
            )
        self.hidden = hidden
        self.lam = float(config.get("lambda", 0.5))

    @classmethod
    def create(
        cls,
        graph: HeteroGraph,
        config: Dict[str, Any],
        hidden: Optional[np.ndarray] = None,
    ) -> "BiasedSamplerPlugin":
        if hidden is None:
            raise SamplerError(
                "the biased sampler needs pre-classifier hidden representations"
            )
        return cls(graph, hidden, config)

    @property
    def name(self) -> str:
        return self.mode

    def sample(self, v: int) -> BiasedSubgraph:
        return build_biased_subgraph(
            self.graph,
            v,
            self.k,
            hidden=self.hidden,
            alpha=self.alpha,
            eps=self.eps,
            lam=self.lam,
            reverse=self.reverse,
        )
