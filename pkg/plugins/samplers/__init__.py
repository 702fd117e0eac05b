"""Sampler plugins and their lookup by sampling mode."""

from typing import Any, Dict, Optional, Tuple, Type

import numpy as np

from core.graph import HeteroGraph
from core.sampler import SamplerError
from plugins.base import SamplerPlugin
from plugins.samplers.biased import BiasedSamplerPlugin
from plugins.samplers.ppr_only import PprSamplerPlugin

SAMPLER_PLUGINS: Tuple[Type[SamplerPlugin], ...] = (
    BiasedSamplerPlugin,
    PprSamplerPlugin,
)
SAMPLING_MODES = tuple(plugin.mode for plugin in SAMPLER_PLUGINS)


def get_sampler(
    mode: str,
    graph: HeteroGraph,
    config: Dict[str, Any],
    hidden: Optional[np.ndarray] = None,
) -> SamplerPlugin:
    """
    Instantiate the first registered sampler plugin that matches a mode.

    Raises:
        SamplerError: For unknown modes, or "biased" without a hidden matrix
    """
    for plugin in SAMPLER_PLUGINS:
        if plugin.matches(mode):
            return plugin.create(graph, config, hidden)
    raise SamplerError(
        f"Unsupported sampling mode '{mode}'. Supported: {', '.join(SAMPLING_MODES)}"
    )


__all__ = [
    "BiasedSamplerPlugin",
    "PprSamplerPlugin",
    "SAMPLER_PLUGINS",
    "SAMPLING_MODES",
    "get_sampler",
]
