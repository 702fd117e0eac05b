"""PPR-only sampler, the ablation without similarity bias."""

from core.sampler import BiasedSubgraph, build_biased_subgraph
from plugins.base import SamplerPlugin


class PprSamplerPlugin(SamplerPlugin):
    """Top-k by PPR score alone (lambda fixed at 1)."""

    mode = "ppr"

    @property
    def name(self) -> str:
        return self.mode

    def sample(self, v: int) -> BiasedSubgraph:
        return build_biased_subgraph(
            self.graph,
            v,
            self.k,
            hidden=None,
            alpha=self.alpha,
            eps=self.eps,
            lam=1.0,
            reverse=self.reverse,
        )
