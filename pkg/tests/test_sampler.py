"""
Tests for core.sampler.

Tests cover:
- Node and graph homophily against a brute-force label count
- Combined scores and top-k selection order
- Biased subgraph construction and edge legality
- Subgraph cache files and the export bundle
"""

import numpy as np
import pytest

from core.config_loader import SynthConfig
from core.graph import HeteroGraph, relation_view
from core.ppr import approx_ppr
from core.preclassifier import hidden_repr, mlp_accuracy, train_mlp
from core.sampler import (
    SamplerError,
    SubgraphCacheWriter,
    build_biased_subgraph,
    combined_scores,
    export_subgraphs,
    graph_homophily,
    homophily_bin,
    homophily_report,
    node_homophilies,
    node_homophily,
    read_cache,
    select_top_k,
    write_cache,
)
from core.synth import generate


def _path_graph():
    """Undirected path 0 - 1 - 2."""
    return HeteroGraph.from_edges(
        3, ["follow"], {"follow": [(0, 1), (1, 0), (1, 2), (2, 1)]}
    )


def _brute_force_homophily(g, y):
    values = {}
    for v in range(g.n):
        if y[v] < 0:
            continue
        neighbors = set()
        for r in g.relations:
            for a, b in g.edges(r).tolist():
                if a == v and b != v:
                    neighbors.add(b)
                if b == v and a != v:
                    neighbors.add(a)
        labeled = [u for u in neighbors if y[u] >= 0]
        if labeled:
            values[v] = sum(1 for u in labeled if y[u] == y[v]) / len(labeled)
    return values


def _subgraphs(g, hidden, starts, k=4, lam=0.5):
    return [build_biased_subgraph(g, v, k, hidden, eps=1e-4, lam=lam) for v in starts]


class TestHomophily:
    """Tests for the homophily measurements."""

    def test_four_neighbors_two_matching(self):
        """Test the documented half-matching example."""
        assert node_homophily([1, 2, 3, 4], np.array([1, 1, 0, 1, 0]), 0) == 0.5

    def test_triangle_all_same_label(self):
        """Test that equal labels give homophily 1 everywhere."""
        g = HeteroGraph.from_edges(3, ["r0"], {"r0": [(0, 1), (1, 2), (2, 0)]})
        y = np.array([1, 1, 1])

        assert node_homophilies(g, y) == {0: 1.0, 1: 1.0, 2: 1.0}
        assert graph_homophily(g, y) == 1.0

    def test_alternating_path_is_heterophilic(self):
        """Test the 1,0,1 path: every node zero, all mass in the first bin."""
        y = np.array([1, 0, 1])

        report = homophily_report(_path_graph(), y)

        assert report.node_values == {0: 0.0, 1: 0.0, 2: 0.0}
        assert report.graph_homophily == 0.0
        assert report.histogram == [3, 0, 0, 0]
        assert report.to_dict()["histogram"]["bins"][0] == [0.0, 0.25]

    def test_all_bot_clique_omits_human_mean(self):
        """Test that a class without values is left out of class_means."""
        edges = [(a, b) for a in range(4) for b in range(4) if a != b]
        g = HeteroGraph.from_edges(4, ["r0"], {"r0": edges})

        report = homophily_report(g, np.ones(4, dtype=np.int8))

        assert report.class_means == {"bot": 1.0}
        assert report.to_dict()["defined_nodes"] == 4

    def test_unlabeled_start_raises(self):
        """Test that homophily needs a labeled node."""
        with pytest.raises(SamplerError, match="unlabeled"):
            node_homophily([1], np.array([-1, 0]), 0)

    def test_no_labeled_neighbors_is_undefined(self):
        """Test that nodes without labeled neighbors are excluded."""
        y = np.array([1, -1, -1])

        assert node_homophily([1, 2], y, 0) is None
        with pytest.raises(SamplerError, match="undefined"):
            graph_homophily(_path_graph(), y)

    def test_accepts_label_sets(self, toy_graph, toy_labels):
        """Test that LabelSet and raw arrays give the same values."""
        assert node_homophilies(toy_graph, toy_labels) == node_homophilies(
            toy_graph, toy_labels.labels
        )

    def test_bins(self):
        """Test bin edges, with 1.0 in the last bin."""
        values = (0.0, 0.249, 0.25, 0.5, 0.75, 1.0)
        assert [homophily_bin(x) for x in values] == [0, 0, 1, 2, 3, 3]

    def test_matches_brute_force_on_random_graphs(self, random_graph_factory):
        """Test exact agreement with an independent count on 100 labeled graphs."""
        rng = np.random.default_rng(31)
        for trial in range(100):
            n = int(rng.integers(5, 51))
            degree = float(rng.uniform(0.5, 4.0))
            g = random_graph_factory(n, degree, seed=trial, relations=("a", "b"))
            y = rng.integers(-1, 2, size=n)

            expected = _brute_force_homophily(g, y)

            assert node_homophilies(g, y) == expected
            if expected:
                assert graph_homophily(g, y) == float(np.mean(list(expected.values())))


class TestScores:
    """Tests for combined_scores and select_top_k."""

    def test_weighted_example(self):
        """Test 0.5 * 0.4 + 0.5 * 0.8."""
        combined = combined_scores(np.array([0.4]), np.array([0.8]))
        assert combined[0] == pytest.approx(0.6)

    def test_mapping_inputs(self):
        """Test that mappings combine over the PPR candidate pool."""
        scores = combined_scores({1: 0.2, 2: 0.4}, {1: 1.0}, lam=0.5)

        assert scores == pytest.approx({1: 0.6, 2: 0.2})

    def test_lambda_range(self):
        """Test that lambda outside [0, 1] is rejected."""
        with pytest.raises(SamplerError, match="lambda"):
            combined_scores(np.array([0.1]), np.array([0.1]), lam=1.5)

    def test_half_weighting_selects_like_unweighted_sum(self):
        """Test lambda 0.5 top-k sets against top-k of ppr + sim on random instances."""
        rng = np.random.default_rng(0)
        for _ in range(1000):
            m = int(rng.integers(1, 40))
            k = int(rng.integers(1, 12))
            ids = np.sort(rng.choice(500, size=m, replace=False))
            ppr = rng.random(m) * 0.1
            sims = rng.random(m)

            weighted = select_top_k(ids, combined_scores(ppr, sims, 0.5), ppr, k)
            unweighted = select_top_k(ids, ppr + sims, ppr, k)

            assert set(ids[weighted].tolist()) == set(ids[unweighted].tolist())

    def test_ties_prefer_higher_ppr_then_lower_id(self):
        """Test the tie-breaking order of select_top_k."""
        ids = np.array([9, 4, 7, 2])
        scores = np.array([0.5, 0.5, 0.5, 0.9])
        ppr = np.array([0.1, 0.1, 0.3, 0.0])

        order = select_top_k(ids, scores, ppr, 4)

        assert ids[order].tolist() == [2, 7, 4, 9]

    def test_empty_candidates(self):
        """Test that no candidates select nothing."""
        empty = np.array([], dtype=np.int64)

        assert select_top_k(empty, np.array([]), np.array([]), 3).size == 0


class TestBuildBiasedSubgraph:
    """Tests for build_biased_subgraph."""

    def test_isolated_start_node(self):
        """Test that a node without edges yields a lone root."""
        g = HeteroGraph.from_edges(4, ["a", "b"], {"a": [(1, 2)], "b": [(2, 3)]})

        sub = build_biased_subgraph(g, 0, 3, np.ones((4, 2)))

        assert sub.node_ids.tolist() == [0]
        assert all(len(sub.edges[r]) == 0 for r in g.relations)
        assert all(len(sub.selected[r]) == 0 for r in g.relations)

    def test_saturated_selection_keeps_all_edges(self):
        """Test k >= n on a strongly connected graph keeps every edge plus the star."""
        edges = [(0, 1), (1, 2), (2, 3), (3, 0), (1, 3)]
        g = HeteroGraph.from_edges(4, ["r0"], {"r0": edges})

        sub = build_biased_subgraph(g, 0, 10, np.eye(4), eps=1e-10)

        assert sorted(sub.selected["r0"].tolist()) == [1, 2, 3]
        expected = set(edges) | {(0, 1), (0, 2), (0, 3)}
        assert set(map(tuple, sub.global_edges("r0").tolist())) == expected

    def test_pure_ppr_ranking_with_lambda_one(self, random_graph_factory):
        """Test that lam = 1 selects the top PPR nodes without a hidden matrix."""
        g = random_graph_factory(60, 4.0, seed=14)

        sub = build_biased_subgraph(g, 3, 5, None, eps=1e-4, lam=1.0)

        vector = approx_ppr(relation_view(g, "r0"), 3, eps=1e-4)
        ranked = [u for u, _ in vector.ranked() if u != 3]
        assert sub.selected["r0"].tolist() == ranked[:5]

    def test_edges_are_original_or_star(self, random_graph_factory):
        """Test edge legality, selection size and membership exhaustively."""
        g = random_graph_factory(40, 3.0, seed=21, relations=("follow", "friend"))
        hidden = np.random.default_rng(3).standard_normal((40, 6))

        for sub in _subgraphs(g, hidden, range(40), k=4):
            assert sub.node_ids[0] == sub.start
            members = set(sub.node_ids.tolist())
            for r in g.relations:
                chosen = sub.selected[r].tolist()
                assert len(chosen) <= 4 and sub.start not in chosen
                view = g.view(r)
                for a, b in sub.global_edges(r).tolist():
                    assert a in members and b in members
                    assert view.has_edge(a, b) or a == sub.start
                stars = {(sub.start, u) for u in chosen}
                assert stars <= set(map(tuple, sub.global_edges(r).tolist()))

    def test_deterministic(self, random_graph_factory):
        """Test identical subgraphs for identical inputs."""
        g = random_graph_factory(30, 4.0, seed=2)
        hidden = np.random.default_rng(0).standard_normal((30, 3))

        a = build_biased_subgraph(g, 5, 4, hidden)
        b = build_biased_subgraph(g, 5, 4, hidden)

        assert np.array_equal(a.node_ids, b.node_ids)
        assert np.array_equal(a.edges["r0"], b.edges["r0"])
        assert np.array_equal(a.scores["r0"], b.scores["r0"])

    def test_local_ids(self, toy_graph):
        """Test the local <-> global map."""
        sub = build_biased_subgraph(toy_graph, 0, 2, np.ones((6, 2)))

        assert sub.local_id(0) == 0
        for i, gid in enumerate(sub.node_ids.tolist()):
            assert sub.local_id(gid) == i
        with pytest.raises(SamplerError, match="not in the subgraph"):
            sub.local_id(99)

    def test_argument_validation(self, toy_graph):
        """Test start node, k and hidden-matrix checks."""
        with pytest.raises(SamplerError, match="out of range"):
            build_biased_subgraph(toy_graph, 6, 2, np.ones((6, 2)))
        with pytest.raises(SamplerError, match="k must be"):
            build_biased_subgraph(toy_graph, 0, 0, np.ones((6, 2)))
        with pytest.raises(SamplerError, match="hidden"):
            build_biased_subgraph(toy_graph, 0, 2, None, lam=0.5)

    def test_subgraph_homophily_uses_selection(self, toy_graph, toy_labels):
        """Test that subgraph reports measure each start against its selected nodes."""
        subs = [build_biased_subgraph(toy_graph, v, 5, None, lam=1.0) for v in (0, 3)]

        report = homophily_report(subs, toy_labels)

        assert report.source == "subgraphs"
        for sub in subs:
            expected = node_homophily(sub.neighborhood(), toy_labels, sub.start)
            assert report.node_values[sub.start] == expected

    @pytest.mark.slow
    def test_biased_selection_raises_homophily(self, synth_config_factory):
        """Test biased selections beat pure PPR selections on start-node homophily."""
        data = generate(synth_config_factory(n=600, mean_degree=8, seed=5))
        model = train_mlp(data.features, data.labels, hidden=32, epochs=200)
        fitting = data.labels.fitting
        assert mlp_accuracy(model, data.features, data.labels, fitting) >= 0.8
        hidden = hidden_repr(model, data.features)
        starts = data.labels.test[:100]

        biased_subgraphs = _subgraphs(data.graph, hidden, starts, k=8)
        biased = homophily_report(biased_subgraphs, data.labels)
        plain_subgraphs = _subgraphs(data.graph, None, starts, k=8, lam=1.0)
        plain = homophily_report(plain_subgraphs, data.labels)

        assert biased.graph_homophily >= plain.graph_homophily

    @pytest.mark.slow
    def test_homophily_gain_over_ten_graphs(self):
        """Test a mean start-node homophily gain of at least 0.03 on ten graphs."""
        gains = []
        for seed in range(10):
            cfg = SynthConfig(n=2000, seed=seed)
            data = generate(cfg)
            model = train_mlp(
                data.features, data.labels, hidden=64, epochs=200, seed=seed
            )
            fitting = mlp_accuracy(
                model, data.features, data.labels, data.labels.fitting
            )
            assert 0.75 <= fitting <= 0.90, f"seed {seed}: fitting accuracy {fitting}"
            hidden = hidden_repr(model, data.features)
            starts = np.random.default_rng(seed).choice(cfg.n, size=200, replace=False)

            biased = _subgraphs(data.graph, hidden, starts, k=16)
            plain = _subgraphs(data.graph, None, starts, k=16, lam=1.0)
            b = homophily_report(biased, data.labels).node_values
            p = homophily_report(plain, data.labels).node_values
            gains.append(np.mean([b[v] - p[v] for v in starts if v in b and v in p]))

        assert np.mean(gains) >= 0.03


class TestCache:
    """Tests for the subgraph cache and export."""

    @pytest.fixture
    def subgraphs(self, random_graph_factory):
        g = random_graph_factory(25, 3.0, seed=17, relations=("follow", "friend"))
        hidden = np.random.default_rng(1).standard_normal((25, 4))
        return g, _subgraphs(g, hidden, [4, 0, 11, 20], k=3)

    def test_round_trip(self, tmp_path, subgraphs):
        """Test that every field survives write and read."""
        g, subs = subgraphs
        write_cache(tmp_path / "cache.bsg", subs, g.relations)

        cache = read_cache(tmp_path / "cache.bsg")

        assert cache.relations == g.relations
        assert cache.starts == [0, 4, 11, 20]
        for sub in subs:
            loaded = cache.get(sub.start)
            assert loaded.k == 3
            assert np.array_equal(loaded.node_ids, sub.node_ids)
            for r in g.relations:
                assert np.array_equal(loaded.selected[r], sub.selected[r])
                assert np.array_equal(loaded.scores[r], sub.scores[r])
                assert np.array_equal(loaded.edges[r], sub.edges[r])

    def test_file_independent_of_append_order(self, tmp_path, subgraphs):
        """Test that records are written ordered by start node."""
        g, subs = subgraphs

        a = write_cache(tmp_path / "a.bsg", subs, g.relations)
        b = write_cache(tmp_path / "b.bsg", list(reversed(subs)), g.relations)

        assert a.read_bytes() == b.read_bytes()

    def test_cache_queries(self, tmp_path, subgraphs):
        """Test membership, missing starts and lookups of absent nodes."""
        g, subs = subgraphs
        cache = read_cache(write_cache(tmp_path / "c.bsg", subs, g.relations))

        assert len(cache) == 4 and 11 in cache and 12 not in cache
        assert cache.missing([0, 1, 20, 21]) == [1, 21]
        assert [s.start for s in cache.ordered()] == [0, 4, 11, 20]
        with pytest.raises(SamplerError, match="no cached subgraph"):
            cache.get(12)

    def test_writer_rejects_other_relations(self, tmp_path, subgraphs):
        """Test that all records must share the cache relations."""
        _, subs = subgraphs
        writer = SubgraphCacheWriter(tmp_path / "c.bsg", ["follow"])

        with pytest.raises(SamplerError, match="differ"):
            writer.append(subs[0])

    def test_corrupt_files_raise(self, tmp_path, subgraphs):
        """Test bad magic, truncation and trailing bytes."""
        g, subs = subgraphs
        path = write_cache(tmp_path / "c.bsg", subs, g.relations)
        raw = path.read_bytes()

        (tmp_path / "magic.bsg").write_bytes(b"XXXXXXXX" + raw[8:])
        (tmp_path / "short.bsg").write_bytes(raw[:-5])
        (tmp_path / "long.bsg").write_bytes(raw + b"\x00")

        with pytest.raises(SamplerError, match="not a subgraph cache"):
            read_cache(tmp_path / "magic.bsg")
        with pytest.raises(SamplerError, match="truncated"):
            read_cache(tmp_path / "short.bsg")
        with pytest.raises(SamplerError, match="trailing"):
            read_cache(tmp_path / "long.bsg")

    def test_export_bundle(self, tmp_path, subgraphs):
        """Test the npz edge-index layout of exported subgraphs."""
        g, subs = subgraphs
        cache = read_cache(write_cache(tmp_path / "c.bsg", subs, g.relations))

        path = export_subgraphs(cache, tmp_path / "bundle")

        assert path.suffix == ".npz"
        bundle = np.load(path)
        assert bundle["starts"].tolist() == [0, 4, 11, 20]
        ptr = bundle["ptr"]
        assert ptr[-1] == len(bundle["node_ids"])
        for i, sub in enumerate(cache.ordered()):
            assert bundle["node_ids"][ptr[i]].item() == sub.start
        total = sum(len(sub.edges[r]) for sub in subs for r in g.relations)
        assert bundle["edge_index"].shape == (2, total)
        assert bundle["edge_type"].shape == (total,)
        assert bundle["relations"].tolist() == ["follow", "friend"]
