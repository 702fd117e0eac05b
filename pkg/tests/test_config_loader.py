"""
Comprehensive tests for ConfigLoader and the configuration models.

Tests cover:
- Loading valid run and synth configurations
- Validation errors for invalid configs
- Key access, including the lambda alias
- Config merging and overrides
- Resolved documents and dataset manifests
"""

from pathlib import Path

import pytest
import yaml

from core.config_loader import (
    ConfigError,
    ConfigLoader,
    RunConfig,
    SynthConfig,
    load_manifest,
    load_run_config,
    load_synth_config,
    load_yaml,
    write_resolved,
)


# Fixtures
@pytest.fixture
def fixtures_dir():
    """Return path to test fixtures directory."""
    return Path(__file__).parent / "fixtures"


@pytest.fixture
def valid_config_path(fixtures_dir):
    """Return path to valid config fixture."""
    return fixtures_dir / "valid_run.yaml"


@pytest.fixture
def invalid_config_path(fixtures_dir):
    """Return path to invalid config fixture."""
    return fixtures_dir / "invalid_run.yaml"


@pytest.fixture
def minimal_config_path(fixtures_dir):
    """Return path to minimal config fixture."""
    return fixtures_dir / "minimal_run.yaml"


@pytest.fixture
def merge_override_path(fixtures_dir):
    """Return path to merge override fixture."""
    return fixtures_dir / "merge_override.yaml"


@pytest.fixture
def valid_loader(valid_config_path):
    """Return ConfigLoader with valid config."""
    return ConfigLoader(valid_config_path)


class TestConfigLoading:
    """Test successful configuration loading."""

    def test_load_valid_config(self, valid_loader):
        """Test loading a complete run configuration."""
        cfg = valid_loader.config

        assert isinstance(cfg, RunConfig)
        assert cfg.k == 16
        assert cfg.lam == 0.7
        assert cfg.reverse is True
        assert cfg.mlp_optimizer == "sgd"
        assert cfg.data_dir == Path("data/synth")

    def test_load_minimal_config(self, minimal_config_path):
        """Test that omitted keys take their defaults."""
        cfg = ConfigLoader(minimal_config_path).config

        assert (cfg.k, cfg.alpha, cfg.eps, cfg.lam) == (32, 0.15, 1e-4, 0.5)
        assert (cfg.gnn_hidden, cfg.gnn_layers, cfg.fusion) == (64, 2, "attention")
        assert cfg.concat_intermediate is True
        assert cfg.out_dir == Path("runs")

    def test_no_file_gives_defaults(self):
        """Test that a loader without a file validates an empty document."""
        cfg = load_run_config()

        assert cfg == RunConfig()
        assert cfg.data_dir is None

    def test_raw_config_available(self, valid_loader):
        """Test that the merged raw document is returned as a copy."""
        raw = valid_loader.get_raw_config()
        raw["k"] = 999

        assert valid_loader.get_raw_config()["lambda"] == 0.7
        assert valid_loader.get_raw_config()["k"] == 16

    def test_load_synth_config(self, fixtures_dir):
        """Test loading a generator configuration."""
        cfg = load_synth_config(fixtures_dir / "small_synth.yaml")

        assert isinstance(cfg, SynthConfig)
        assert cfg.relations == ["follow", "friend", "mention"]
        assert cfg.preset == "planted"
        assert cfg.effective_behavior_gap == pytest.approx(1.5 / 20)


class TestFileErrors:
    """Test file access errors."""

    def test_missing_config_file(self):
        """Test that a missing file raises ConfigError."""
        with pytest.raises(ConfigError, match="not found"):
            ConfigLoader(Path("/nonexistent/run.yaml"))

    def test_missing_merge_file(self, valid_config_path):
        """Test that a missing merge file raises ConfigError."""
        with pytest.raises(ConfigError, match="not found"):
            ConfigLoader(valid_config_path, merge_configs=[Path("/nonexistent.yaml")])


class TestValidation:
    """Test configuration validation."""

    def test_invalid_config_lists_every_error(self, invalid_config_path):
        """Test that all problems are reported in one message."""
        with pytest.raises(ConfigError) as excinfo:
            ConfigLoader(invalid_config_path)

        message = str(excinfo.value)
        assert "4 error(s)" in message
        for key in ("alpha", "k", "fusion", "gnn_heads"):
            assert f"- {key}:" in message

    @pytest.mark.parametrize(
        "override",
        [
            {"eps": 0.0},
            {"lambda": 1.5},
            {"dropout": -0.1},
            {"gnn_layers": -1},
            {"sampling": "random-walk"},
            {"drop_blocks": ["profile"]},
            {"sample_nodes": "some"},
        ],
    )
    def test_invalid_values(self, override):
        """Test rejected run values."""
        with pytest.raises(ConfigError):
            load_run_config(**override)

    def test_zero_layers_allowed(self):
        """Test that zero GCN layers is a valid setting."""
        assert load_run_config(gnn_layers=0).gnn_layers == 0

    @pytest.mark.parametrize(
        "override",
        [
            {"relations": []},
            {"relations": ["follow", "follow"]},
            {"edge_probs": {"reply": [[0.1, 0.1], [0.1, 0.1]]}},
            {"edge_probs": {"follow": [[0.1, 0.1]]}},
            {"behavior_gap": 2.0},
            {"human_burstiness": 0.0},
        ],
    )
    def test_invalid_synth_values(self, override):
        """Test rejected generator values."""
        with pytest.raises(ConfigError):
            load_synth_config(**override)


class TestKeyAccess:
    """Test get() access."""

    def test_get_simple_value(self, valid_loader):
        """Test reading a value by key."""
        assert valid_loader.get("gnn_layers") == 3

    def test_get_alias(self, valid_loader):
        """Test that the document key lambda reads the lam field."""
        assert valid_loader.get("lambda") == 0.7
        assert valid_loader.get("lam") == 0.7

    def test_get_with_default(self, valid_loader):
        """Test default for unknown keys."""
        assert valid_loader.get("unknown", default="fallback") == "fallback"

    def test_required_null_value(self, minimal_config_path):
        """Test required keys that are null."""
        loader = ConfigLoader(minimal_config_path)

        with pytest.raises(ConfigError, match="ablation_name"):
            loader.get("ablation_name", required=True)


class TestConfigMerging:
    """Test configuration merging and overrides."""

    def test_merge_configs(self, valid_config_path, merge_override_path):
        """Test that later documents replace earlier values."""
        loader = ConfigLoader(valid_config_path, merge_configs=[merge_override_path])

        assert loader.config.k == 64
        assert loader.config.lam == 1.0
        assert loader.config.fusion == "mean"
        assert loader.config.gnn_layers == 3

    def test_overrides_win(self, valid_config_path, merge_override_path):
        """Test that explicit overrides beat every file and None is ignored."""
        loader = ConfigLoader(
            valid_config_path,
            merge_configs=[merge_override_path],
            overrides={"k": 8, "seed": None},
        )

        assert loader.config.k == 8
        assert loader.config.seed == 7

    def test_keyword_overrides(self, valid_config_path):
        """Test load_run_config keyword overrides."""
        cfg = load_run_config(valid_config_path, out_dir=Path("elsewhere"))

        assert cfg.out_dir == Path("elsewhere")


class TestYAMLErrors:
    """Test YAML parsing errors."""

    def test_invalid_yaml_syntax(self, tmp_path):
        """Test that unparsable YAML raises ConfigError."""
        path = tmp_path / "bad.yaml"
        path.write_text("k: [1, 2\n", encoding="utf-8")

        with pytest.raises(ConfigError, match="Failed to parse"):
            load_yaml(path)

    def test_empty_yaml_file(self, tmp_path):
        """Test that an empty file is an empty document."""
        path = tmp_path / "empty.yaml"
        path.write_text("", encoding="utf-8")

        assert load_yaml(path) == {}
        assert ConfigLoader(path).config == RunConfig()

    def test_non_dict_yaml(self, tmp_path):
        """Test that a top-level list is rejected."""
        path = tmp_path / "list.yaml"
        path.write_text("- a\n- b\n", encoding="utf-8")

        with pytest.raises(ConfigError, match="YAML dictionary"):
            load_yaml(path)


class TestResolvedDocuments:
    """Test resolved output and dataset manifests."""

    def test_resolved_round_trip(self, tmp_path, valid_loader):
        """Test that the resolved document reloads to an equal config."""
        path = write_resolved(tmp_path / "config.resolved.yaml", valid_loader.config)

        document = yaml.safe_load(path.read_text(encoding="utf-8"))

        assert document["lambda"] == 0.7
        assert "lam" not in document
        assert load_run_config(path) == valid_loader.config

    def test_manifest(self, tmp_path):
        """Test reading dataset.yaml with defaults."""
        (tmp_path / "dataset.yaml").write_text(
            yaml.safe_dump(
                {
                    "n": 10,
                    "relations": ["follow"],
                    "blocks": {"description": "desc.bin"},
                }
            ),
            encoding="utf-8",
        )

        manifest = load_manifest(tmp_path)

        assert manifest.edges == "edges.tsv"
        assert manifest.blocks == {"description": "desc.bin"}
        assert manifest.tweets is None

    @pytest.mark.parametrize(
        "document",
        [
            {"n": 10, "relations": ["follow"], "blocks": {"category": "c.bin"}},
            {"n": 10, "relations": ["follow"], "tweets": "tweets.bin"},
            {"n": 10, "relations": ["follow"], "extra": 1},
        ],
    )
    def test_invalid_manifest(self, tmp_path, document):
        """Test computed blocks, unpaired tweet files and unknown keys."""
        (tmp_path / "dataset.yaml").write_text(
            yaml.safe_dump(document), encoding="utf-8"
        )

        with pytest.raises(ConfigError, match="dataset.yaml"):
            load_manifest(tmp_path)
