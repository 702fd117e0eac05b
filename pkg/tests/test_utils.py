"""Tests for utility functions."""

import json
import random
from pathlib import Path

import numpy as np
import pytest
import torch

from lib.utils import (
    atomic_write_bytes,
    config_digest,
    configure_threads,
    ensure_directory,
    format_bytes,
    human_readable_duration,
    seed_everything,
    write_json,
)

# Path Operations Tests


class TestEnsureDirectory:
    """Tests for ensure_directory function."""

    def test_creates_nested_directories(self, tmp_path):
        """Test creating nested directories."""
        target = tmp_path / "runs" / "stages" / "train-abc"

        result = ensure_directory(target)

        assert result.is_dir()

    def test_existing_directory(self, tmp_path):
        """Test that an existing directory is accepted."""
        assert ensure_directory(tmp_path) == tmp_path

    def test_string_path(self, tmp_path):
        """Test that string paths come back as Path objects."""
        result = ensure_directory(str(tmp_path / "runs"))

        assert isinstance(result, Path)
        assert result == tmp_path / "runs"

    def test_empty_path_raises_error(self):
        """Test that an empty path raises ValueError."""
        with pytest.raises(ValueError, match="cannot be empty"):
            ensure_directory("")

    def test_file_in_the_way(self, tmp_path):
        """Test that an existing file is not treated as a directory."""
        blocker = tmp_path / "runs"
        blocker.write_text("x", encoding="utf-8")

        with pytest.raises(NotADirectoryError):
            ensure_directory(blocker)



class TestAtomicWrites:
    """Tests for atomic_write_bytes and write_json."""

    def test_writes_and_replaces(self, tmp_path):
        """Test writing, replacing and leaving no temporary files."""
        target = tmp_path / "out" / "cache.bsg"

        atomic_write_bytes(target, b"first")
        atomic_write_bytes(target, b"second")

        assert target.read_bytes() == b"second"
        assert [p.name for p in target.parent.iterdir()] == ["cache.bsg"]

    def test_failed_write_keeps_old_file(self, tmp_path):
        """Test that a failing payload leaves the previous content."""
        target = tmp_path / "metrics.json"
        target.write_bytes(b"old")

        with pytest.raises(TypeError):
            atomic_write_bytes(target, "not bytes")  # type: ignore[arg-type]

        assert target.read_bytes() == b"old"
        assert [p.name for p in tmp_path.iterdir()] == ["metrics.json"]

    def test_write_json_sorted(self, tmp_path):
        """Test sorted keys and a trailing newline."""
        path = write_json(tmp_path / "report.json", {"f1": 0.5, "accuracy": 0.75})

        text = path.read_text(encoding="utf-8")
        assert text.endswith("}\n")
        assert text.index("accuracy") < text.index("f1")
        assert json.loads(text) == {"f1": 0.5, "accuracy": 0.75}


# Reproducibility Tests


class TestSeeding:
    """Tests for seed_everything and configure_threads."""

    def test_seed_everything_repeats_draws(self):
        """Test that Python, NumPy and torch draws repeat after reseeding."""
        seed_everything(5)
        first = (random.random(), np.random.rand(), torch.rand(1).item())
        seed_everything(5)
        second = (random.random(), np.random.rand(), torch.rand(1).item())

        assert first == second

    def test_negative_seed_rejected(self):
        """Test that negative seeds are rejected."""
        with pytest.raises(ValueError, match="non-negative"):
            seed_everything(-1)

    def test_configure_threads(self):
        """Test the torch thread setting and its validation."""
        configure_threads(1)

        assert torch.get_num_threads() == 1
        with pytest.raises(ValueError):
            configure_threads(0)


class TestConfigDigest:
    """Tests for config_digest function."""

    def test_key_order_does_not_matter(self):
        """Test equal digests for reordered mappings."""
        first = config_digest({"k": 32, "alpha": 0.15})
        assert first == config_digest({"alpha": 0.15, "k": 32})

    def test_values_change_digest(self):
        """Test that a changed value changes the digest."""
        assert config_digest({"k": 32}) != config_digest({"k": 16})

    def test_paths_and_length(self):
        """Test Path values and the digest length."""
        digest = config_digest({"data_dir": Path("data")}, length=8)

        assert digest == config_digest({"data_dir": "data"}, length=8)
        assert len(digest) == 8


# Format Helper Tests


class TestHumanReadableDuration:
    """Tests for human_readable_duration function."""

    def test_sub_minute(self):
        """Test seconds with two decimals."""
        assert human_readable_duration(1.5) == "1.50s"

    def test_hours_minutes_seconds(self):
        """Test compound durations."""
        assert human_readable_duration(3665) == "1h 1m 5s"
        assert human_readable_duration(90061) == "1d 1h 1m 1s"

    def test_negative_raises(self):
        """Test that negative durations are rejected."""
        with pytest.raises(ValueError):
            human_readable_duration(-1)


class TestFormatBytes:
    """Tests for format_bytes function."""

    def test_units(self):
        """Test unit selection."""
        assert format_bytes(512) == "512.00 B"
        assert format_bytes(1536) == "1.50 KB"
        assert format_bytes(5 * 1024**3, precision=0) == "5 GB"

    def test_negative_raises(self):
        """Test that negative sizes are rejected."""
        with pytest.raises(ValueError):
            format_bytes(-1)
