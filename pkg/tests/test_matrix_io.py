"""Tests for binary/CSV matrix files and feature files."""

import numpy as np
import pytest

from lib.matrix_io import (
    MatrixFormatError,
    format_schema,
    parse_schema,
    read_feature_file,
    read_matrix,
    write_feature_file,
    write_matrix,
)


class TestBinaryMatrix:
    """Tests for the rows/cols + float32 format."""

    def test_header_and_payload_layout(self, tmp_path):
        """Test the ASCII header followed by little-endian float32 values."""
        path = write_matrix(tmp_path / "m.bin", np.array([[1.0, 2.0], [3.0, 4.5]]))

        raw = path.read_bytes()

        assert raw.startswith(b"2 2\n")
        assert np.frombuffer(raw[4:], dtype="<f4").tolist() == [1.0, 2.0, 3.0, 4.5]

    def test_read_returns_float64(self, tmp_path):
        """Test that values come back widened to float64."""
        write_matrix(tmp_path / "m.bin", np.eye(3))

        matrix = read_matrix(tmp_path / "m.bin")

        assert matrix.dtype == np.float64
        assert np.array_equal(matrix, np.eye(3))

    def test_truncated_payload_raises(self, tmp_path):
        """Test that a short payload is reported."""
        path = tmp_path / "m.bin"
        path.write_bytes(b"2 2\n" + np.zeros(3, dtype="<f4").tobytes())

        with pytest.raises(MatrixFormatError, match="expected 16"):
            read_matrix(path)

    def test_bad_header_raises(self, tmp_path):
        """Test that headers must hold two integers."""
        path = tmp_path / "m.bin"
        path.write_bytes(b"two by two\n")

        with pytest.raises(MatrixFormatError, match="rows cols"):
            read_matrix(path)

    def test_missing_header_raises(self, tmp_path):
        """Test that a file without a newline has no header."""
        path = tmp_path / "m.bin"
        path.write_bytes(b"2 2")

        with pytest.raises(MatrixFormatError, match="missing header"):
            read_matrix(path)

    def test_missing_file_raises(self, tmp_path):
        """Test that a missing file raises FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            read_matrix(tmp_path / "absent.bin")


class TestCsvMatrix:
    """Tests for the CSV fallback."""

    def test_csv_by_extension(self, tmp_path):
        """Test that .csv paths are written and read as text."""
        values = np.array([[0.25, -1.0], [3.0, 7.5]])
        path = write_matrix(tmp_path / "m.csv", values)

        assert path.read_text(encoding="utf-8").splitlines()[0] == "0.25,-1.0"
        assert np.array_equal(read_matrix(path), values)

    def test_unparsable_csv_raises(self, tmp_path):
        """Test that non-numeric CSV cells are reported."""
        path = tmp_path / "m.csv"
        path.write_text("1,x\n", encoding="utf-8")

        with pytest.raises(MatrixFormatError, match="unparsable CSV"):
            read_matrix(path)


class TestSchema:
    """Tests for schema lines."""

    def test_format_and_parse(self):
        """Test name:width rendering and parsing."""
        schema = [("description", 8), ("temporal", 12)]

        assert format_schema(schema) == "description:8,temporal:12"
        assert parse_schema("description:8,temporal:12") == schema

    def test_malformed_entry_raises(self):
        """Test entries without a colon or integer width."""
        with pytest.raises(MatrixFormatError, match="Malformed"):
            parse_schema("description")
        with pytest.raises(MatrixFormatError, match="Non-integer"):
            parse_schema("description:wide")


class TestFeatureFile:
    """Tests for feature matrix files."""

    def test_bit_exact_round_trip(self, tmp_path):
        """Test that float64 payloads reproduce the matrix exactly."""
        rng = np.random.default_rng(0)
        values = rng.standard_normal((5, 4))
        write_feature_file(tmp_path / "f.bin", values, [("tweet", 3), ("temporal", 1)])

        matrix, schema = read_feature_file(tmp_path / "f.bin")

        assert matrix.tobytes() == values.tobytes()
        assert schema == [("tweet", 3), ("temporal", 1)]

    def test_first_line_is_schema(self, tmp_path):
        """Test the leading schema line."""
        path = write_feature_file(tmp_path / "f.bin", np.zeros((1, 2)), [("tweet", 2)])

        assert path.read_bytes().split(b"\n")[0] == b"schema tweet:2"

    def test_plain_matrix_is_not_a_feature_file(self, tmp_path):
        """Test that files without a schema line are rejected."""
        write_matrix(tmp_path / "m.bin", np.zeros((2, 2)))

        with pytest.raises(MatrixFormatError, match="missing 'schema' line"):
            read_feature_file(tmp_path / "m.bin")
