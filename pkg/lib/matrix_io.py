"""
Binary and CSV matrix files.

Dense matrices are exchanged in a small binary format: an ASCII header line
``rows cols`` followed by row-major little-endian float32 values. Files ending
in ``.csv`` are read and written as comma-separated text instead. Feature
matrices prepend one more ASCII line carrying their block schema.
"""

from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from lib.utils import atomic_write_bytes

SCHEMA_PREFIX = "schema "


class MatrixFormatError(Exception):
    """
    Exception raised for malformed matrix files.

    Used for bad headers, truncated payloads and unparsable CSV rows.
    """


def _is_csv(path: Path) -> bool:
    return path.suffix.lower() == ".csv"


def _read_header_line(raw: bytes, offset: int, path: Path) -> Tuple[str, int]:
    end = raw.find(b"\n", offset)
    if end < 0:
        raise MatrixFormatError(f"{path}: missing header line")
    try:
        line = raw[offset:end].decode("ascii").strip()
    except UnicodeDecodeError as e:
        raise MatrixFormatError(f"{path}: header is not ASCII") from e
    return line, end + 1


def _parse_shape(line: str, path: Path) -> Tuple[int, int]:
    parts = line.split()
    if len(parts) != 2:
        raise MatrixFormatError(f"{path}: expected header 'rows cols', got '{line}'")
    try:
        rows, cols = int(parts[0]), int(parts[1])
    except ValueError as e:
        raise MatrixFormatError(f"{path}: non-integer shape in header '{line}'") from e
    if rows < 0 or cols < 0:
        raise MatrixFormatError(f"{path}: negative shape in header '{line}'")
    return rows, cols


def _decode_payload(
    raw: bytes, offset: int, rows: int, cols: int, path: Path
) -> np.ndarray:
    expected = rows * cols * 4
    payload = raw[offset:]
    if len(payload) != expected:
        raise MatrixFormatError(
            f"{path}: payload has {len(payload)} bytes, expected {expected} "
            f"for a {rows}x{cols} float32 matrix"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)


def _encode(matrix: np.ndarray) -> bytes:
    rows, cols = matrix.shape
    header = f"{rows} {cols}\n".encode("ascii")
    return header + np.ascontiguousarray(matrix, dtype="<f4").tobytes()


def read_matrix(path: Union[str, Path]) -> np.ndarray:
    """
    Read a dense matrix from the binary format or from CSV.

    Args:
        path: Matrix file (``.csv`` selects the text reader)

    Returns:
        float64 array of shape (rows, cols)

    Raises:
        FileNotFoundError: If the file doesn't exist
        MatrixFormatError: If the file is malformed
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Matrix file not found: {path}")

    if _is_csv(path):
        try:
            matrix = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
        except ValueError as e:
            raise MatrixFormatError(f"{path}: unparsable CSV: {e}") from e
        return matrix

    raw = path.read_bytes()
    line, offset = _read_header_line(raw, 0, path)
    rows, cols = _parse_shape(line, path)
    return _decode_payload(raw, offset, rows, cols, path)


def write_matrix(path: Union[str, Path], matrix: np.ndarray) -> Path:
    """
    Write a dense matrix in the binary format (or CSV for ``.csv`` paths).

    Values are stored as float32, the width the inputs are exchanged in.
    """
    path = Path(path)
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if _is_csv(path):
        lines = [",".join(repr(float(v)) for v in row) for row in matrix]
        return atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))
    return atomic_write_bytes(path, _encode(matrix))


def format_schema(schema: List[Tuple[str, int]]) -> str:
    """Render a block schema as ``name:width,name:width``."""
    return ",".join(f"{name}:{width}" for name, width in schema)


def parse_schema(text: str) -> List[Tuple[str, int]]:
    """
    Parse ``name:width,...`` into an ordered list of (name, width).

    Raises:
        MatrixFormatError: On malformed entries
    """
    schema: List[Tuple[str, int]] = []
    if not text:
        return schema
    for entry in text.split(","):
        name, sep, width = entry.partition(":")
        if not sep or not name:
            raise MatrixFormatError(f"Malformed schema entry '{entry}'")
        try:
            schema.append((name, int(width)))
        except ValueError as e:
            raise MatrixFormatError(
                f"Non-integer width in schema entry '{entry}'"
            ) from e
    return schema


def write_feature_file(
    path: Union[str, Path], matrix: np.ndarray, schema: List[Tuple[str, int]]
) -> Path:
    """
    Write a feature matrix: schema line, then the binary matrix format.

    The payload is float64 so that re-reading reproduces the matrix
    bit-exactly.
    """
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    rows, cols = matrix.shape
    header = f"{SCHEMA_PREFIX}{format_schema(schema)}\n{rows} {cols} f8\n"
    body = np.ascontiguousarray(matrix, dtype="<f8").tobytes()
    payload = header.encode("ascii") + body
    return atomic_write_bytes(path, payload)


def read_feature_file(
    path: Union[str, Path]
) -> Tuple[np.ndarray, List[Tuple[str, int]]]:
    """
    Read a feature matrix file written by write_feature_file().

    Returns:
        (matrix, schema)

    Raises:
        MatrixFormatError: If the schema line or payload is malformed
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Feature file not found: {path}")
    raw = path.read_bytes()
    schema_line, offset = _read_header_line(raw, 0, path)
    if not schema_line.startswith(SCHEMA_PREFIX):
        raise MatrixFormatError(f"{path}: missing '{SCHEMA_PREFIX.strip()}' line")
    schema = parse_schema(schema_line[len(SCHEMA_PREFIX):].strip())

    shape_line, offset = _read_header_line(raw, offset, path)
    parts = shape_line.split()
    if len(parts) != 3 or parts[2] != "f8":
        raise MatrixFormatError(f"{path}: expected 'rows cols f8', got '{shape_line}'")
    rows, cols = _parse_shape(" ".join(parts[:2]), path)
    payload = raw[offset:]
    if len(payload) != rows * cols * 8:
        raise MatrixFormatError(f"{path}: truncated feature payload")
    matrix = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()
    return matrix, schema
