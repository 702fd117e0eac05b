"""
State Manager for botgraph using SQLite.

This module provides the key-value store behind the pipeline stage ledger:
which stage ran with which configuration digest, and which artifacts it
produced. Reruns consult the ledger to skip stages that already completed.
"""

import json
import sqlite3
import threading
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional


class StateError(Exception):
    """
    Exception raised for state management errors.

    Used for database connection failures, integrity issues, and values that
    cannot be stored.
    """


class StateManager:
    """
    Thread-safe key-value store persisted in SQLite.

    Values are stored as JSON, so anything the pipeline records (artifact
    paths, digests, metrics) round-trips without custom typing.

    Example:
        >>> state = StateManager(Path("runs/state.db"))
        >>> state.record_stage("sample", "3f2a...", {"cache": "runs/x/cache.bsg"})
        >>> state.stage_record("sample", "3f2a...")["artifacts"]["cache"]
        'runs/x/cache.bsg'
    """

    def __init__(self, db_path: Path, timeout: float = 10.0):
        """
        Initialize state manager with database path.

        Args:
            db_path: Path to SQLite database file (parents are created)
            timeout: Database connection timeout in seconds

        Raises:
            StateError: If the directory cannot be created or initialization fails
        """
        self.db_path = Path(db_path)
        self.timeout = timeout
        self._lock = threading.Lock()

        try:
            self.db_path.parent.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise StateError(
                f"Failed to create database directory {self.db_path.parent}: {e}"
            ) from e

        self._init_database()

    @contextmanager
    def _get_connection(self) -> Iterator[sqlite3.Connection]:
        try:
            conn = sqlite3.connect(str(self.db_path), timeout=self.timeout)
            try:
                yield conn
            finally:
                conn.close()
        except sqlite3.Error as e:
            raise StateError(
                f"Database connection failed for {self.db_path}: {e}"
            ) from e

    def _init_database(self) -> None:
        with self._lock:
            with self._get_connection() as conn:
                conn.execute(
                    """
                    CREATE TABLE IF NOT EXISTS state (
                        key TEXT PRIMARY KEY,
                        value TEXT NOT NULL,
                        updated_at TEXT NOT NULL
                    )
                    """
                )
                conn.commit()

    def get(self, key: str, default: Optional[Any] = None) -> Optional[Any]:
        """
        Get value for key.

        Args:
            key: Key to retrieve
            default: Default value if key doesn't exist

        Returns:
            Stored value, or default if not found

        Raises:
            StateError: If database operation fails or the value is corrupt
        """
        with self._lock:
            with self._get_connection() as conn:
                row = conn.execute(
                    "SELECT value FROM state WHERE key = ?", (key,)
                ).fetchone()
        if row is None:
            return default
        try:
            return json.loads(row[0])
        except json.JSONDecodeError as e:
            raise StateError(f"Corrupt value stored under '{key}': {e}") from e

    def set(self, key: str, value: Any) -> None:
        """
        Set value for key, replacing any previous value.

        Args:
            key: Key to set
            value: JSON-serializable value (Path objects are stringified)

        Raises:
            StateError: If the value cannot be serialized or stored
        """
        try:
            payload = json.dumps(value, default=str, sort_keys=True)
        except (TypeError, ValueError) as e:
            raise StateError(f"Failed to serialize value for key '{key}': {e}") from e

        with self._lock:
            with self._get_connection() as conn:
                conn.execute(
                    "INSERT OR REPLACE INTO state (key, value, updated_at) "
                    "VALUES (?, ?, ?)",
                    (key, payload, datetime.now().isoformat()),
                )
                conn.commit()

    def delete(self, key: str) -> None:
        """Delete key from state; missing keys are ignored."""
        with self._lock:
            with self._get_connection() as conn:
                conn.execute("DELETE FROM state WHERE key = ?", (key,))
                conn.commit()

    def exists(self, key: str) -> bool:
        """Check if key exists in state."""
        with self._lock:
            with self._get_connection() as conn:
                row = conn.execute(
                    "SELECT 1 FROM state WHERE key = ? LIMIT 1", (key,)
                ).fetchone()
        return row is not None

    def get_keys(self, prefix: Optional[str] = None) -> List[str]:
        """
        Get all keys, optionally filtered by prefix, in sorted order.

        Args:
            prefix: Optional prefix (e.g., "stage.train.")

        Returns:
            Sorted list of matching keys
        """
        with self._lock:
            with self._get_connection() as conn:
                if prefix:
                    rows = conn.execute(
                        "SELECT key FROM state WHERE substr(key, 1, ?) = ? "
                        "ORDER BY key",
                        (len(prefix), prefix),
                    ).fetchall()
                else:
                    rows = conn.execute("SELECT key FROM state ORDER BY key").fetchall()
        return [row[0] for row in rows]

    def clear(self) -> None:
        """Delete every key."""
        with self._lock:
            with self._get_connection() as conn:
                conn.execute("DELETE FROM state")
                conn.commit()

    # Stage ledger

    @staticmethod
    def stage_key(stage: str, digest: str) -> str:
        """Ledger key of a stage run: ``stage.<name>.<digest>``."""
        return f"stage.{stage}.{digest}"

    def record_stage(
        self, stage: str, digest: str, artifacts: Dict[str, str]
    ) -> None:
        """
        Mark a stage as completed for a configuration digest.

        Args:
            stage: Stage name
            digest: Content digest of the stage's resolved inputs
            artifacts: Mapping of artifact name -> file path
        """
        self.set(
            self.stage_key(stage, digest),
            {
                "stage": stage,
                "digest": digest,
                "artifacts": artifacts,
                "completed_at": datetime.now().isoformat(),
            },
        )

    def stage_record(self, stage: str, digest: str) -> Optional[Dict[str, Any]]:
        """
        Get the completion record of a stage, or None if it never completed.

        Records whose artifact files disappeared count as incomplete.
        """
        record = self.get(self.stage_key(stage, digest))
        if record is None:
            return None
        for path in record.get("artifacts", {}).values():
            if not Path(path).exists():
                return None
        return record
