"""
Artifact formatting strategies.

Every artifact carries the hash of the config that produced it: CSV files
start with a `# config_hash=` comment line, JSON documents hold a
`config_hash` key.
"""

import csv
import io
import json
import math
from abc import ABC, abstractmethod
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

import numpy as np


def jsonable(value: Any) -> Any:
    """
    Convert numpy scalars and arrays, tuples, enums and paths into plain JSON
    values. Non-finite floats become the strings "inf", "-inf" and "nan".
    :param value: Any nested structure of results
    :return: A structure json.dumps accepts with allow_nan=False
    """
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [jsonable(v) for v in value.tolist()]
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, (complex, np.complexfloating)):
        return {"re": jsonable(value.real), "im": jsonable(value.imag)}
    return value


class ArtifactFormatter(ABC):
    """Abstract base class for artifact formatting strategies."""

    extension: str = ""

    def __init__(self, config_hash: str):
        self.config_hash = config_hash

    @abstractmethod
    def format(self, payload: Any) -> str:
        """
        Render a payload as the text of an artifact.
        :param payload: Rows or a mapping, depending on the format
        :return: Artifact text
        """
        pass

    def write(self, path: Path, payload: Any) -> Path:
        """
        Render and write an artifact.
        :param path: Target file
        :param payload: Payload passed to format
        :return: The written path
        """
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.format(payload), encoding="utf-8")
        return path


class CSVFormatter(ArtifactFormatter):
    """Format lists of row mappings as CSV."""

    extension = ".csv"

    def format(self, payload: Iterable[dict[str, Any]]) -> str:
        """
        Format rows as CSV. Columns follow first appearance across all rows.
        :param payload: Row mappings
        :return: CSV text with a leading config hash comment
        """
        rows = list(payload)
        columns: list[str] = []
        for row in rows:
            columns.extend(key for key in row if key not in columns)

        buffer = io.StringIO()
        buffer.write(f"# config_hash={self.config_hash}\n")
        writer = csv.DictWriter(buffer, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: self._cell(row.get(key)) for key in columns})
        return buffer.getvalue()

    @staticmethod
    def _cell(value: Any) -> Any:
        if value is None:
            return ""
        if isinstance(value, (bool, np.bool_)):
            return "true" if value else "false"
        if isinstance(value, (complex, np.complexfloating)):
            return repr(complex(value)) if complex(value).imag else repr(float(complex(value).real))
        if isinstance(value, (float, np.floating)):
            return repr(float(value))
        if isinstance(value, (int, np.integer)):
            return int(value)
        if isinstance(value, (list, tuple)):
            return " ".join(str(CSVFormatter._cell(v)) for v in value)
        return value


class JSONFormatter(ArtifactFormatter):
    """Format mappings as JSON documents with sorted keys."""

    extension = ".json"

    def format(self, payload: dict[str, Any]) -> str:
        """
        Format a mapping as JSON.
        :param payload: Mapping of results
        :return: JSON text ending in a newline
        """
        document = {"config_hash": self.config_hash, **jsonable(payload)}
        return json.dumps(document, indent=2, sort_keys=True, allow_nan=False) + "\n"
