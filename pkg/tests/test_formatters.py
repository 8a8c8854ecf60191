"""
Tests for artifact formatter implementations.
"""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from qp_spectral_lab.formatters import CSVFormatter, JSONFormatter, jsonable
from qp_spectral_lab.operators import OperatorFamily


class TestJsonable:
    def test_non_finite_floats(self):
        """Test that non-finite floats become strings."""
        assert jsonable(np.array([1.0, np.nan])) == [1.0, "nan"]
        assert jsonable(math.inf) == "inf"
        assert jsonable(-math.inf) == "-inf"

    def test_numpy_scalars(self):
        value = jsonable({8: np.int64(3), "flag": np.bool_(True)})
        assert value == {"8": 3, "flag": True}
        assert type(value["8"]) is int

    def test_other_types(self):
        """Test that complex numbers, enums, tuples and paths are converted."""
        assert jsonable(complex(1.0, 2.0)) == {"re": 1.0, "im": 2.0}
        assert jsonable(OperatorFamily.DIRECT) == OperatorFamily.DIRECT.value
        assert jsonable((1, 2)) == [1, 2]
        assert jsonable(Path("out")) == "out"


class TestCSVFormatter:
    @pytest.fixture
    def formatter(self):
        return CSVFormatter("abc")

    def test_hash_comment_and_columns(self, formatter):
        """Test that the hash comes first and columns follow first appearance."""
        text = formatter.format([{"a": 1.5, "b": True}, {"a": None, "c": [1, 2]}])
        assert text.splitlines() == ["# config_hash=abc", "a,b,c", "1.5,true,", ",,1 2"]

    def test_cells(self, formatter):
        """Test rendering of booleans, complex values and numpy floats."""
        text = formatter.format([{"x": np.float64(0.1), "y": False, "z": complex(1.0, 0.0), "w": complex(1.0, 2.0)}])
        assert text.splitlines()[2] == "0.1,false,1.0,(1+2j)"

    def test_no_rows(self, formatter):
        assert formatter.format([]).startswith("# config_hash=abc\n")

    def test_write_creates_directories(self, formatter, tmp_path):
        """Test that writing an artifact creates missing parent directories."""
        path = formatter.write(tmp_path / "nested" / "out.csv", [{"a": 1}])
        assert path.exists()
        assert path.read_text().splitlines()[-1] == "1"


class TestJSONFormatter:
    def test_document(self):
        """Test that documents hold the config hash and sorted keys."""
        text = JSONFormatter("abc").format({"z": 1, "a": math.inf})
        assert text.endswith("\n")
        document = json.loads(text)
        assert document == {"a": "inf", "config_hash": "abc", "z": 1}
        assert list(document) == ["a", "config_hash", "z"]

    def test_same_payload_same_text(self):
        payload = {"values": np.arange(3), "nested": {"b": 2, "a": 1}}
        assert JSONFormatter("abc").format(payload) == JSONFormatter("abc").format(dict(reversed(payload.items())))
