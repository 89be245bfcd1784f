import json

import numpy as np

from core.errors import SmallDivisorError
from core.run_records import (RunRecord, canonical_json, content_hash, file_hash, make_json_safe,
                              read_json, write_csv, write_json)
from utils.config import RECORD_FILE


def test_make_json_safe_handles_numpy_and_complex():
    data = {"a": np.arange(2), "b": np.float64(np.nan), "c": 1 + 2j, "d": np.bool_(True), 3: (1.5,)}
    assert make_json_safe(data) == {"a": [0, 1], "b": None, "c": {"re": 1.0, "im": 2.0},
                                    "d": True, "3": [1.5]}


def test_hash_ignores_key_order():
    assert canonical_json({"b": 1, "a": 2}) == '{"a":2,"b":1}'
    assert content_hash({"b": 1, "a": 2}) == content_hash({"a": 2, "b": 1})
    assert content_hash("x", "y") != content_hash("xy")


def test_writers(tmp_path):
    path = write_json(tmp_path / "out.json", {"x": 0.1, "y": float("inf")})
    assert read_json(path) == {"x": 0.1, "y": None}
    table = write_csv(tmp_path / "t.csv", ["k", "v"], [[1, 0.1], [2, True]])
    assert table.read_bytes() == b"k,v\n1,0.10000000000000001\n2,true\n"
    assert len(file_hash(table)) == 64


def test_record_status(tmp_path):
    record = RunRecord(command="solve", config={"seed": 0}, input_hash=content_hash("cfg"))
    record.finish(2, 0.5, SmallDivisorError("tiny divisor", {"q": [1]}))
    assert record.status == "failed"
    record.add_artefact(tmp_path / "solution.json")
    record.finish(1, 0.5)
    assert record.status == "partial"
    record.finish(0, 0.5)
    assert record.status == "ok"

    record.write(tmp_path)
    stored = json.loads((tmp_path / RECORD_FILE).read_text(encoding="utf-8"))
    assert stored["artefacts"] == ["solution.json"]
    assert stored["exit_code"] == 0
