import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ragncd.store import (
    BundleError,
    EmbeddingBundle,
    SampleRecord,
    l2_normalize,
    load_bundle,
    make_bundle,
    validate_bundle,
    write_bundle,
)

from conftest import tiny_bundle


def _write_raw(path, manifest, matrix: bytes, records):
    path.mkdir(parents=True, exist_ok=True)
    (path / "manifest.json").write_text(json.dumps(manifest))
    (path / "embeddings.bin").write_bytes(matrix)
    (path / "records.jsonl").write_text("".join(json.dumps(r) + "\n" for r in records))


def _manifest(dim, count, normalized=False):
    return {"schema_version": 1, "dim": dim, "count": count, "dtype": "f32le", "normalized": normalized}


def _records(n):
    return [{"id": f"r{i}", "row": i, "modality": "image", "label": None, "class_truth": None} for i in range(n)]


class TestLoad:
    def test_minimal_bundle(self, tmp_path):
        data = np.arange(8, dtype="<f4")
        _write_raw(tmp_path / "b", _manifest(4, 2), data.tobytes(), _records(2))
        b = load_bundle(tmp_path / "b")
        assert (b.dim, b.count) == (4, 2)
        assert b.data.tolist() == [[0, 1, 2, 3], [4, 5, 6, 7]]

    def test_count_exceeds_matrix(self, tmp_path):
        _write_raw(tmp_path / "b", _manifest(4, 3), np.zeros(8, "<f4").tobytes(), _records(3))
        with pytest.raises(BundleError, match="matrix size mismatch"):
            load_bundle(tmp_path / "b")

    def test_nan_row_is_named(self, tmp_path):
        data = np.zeros((3, 2), "<f4")
        data[1, 0] = np.nan
        _write_raw(tmp_path / "b", _manifest(2, 3), data.tobytes(), _records(3))
        with pytest.raises(BundleError, match="row 1"):
            load_bundle(tmp_path / "b")

    def test_missing_file(self, tmp_path):
        _write_raw(tmp_path / "b", _manifest(2, 1), np.zeros(2, "<f4").tobytes(), _records(1))
        os.remove(tmp_path / "b" / "records.jsonl")
        with pytest.raises(BundleError, match="missing file"):
            load_bundle(tmp_path / "b")

    def test_duplicate_id(self, tmp_path):
        recs = _records(2)
        recs[1]["id"] = "r0"
        _write_raw(tmp_path / "b", _manifest(2, 2), np.zeros(4, "<f4").tobytes(), recs)
        with pytest.raises(BundleError, match="duplicate record id"):
            load_bundle(tmp_path / "b")

    def test_row_out_of_range(self, tmp_path):
        recs = _records(2)
        recs[1]["row"] = 2
        _write_raw(tmp_path / "b", _manifest(2, 2), np.zeros(4, "<f4").tobytes(), recs)
        with pytest.raises(BundleError, match="out of range"):
            load_bundle(tmp_path / "b")

    def test_bad_dtype(self, tmp_path):
        m = _manifest(2, 1)
        m["dtype"] = "f64"
        _write_raw(tmp_path / "b", m, np.zeros(2, "<f4").tobytes(), _records(1))
        with pytest.raises(BundleError, match="dtype"):
            load_bundle(tmp_path / "b")

    def test_normalized_flag_checked(self, tmp_path):
        _write_raw(tmp_path / "b", _manifest(2, 1, True), np.array([2.0, 0.0], "<f4").tobytes(), _records(1))
        with pytest.raises(BundleError, match="norm"):
            load_bundle(tmp_path / "b")


class TestNormalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize([3, 4]), [0.6, 0.8], atol=1e-15)

    def test_identity(self):
        assert l2_normalize([1, 0, 0]).tolist() == [1.0, 0.0, 0.0]

    def test_zero_vector(self):
        with pytest.raises(ValueError, match="zero vector"):
            l2_normalize([0, 0])

    @given(arrays(np.float64, st.integers(1, 16), elements=st.floats(-1e6, 1e6)))
    def test_unit_norm_and_idempotent(self, v):
        if not np.any(v):
            return
        u = l2_normalize(v)
        assert abs(np.linalg.norm(u) - 1.0) < 1e-6
        np.testing.assert_allclose(l2_normalize(u), u, atol=1e-6)
        # direction preserved
        assert np.dot(u, v) > 0


class TestValidate:
    def test_well_formed(self):
        b = tiny_bundle(np.eye(3), labels=["a", None, "b"], truth=["a", "c", "b"], normalized=True)
        assert validate_bundle(b) == []

    def test_normalized_row_with_norm_two(self):
        b = tiny_bundle([[1, 0], [2, 0], [0, 1]], normalized=True)
        problems = validate_bundle(b)
        assert len(problems) == 1 and "row 1" in problems[0]

    def test_label_truth_disagreement(self):
        b = tiny_bundle([[1, 0], [0, 1]], labels=["a", None], truth=["b", None])
        problems = validate_bundle(b)
        assert len(problems) == 1 and "disagrees" in problems[0]

    def test_duplicate_and_out_of_range_records(self):
        recs = (SampleRecord("x", 0), SampleRecord("x", 5))
        b = EmbeddingBundle(np.zeros((2, 2)), recs)
        problems = validate_bundle(b)
        assert any("duplicate" in p for p in problems)
        assert any("out of range" in p for p in problems)


class TestRoundTrip:
    def test_two_row_layout(self, tmp_path):
        b = tiny_bundle([[1, 2, 3], [4, 5, 6]], labels=["a", None], truth=["a", "b"])
        root = write_bundle(b, tmp_path / "b")
        assert sorted(os.listdir(root)) == ["embeddings.bin", "manifest.json", "records.jsonl"]
        assert (root / "embeddings.bin").stat().st_size == 2 * 3 * 4
        assert len((root / "records.jsonl").read_text().splitlines()) == 2
        assert load_bundle(root) == b

    def test_thousand_rows_bit_exact(self, tmp_path, rng):
        data = rng.standard_normal((1000, 24)).astype(np.float32)
        b = make_bundle(data, [f"id{i}" for i in range(1000)])
        back = load_bundle(write_bundle(b, tmp_path / "big"))
        assert back.data.tobytes() == data.tobytes()
        assert back == b

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("not a dir")
        with pytest.raises(OSError, match=str(blocker)):
            write_bundle(tiny_bundle([[1.0]]), blocker / "sub")

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(0, 6), st.integers(1, 5)),
                  elements=st.floats(allow_nan=False, allow_infinity=False, width=32)))
    def test_round_trip_property(self, tmp_path_factory, data):
        b = make_bundle(data, [f"r{i}" for i in range(data.shape[0])], dim=data.shape[1])
        back = load_bundle(write_bundle(b, tmp_path_factory.mktemp("rt")))
        assert back == b


def test_bundle_is_immutable():
    b = tiny_bundle([[1.0, 2.0]])
    with pytest.raises(ValueError):
        b.data[0, 0] = 5.0
    with pytest.raises(AttributeError):
        b.records = ()


def test_bundle_copies_its_input():
    src = np.ones((2, 2), dtype=np.float32)
    b = tiny_bundle(src)
    src[0, 0] = 7
    assert b.data[0, 0] == 1.0
