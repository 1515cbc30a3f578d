import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ailora import StoreFormatError, TensorStore
from ailora import store as tstore


def _sample_store():
    s = TensorStore()
    rng = np.random.default_rng(5)
    s.add("layer0.q", rng.normal(size=(8, 8)))
    s.add("layer0.v", rng.normal(size=(8, 8)))
    s.add("small", [[1.5, -2.0]])
    s.metadata["scheme"] = "ailora"
    s.metadata["alpha"] = "16.0"
    return s


class TestRoundTrip:
    def test_values_and_metadata_survive(self, tmp_path):
        s = _sample_store()
        path = tmp_path / "w.tsr"
        tstore.write(s, path)
        back = tstore.read(path)
        assert back.names() == s.names()
        for name in s.names():
            assert np.array_equal(back[name], s[name])
        assert back.metadata == s.metadata

    def test_write_is_byte_deterministic(self, tmp_path):
        s = _sample_store()
        p1, p2 = tmp_path / "a.tsr", tmp_path / "b.tsr"
        tstore.write(s, p1)
        tstore.write(s, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_read_write_read_identical_bytes(self, tmp_path):
        p1, p2 = tmp_path / "a.tsr", tmp_path / "b.tsr"
        tstore.write(_sample_store(), p1)
        tstore.write(tstore.read(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    @given(shapes=st.lists(st.tuples(st.integers(1, 5), st.integers(1, 5)),
                           min_size=1, max_size=4),
           seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_arbitrary_shapes_roundtrip(self, shapes, seed, tmp_path_factory):
        rng = np.random.default_rng(seed)
        s = TensorStore()
        for idx, (m, n) in enumerate(shapes):
            s.add(f"t{idx}", rng.normal(size=(m, n)))
        path = tmp_path_factory.mktemp("rt") / "x.tsr"
        tstore.write(s, path)
        back = tstore.read(path)
        for name in s.names():
            assert np.array_equal(back[name], s[name])


class TestLayout:
    def test_header_fields(self, tmp_path):
        path = tmp_path / "w.tsr"
        tstore.write(_sample_store(), path)
        raw = path.read_bytes()
        magic, version, manifest_len, payload_len = struct.unpack_from("<4sIQQ", raw)
        assert magic == b"TSR1"
        assert version == 1
        assert len(raw) == 24 + manifest_len + payload_len

    def test_offsets_are_aligned_and_row_major(self, tmp_path):
        path = tmp_path / "w.tsr"
        s = _sample_store()
        tstore.write(s, path)
        raw = path.read_bytes()
        _, _, manifest_len, _ = struct.unpack_from("<4sIQQ", raw)
        manifest = json.loads(raw[24 : 24 + manifest_len])
        payload = raw[24 + manifest_len :]
        for entry in manifest["tensors"]:
            assert entry["offset"] % 8 == 0
            count = entry["rows"] * entry["cols"]
            block = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
            expect = s[entry["name"]].reshape(-1)  # row-major flattening
            assert np.array_equal(block, expect)


class TestRejection:
    def _good_bytes(self, tmp_path):
        path = tmp_path / "w.tsr"
        tstore.write(_sample_store(), path)
        return bytearray(path.read_bytes()), path

    def test_short_file(self, tmp_path):
        path = tmp_path / "w.tsr"
        path.write_bytes(b"TSR1")
        with pytest.raises(StoreFormatError, match="header"):
            tstore.read(path)

    def test_bad_magic(self, tmp_path):
        raw, path = self._good_bytes(tmp_path)
        raw[:4] = b"NOPE"
        path.write_bytes(raw)
        with pytest.raises(StoreFormatError, match="magic"):
            tstore.read(path)

    def test_unknown_version(self, tmp_path):
        raw, path = self._good_bytes(tmp_path)
        struct.pack_into("<I", raw, 4, 2)
        path.write_bytes(raw)
        with pytest.raises(StoreFormatError, match="version"):
            tstore.read(path)

    def test_truncated_payload(self, tmp_path):
        raw, path = self._good_bytes(tmp_path)
        path.write_bytes(raw[:-8])
        with pytest.raises(StoreFormatError, match="truncated|oversized"):
            tstore.read(path)

    def test_trailing_garbage(self, tmp_path):
        raw, path = self._good_bytes(tmp_path)
        path.write_bytes(bytes(raw) + b"\x00" * 16)
        with pytest.raises(StoreFormatError):
            tstore.read(path)

    def _tamper_manifest(self, tmp_path, mutate):
        raw, path = self._good_bytes(tmp_path)
        _, _, manifest_len, payload_len = struct.unpack_from("<4sIQQ", raw)
        manifest = json.loads(bytes(raw[24 : 24 + manifest_len]))
        mutate(manifest)
        blob = json.dumps(manifest, separators=(",", ":")).encode()
        struct.pack_into("<Q", raw, 8, len(blob))
        path.write_bytes(bytes(raw[:24]) + blob + bytes(raw[24 + manifest_len :]))
        return path

    def test_duplicate_names(self, tmp_path):
        def mutate(man):
            man["tensors"][1]["name"] = man["tensors"][0]["name"]
            man["tensors"][1]["offset"] = man["tensors"][0]["offset"]

        with pytest.raises(StoreFormatError, match="duplicate"):
            tstore.read(self._tamper_manifest(tmp_path, mutate))

    def test_overlapping_offsets(self, tmp_path):
        def mutate(man):
            man["tensors"][1]["offset"] = man["tensors"][0]["offset"] + 8

        with pytest.raises(StoreFormatError, match="overlap"):
            tstore.read(self._tamper_manifest(tmp_path, mutate))

    def test_misaligned_offset(self, tmp_path):
        def mutate(man):
            man["tensors"][0]["offset"] = 4

        with pytest.raises(StoreFormatError, match="misaligned"):
            tstore.read(self._tamper_manifest(tmp_path, mutate))

    def test_tensor_overruns_payload(self, tmp_path):
        def mutate(man):
            man["tensors"][-1]["rows"] = 10_000

        with pytest.raises(StoreFormatError, match="overrun|truncated"):
            tstore.read(self._tamper_manifest(tmp_path, mutate))

    def test_bad_tensor_name(self, tmp_path):
        def mutate(man):
            man["tensors"][0]["name"] = "a/b"

        with pytest.raises(StoreFormatError, match="forbidden"):
            tstore.read(self._tamper_manifest(tmp_path, mutate))

    def test_nonfinite_payload(self, tmp_path):
        raw, path = self._good_bytes(tmp_path)
        _, _, manifest_len, _ = struct.unpack_from("<4sIQQ", raw)
        struct.pack_into("<d", raw, 24 + manifest_len, np.nan)
        path.write_bytes(raw)
        with pytest.raises(StoreFormatError, match="non-finite"):
            tstore.read(path)

    def test_manifest_not_json(self, tmp_path):
        raw, path = self._good_bytes(tmp_path)
        raw[24] = ord("X")
        path.write_bytes(raw)
        with pytest.raises(StoreFormatError, match="manifest"):
            tstore.read(path)


class TestStoreApi:
    def test_duplicate_add_rejected(self):
        s = TensorStore()
        s.add("x", np.ones((1, 1)))
        with pytest.raises(StoreFormatError, match="duplicate"):
            s.add("x", np.ones((1, 1)))

    @pytest.mark.parametrize("name", ["", "a/b", "a\nb", "a\x00b", "café"])
    def test_invalid_names_rejected(self, name):
        with pytest.raises(StoreFormatError):
            TensorStore().add(name, np.ones((1, 1)))

    def test_contains_and_len(self):
        s = _sample_store()
        assert "layer0.q" in s
        assert "missing" not in s
        assert len(s) == 3
