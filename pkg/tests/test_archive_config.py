import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from ddm import archive, config
from ddm.exceptions import ArchiveFormatError, UsageError

arrays = st.one_of(
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
    hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
)
names = st.text(min_size=1, max_size=12)


class TestArchive:
    @given(st.dictionaries(names, arrays, max_size=4))
    def test_roundtrip_bitwise(self, entries):
        back = archive.decode(archive.encode(entries))
        assert list(back) == list(entries)
        for k, v in entries.items():
            assert back[k].dtype == v.dtype and back[k].shape == v.shape
            assert back[k].tobytes() == np.ascontiguousarray(v).tobytes()

    def test_header_layout(self):
        blob = archive.encode({"x": np.array([1.5], dtype=np.float32)})
        assert blob[:8] == b"DDTENSR1"
        assert struct.unpack_from("<HI", blob, 8) == (1, 1)
        assert blob[-4:] == struct.pack("<f", 1.5)

    def test_big_endian_input_stored_little(self):
        a = np.arange(3, dtype=">f8")
        back = archive.decode(archive.encode({"a": a.astype(np.float64)}))
        assert np.array_equal(back["a"], a)

    def test_rejects_int_dtype(self):
        with pytest.raises(ArchiveFormatError):
            archive.encode({"i": np.arange(3)})

    @pytest.mark.parametrize("mutate", [
        lambda b: b"XXXXXXXX" + b[8:],
        lambda b: b[:8] + struct.pack("<H", 9) + b[10:],
        lambda b: b[:-1],
        lambda b: b + b"\0",
        lambda b: b[:12],
    ])
    def test_malformed(self, mutate):
        blob = archive.encode({"x": np.zeros((2, 2)), "y": np.ones(3, np.float32)})
        with pytest.raises(ArchiveFormatError):
            archive.decode(mutate(blob))

    def test_duplicate_entry(self):
        one = archive.encode({"x": np.zeros(1)})
        body = one[14:]
        blob = one[:8] + struct.pack("<HI", 1, 2) + body + body
        with pytest.raises(ArchiveFormatError, match="duplicate"):
            archive.decode(blob)

    def test_bad_dtype_code(self):
        blob = bytearray(archive.encode({"x": np.zeros(1)}))
        blob[14 + 2 + 1] = 7
        with pytest.raises(ArchiveFormatError, match="dtype"):
            archive.decode(bytes(blob))

    def test_file_roundtrip_and_atomicity(self, tmp_path):
        p = tmp_path / "a.ddt"
        archive.write_archive(p, {"x": np.eye(2)})
        archive.write_archive(p, {"y": np.eye(3)})
        assert list(archive.read_archive(p)) == ["y"]
        assert [q.name for q in tmp_path.iterdir()] == ["a.ddt"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ArchiveFormatError):
            archive.read_archive(tmp_path / "nope.ddt")

    @given(st.text())
    def test_text_roundtrip(self, text):
        assert archive.array_to_text(archive.text_to_array(text)) == text

    def test_text_rejects_non_bytes(self):
        with pytest.raises(ArchiveFormatError):
            archive.array_to_text(np.array([1.5], np.float32))

    def test_json_entry(self):
        obj = {"b": [1, 2], "a": "x"}
        assert archive.entry_json(archive.json_entry(obj)) == obj


class TestConfig:
    def test_defaults_roundtrip(self):
        cfg = config.RunConfig()
        assert config.loads(config.dumps(cfg)) == cfg

    def test_hash_stable(self):
        a = config.RunConfig()
        b = config.loads(json.dumps(a.to_dict(), indent=7))
        assert a.hash() == b.hash() and len(a.hash()) == 64
        c = config.from_dict({**a.to_dict(), "uq": {**a.to_dict()["uq"], "S": 32}})
        assert c.hash() != a.hash()

    def test_int_accepted_as_float(self):
        raw = config.RunConfig().to_dict()
        raw["operator"]["noise_level"] = 0
        assert config.from_dict(raw).operator.noise_level == 0.0

    @pytest.mark.parametrize("edit, match", [
        (lambda r: r.update(extra={}), "unknown sections"),
        (lambda r: r.pop("uq"), "missing sections"),
        (lambda r: r["model"].update(depth=3), "unknown keys"),
        (lambda r: r["model"].pop("T"), "missing keys"),
        (lambda r: r["model"].update(T="20"), "integer"),
        (lambda r: r["model"].update(T=True), "integer"),
        (lambda r: r["trainer"].update(learning_rate="fast"), "number"),
        (lambda r: r["uq"].update(mode="other"), "one of"),
        (lambda r: r["data"].update(train_fraction=1.0), "train_fraction"),
        (lambda r: r["uq"].update(S=1), "uq.S"),
        (lambda r: r.update(model=[]), "object"),
    ])
    def test_strict(self, edit, match):
        raw = config.RunConfig().to_dict()
        edit(raw)
        with pytest.raises(config.ConfigError, match=match):
            config.from_dict(raw)

    def test_errors_are_usage_errors(self, tmp_path):
        with pytest.raises(UsageError):
            config.loads("{not json")
        with pytest.raises(UsageError):
            config.load(tmp_path / "missing.json")

    def test_workdir(self, tmp_path):
        cfg = config.RunConfig()
        assert cfg.workdir(tmp_path) == tmp_path / "run"
        assert cfg.workdir() == config.Path("run")
