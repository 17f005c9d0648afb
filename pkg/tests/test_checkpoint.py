"""Binary checkpoint format round trips."""

import numpy as np
import pytest

from smoelab.checkpoint import MAGIC, Record, read_checkpoint, write_checkpoint
from smoelab.errors import ContractError


def test_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    records = [
        Record("alpha", rng.normal(size=(3, 4)), True),
        Record("beta.gamma", rng.normal(size=7), False),
        Record("scalar", np.asarray(3.25), True),
    ]
    path = tmp_path / "x.bin"
    write_checkpoint(path, "[checkpoint]\nstep = 5\n", records)
    text, back = read_checkpoint(path)
    assert text == "[checkpoint]\nstep = 5\n"
    assert [r.name for r in back] == ["alpha", "beta.gamma", "scalar"]
    for orig, loaded in zip(records, back):
        assert loaded.trainable == orig.trainable
        assert loaded.array.shape == np.asarray(orig.array).shape
        assert np.array_equal(loaded.array, orig.array)
        assert loaded.array.tobytes() == np.ascontiguousarray(orig.array).tobytes()


def test_magic_bytes_lead_the_file(tmp_path):
    path = tmp_path / "x.bin"
    write_checkpoint(path, "cfg", [])
    assert path.read_bytes()[:8] == MAGIC == b"SMOELAB1"


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "y.bin"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(ContractError):
        read_checkpoint(path)


def test_values_are_little_endian_float64(tmp_path):
    path = tmp_path / "z.bin"
    write_checkpoint(path, "", [Record("v", np.array([1.5]), True)])
    raw = path.read_bytes()
    # trailing 8 bytes are the single little-endian float64 value
    assert np.frombuffer(raw[-8:], dtype="<f8")[0] == 1.5
    # flags byte precedes the values: bit0 set for trainable
    assert raw[-9] == 1


def test_write_is_atomic_no_temp_left(tmp_path):
    path = tmp_path / "a.bin"
    write_checkpoint(path, "cfg", [Record("v", np.zeros(4), True)])
    write_checkpoint(path, "cfg2", [Record("v", np.ones(4), True)])
    leftovers = [p for p in tmp_path.iterdir() if p.suffix == ".tmp"]
    assert leftovers == []
    text, _ = read_checkpoint(path)
    assert text == "cfg2"
