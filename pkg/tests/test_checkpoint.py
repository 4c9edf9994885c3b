import numpy as np
import pytest
import torch

from idhider import checkpoint
from idhider.backbones import FaceParser, save_modules, load_modules

from conftest import states_equal


def test_pack_unpack_roundtrip_bit_exact():
    rng = np.random.default_rng(0)
    arrays = {
        "a": rng.standard_normal((3, 4)).astype(np.float32),
        "b.weight": rng.standard_normal((2, 3, 5, 5)).astype(np.float32),
        "c": rng.standard_normal(7).astype(np.float32),
    }
    header = {"arch": {"z_dim": 64}, "note": "x"}
    blob = checkpoint.pack(header, arrays)
    assert blob.startswith(b"IDHDR1")
    h2, a2 = checkpoint.unpack(blob)
    assert h2 == header
    assert a2.keys() == arrays.keys()
    for k in arrays:
        assert a2[k].dtype == np.float32
        assert np.array_equal(a2[k], arrays[k])


def test_bad_magic_rejected():
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.unpack(b"NOTHDR" + b"\x00" * 32)


def test_non_float32_rejected():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.pack({}, {"x": np.zeros(3, dtype=np.float64)})


def test_trailing_bytes_rejected():
    blob = checkpoint.pack({}, {"x": np.zeros(3, dtype=np.float32)})
    with pytest.raises(checkpoint.CheckpointError, match="trailing"):
        checkpoint.unpack(blob + b"junk")


def test_module_state_roundtrip(tmp_path):
    torch.manual_seed(3)
    parser_a = FaceParser(7)
    path = tmp_path / "p.idh"
    save_modules(path, {"face_parser": parser_a}, {"stage": "parser"})
    torch.manual_seed(99)
    parser_b = FaceParser(7)
    assert not states_equal(parser_a, parser_b)
    header = load_modules(path, {"face_parser": parser_b})
    assert header["stage"] == "parser"
    assert states_equal(parser_a, parser_b)


def test_missing_array_reported(tmp_path):
    torch.manual_seed(0)
    parser = FaceParser(7)
    path = tmp_path / "p.idh"
    save_modules(path, {"face_parser": parser})
    with pytest.raises(checkpoint.CheckpointError, match="missing"):
        load_modules(path, {"other": parser})
