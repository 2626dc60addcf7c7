import numpy as np
import pytest
import torch

from fidcal import io


def test_array_roundtrip(tmp_path):
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    io.write_array(tmp_path / "a.fcarr", arr, {"metric": "l1"})
    back, meta = io.read_array(tmp_path / "a.fcarr")
    np.testing.assert_array_equal(back, arr)
    assert meta["metric"] == "l1" and meta["shape"] == [2, 3, 4] and meta["dtype"] == "<f4"


def test_array_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"not an array")
    with pytest.raises(ValueError):
        io.read_array(tmp_path / "x")


def test_checkpoint_kind_check(tmp_path):
    m = torch.nn.Linear(2, 3)
    io.save_checkpoint(tmp_path / "c.ckpt", "denoiser", {"a": 1}, m.state_dict(), note="x")
    ck = io.load_checkpoint(tmp_path / "c.ckpt", "denoiser")
    assert ck["config"] == {"a": 1} and ck["meta"]["note"] == "x"
    assert set(ck["state_dict"]) == {"weight", "bias"}
    with pytest.raises(ValueError):
        io.load_checkpoint(tmp_path / "c.ckpt", "classifier")
    with pytest.raises(FileNotFoundError):
        io.load_checkpoint(tmp_path / "missing.ckpt")


def test_state_dict_hash_sensitive():
    m = torch.nn.Linear(2, 2)
    h = io.state_dict_sha256(m.state_dict())
    assert h == io.state_dict_sha256(m.state_dict())
    with torch.no_grad():
        m.weight[0, 0] += 1e-6
    assert h != io.state_dict_sha256(m.state_dict())


def test_atomic_write_leaves_no_temp(tmp_path):
    io.atomic_write_text(tmp_path / "f.txt", "hello")
    assert [p.name for p in tmp_path.iterdir()] == ["f.txt"]
