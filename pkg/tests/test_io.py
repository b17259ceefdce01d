import numpy as np
import pytest

from splatattack import io


def test_pfm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    for arr in (rng.normal(size=(7, 5)).astype(np.float32), rng.uniform(size=(4, 6, 3)).astype(np.float32)):
        back = io.read_pfm(io.write_pfm(tmp_path / "x.pfm", arr))
        assert back.shape == arr.shape and np.array_equal(back, arr)


def test_pfm_layout(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    raw = io.write_pfm(tmp_path / "a.pfm", arr).read_bytes()
    assert raw.startswith(b"Pf\n3 2\n-1.0\n")
    body = np.frombuffer(raw[len(b"Pf\n3 2\n-1.0\n"):], dtype="<f4")
    assert body.tolist() == [3, 4, 5, 0, 1, 2]  # bottom row first
    with pytest.raises(ValueError):
        io.write_pfm(tmp_path / "b.pfm", np.zeros((2, 2, 2)))


def test_png_and_mask(tmp_path):
    img = np.random.default_rng(1).uniform(size=(9, 11, 3))
    back = io.read_png(io.write_png(tmp_path / "i.png", img))
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12
    mask = np.random.default_rng(2).uniform(size=(13, 17)) > 0.5
    assert np.array_equal(io.read_mask_png(io.write_mask_png(tmp_path / "m.png", mask)), mask)


def test_json_csv(tmp_path):
    payload = {"b": [1, 2.5], "a": {"x": None}}
    assert io.read_json(io.write_json(tmp_path / "p.json", payload)) == payload
    rows = io.read_csv(io.write_csv(tmp_path / "t.csv", ["i", "v"], [[0, repr(0.1)], [1, "2"]]))
    assert rows == [{"i": "0", "v": "0.1"}, {"i": "1", "v": "2"}]
