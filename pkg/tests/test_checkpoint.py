import numpy as np
import pytest

from sepmamba import separator as sep
from sepmamba.checkpoint import load_checkpoint, save_checkpoint
from sepmamba.errors import DataError

CFG = sep.SeparatorConfig(n_stages=3, base_dim=4, blocks_per_stage=2, kernel_size=4, n_state=4, causal=True)


@pytest.fixture(scope="module")
def weights():
    return sep.build(CFG, seed=2)


@pytest.fixture
def saved(tmp_path, weights):
    path = tmp_path / "a.sepm"
    opt = {"opt.m.stem.w": np.full((4, 1, 4), 0.5), "opt.v.stem.w": np.ones((4, 1, 4))}
    save_checkpoint(path, weights, {"step": 7, "losses": [1.5, -2.0], "note": "x"}, opt)
    return path


def test_round_trip_is_exact(saved, weights):
    ck = load_checkpoint(saved)
    assert ck.config == CFG
    assert ck.train == {"step": 7, "losses": [1.5, -2.0], "note": "x"}
    for k, t in weights.items():
        assert ck.weights[k].data.dtype == t.data.dtype
        assert ck.weights[k].data.tobytes() == t.data.tobytes()
    assert ck.optimizer["opt.m.stem.w"].dtype == np.float64
    np.testing.assert_array_equal(ck.optimizer["opt.v.stem.w"], 1.0)


def test_loaded_model_separates_identically(saved, weights):
    x = np.random.default_rng(0).uniform(-0.5, 0.5, 64).astype(np.float32)
    assert sep.separate(load_checkpoint(saved).weights, x).tobytes() == sep.separate(weights, x).tobytes()


def test_f64_weights_round_trip(tmp_path, weights):
    w64 = weights.astype("f64")
    save_checkpoint(tmp_path / "d.sepm", w64)
    assert all(t.data.dtype == np.float64 for _, t in load_checkpoint(tmp_path / "d.sepm").weights.items())


def test_no_temp_file_left(saved):
    assert [p.name for p in saved.parent.iterdir()] == ["a.sepm"]


@pytest.mark.parametrize("cut", [1, 100, 2000])
def test_truncated(saved, cut):
    raw = saved.read_bytes()
    saved.write_bytes(raw[:-cut])
    with pytest.raises(DataError):
        load_checkpoint(saved)


def test_flipped_payload_byte(saved):
    raw = bytearray(saved.read_bytes())
    raw[-10] ^= 0xFF
    saved.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="checksum"):
        load_checkpoint(saved)


def test_wrong_magic(tmp_path):
    (tmp_path / "x.sepm").write_bytes(b"PK\x03\x04garbage")
    with pytest.raises(DataError, match="not a SEPM1"):
        load_checkpoint(tmp_path / "x.sepm")


def test_config_and_tensor_disagree(saved):
    raw = saved.read_bytes().replace(b"base_dim = 4", b"base_dim = 8")
    saved.write_bytes(raw)
    with pytest.raises(DataError, match="shape"):
        load_checkpoint(saved)


def test_bad_config_value(saved):
    saved.write_bytes(saved.read_bytes().replace(b"n_stages = 3", b"n_stages = 4"))
    with pytest.raises(DataError, match="config"):
        load_checkpoint(saved)


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "none.sepm")
