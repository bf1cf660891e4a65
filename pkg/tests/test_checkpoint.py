import numpy as np
import pytest

from hsttn.checkpoint import (
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from hsttn.container import read_container, write_container
from hsttn.data import NormStats
from hsttn.errors import ContractError, IngestError
from hsttn.model import HSTTN, ModelConfig
from hsttn.training import Checkpoint, TrainConfig


def tiny_config(**kw):
    base = dict(n_turbines=2, history_len=6, horizon_len=6, n_channels=3,
                d_model=4, n_heads=2, pool_factors=(3,), dropout_rate=0.0)
    base.update(kw)
    return ModelConfig(**base)


def make_checkpoint(seed=0):
    model = HSTTN(tiny_config(), seed=seed)
    stats = NormStats(mean=np.array([1.0, 2.0, 3.0]), std=np.array([0.5, 1.5, 2.5]))
    return Checkpoint(
        model_config=model.config,
        parameters=model.params.state_arrays(),
        epoch=4,
        val_loss=0.1234,
        norm_stats=stats,
        train_config=TrainConfig(seed=seed),
        schema_dict={"channels": "a,b,c", "target": "c"},
    )


class TestContainer:
    def test_round_trip(self, tmp_path):
        header = {"kind": "test", "note": "x"}
        arrays = {
            "f": np.arange(12.0).reshape(3, 4),
            "b": np.array([True, False, True]),
            "i": np.arange(5),
        }
        path = tmp_path / "c.bin"
        write_container(path, header, arrays)
        h2, a2 = read_container(path)
        assert h2 == header
        for k in arrays:
            assert np.array_equal(a2[k], arrays[k])
            assert a2[k].dtype.kind == arrays[k].dtype.kind

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(IngestError, match="magic"):
            read_container(path)

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "c.bin"
        write_container(path, {"kind": "t"}, {"x": np.ones(8)})
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(IngestError, match="truncated"):
            read_container(path)

    def test_byte_determinism(self, tmp_path):
        arrays = {"w": np.linspace(0, 1, 7)}
        write_container(tmp_path / "a.bin", {"k": 1}, arrays)
        write_container(tmp_path / "b.bin", {"k": 1}, arrays)
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        ckpt = make_checkpoint()
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, ckpt)
        back = load_checkpoint(path)
        assert back.model_config == ckpt.model_config
        assert back.train_config == ckpt.train_config
        assert back.epoch == ckpt.epoch
        assert back.val_loss == ckpt.val_loss
        assert back.schema_dict == ckpt.schema_dict
        assert set(back.parameters) == set(ckpt.parameters)
        for name, arr in ckpt.parameters.items():
            assert np.array_equal(back.parameters[name], arr)
        assert np.array_equal(back.norm_stats.mean, ckpt.norm_stats.mean)
        assert np.array_equal(back.norm_stats.std, ckpt.norm_stats.std)

    def test_config_mismatch_refused(self, tmp_path):
        ckpt = make_checkpoint()
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, ckpt)
        with pytest.raises(ContractError, match="refusing"):
            load_checkpoint(path, expected_config=tiny_config(d_model=8))

    def test_expected_config_accepted(self, tmp_path):
        ckpt = make_checkpoint()
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, ckpt)
        assert load_checkpoint(path, expected_config=tiny_config()).epoch == 4

    def test_model_restoration_predicts_identically(self, tmp_path):
        ckpt = make_checkpoint(seed=3)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, ckpt)
        original = HSTTN(tiny_config(), seed=3)
        restored = model_from_checkpoint(load_checkpoint(path))
        x = np.random.default_rng(5).normal(size=(2, 6, 3))
        assert np.array_equal(original.predict(x), restored.predict(x))

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "d.bin"
        write_container(path, {"kind": "dataset"}, {"x": np.ones(2)})
        with pytest.raises(IngestError):
            load_checkpoint(path)
