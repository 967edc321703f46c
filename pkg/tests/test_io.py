import numpy as np
import pytest

from bottlemask.io import MetricLog, load_checkpoint, save_checkpoint


class TestCheckpoint:
    def test_round_trip_preserves_arrays_and_config(self, tmp_path):
        tensors = {
            "mask.trunk.0.weight": np.random.default_rng(0).normal(size=(4, 2, 3, 3)).astype(np.float32),
            "vae.head.bias": np.random.default_rng(1).normal(size=(8,)).astype(np.float64),
        }
        config = {"objective": "ib", "steps": "10"}
        save_checkpoint(tmp_path / "ckpt", tensors, config)
        loaded, loaded_config = load_checkpoint(tmp_path / "ckpt")
        assert loaded_config == config
        for name, arr in tensors.items():
            assert np.array_equal(loaded[name], arr)
            assert loaded[name].dtype == arr.dtype

    def test_arrays_stored_little_endian_raw(self, tmp_path):
        arr = np.arange(6, dtype=np.float32).reshape(2, 3)
        save_checkpoint(tmp_path / "ckpt", {"w": arr}, {})
        blob = (tmp_path / "ckpt" / "params" / "w.bin").read_bytes()
        assert blob == arr.astype("<f4").tobytes()

    def test_manifest_is_plain_key_value_text(self, tmp_path):
        save_checkpoint(tmp_path / "ckpt", {"w": np.zeros(2, dtype=np.float32)}, {"seed": "3"})
        lines = (tmp_path / "ckpt" / "manifest.txt").read_text().splitlines()
        assert lines[0].startswith("format=")
        assert "config.seed=3" in lines
        assert any(line.startswith("param.w=") for line in lines)

    def test_missing_manifest_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nothing")


class TestMetricLog:
    def test_jsonl_round_trip(self, tmp_path):
        log = MetricLog()
        log.append({"kind": "step", "step": 0, "total_loss": 1.25})
        log.append({"kind": "eval", "step": 1, "accuracy": 0.5})
        log.save(tmp_path / "metrics.jsonl")
        again = MetricLog.load(tmp_path / "metrics.jsonl")
        assert again == log
        assert len(again) == 2

    def test_kind_filters(self):
        log = MetricLog([{"kind": "step", "step": 0}, {"kind": "eval", "step": 5}])
        assert log.of_kind("step") == [{"kind": "step", "step": 0}]
        assert log.last_eval() == {"kind": "eval", "step": 5}
        assert MetricLog().last_eval() is None
