"""
Tests for checkpoint files: atomic writes, integrity checks, config digests.
"""

from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pytest

from swinfi.csiprep import NormStats
from swinfi.errors import FormatError, IncompatibleCheckpointError, LengthError
from swinfi.model import SwinFi
from swinfi.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint


@pytest.fixture
def model(tiny_cfg, f64):
    return SwinFi(tiny_cfg, seed=2)


@pytest.fixture
def stats():
    return NormStats(mean=np.array([1.0, -2.0]), std=np.array([0.5, 3.0]))


class TestCheckpoint:
    def test_restores_parameters_and_metadata(self, model, stats, tmp_path):
        path = save_checkpoint(tmp_path / "ae.swck", model, "amplitude", stats,
                               has_head=False, meta={"step": 12})
        ckpt = load_checkpoint(path, expected_digest=model.digest)
        assert ckpt.mode == "amplitude"
        assert ckpt.has_head is False
        assert ckpt.meta == {"step": 12}
        npt.assert_array_equal(ckpt.norm_stats.std, [0.5, 3.0])
        for (name, p), (_, q) in zip(model.named_parameters(), ckpt.model.named_parameters()):
            npt.assert_array_equal(q.data, p.data.astype(np.float32), err_msg=name)

    def test_no_temporary_files_left(self, model, tmp_path):
        save_checkpoint(tmp_path / "ae.swck", model)
        save_checkpoint(tmp_path / "ae.swck", model, has_head=True)
        assert [p.name for p in tmp_path.iterdir()] == ["ae.swck"]
        assert load_checkpoint(tmp_path / "ae.swck").has_head is True

    def test_bytes_are_deterministic(self, model, stats):
        assert checkpoint_bytes(model, norm_stats=stats) == checkpoint_bytes(model, norm_stats=stats)

    def test_truncated_file(self, model, tmp_path):
        path = save_checkpoint(tmp_path / "ae.swck", model)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(LengthError):
            load_checkpoint(path)

    def test_trailing_bytes(self, model, tmp_path):
        path = save_checkpoint(tmp_path / "ae.swck", model)
        path.write_bytes(path.read_bytes() + b"\0\0\0\0")
        with pytest.raises(LengthError):
            load_checkpoint(path)

    def test_bad_magic(self, model, tmp_path):
        path = tmp_path / "ae.swck"
        path.write_bytes(b"ABCD" + checkpoint_bytes(model)[4:])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_digest_mismatch(self, model, tiny_cfg, tmp_path):
        path = save_checkpoint(tmp_path / "ae.swck", model)
        other = replace(tiny_cfg, C=16)
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(path, expected_digest=other.digest())
