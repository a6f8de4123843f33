"""
Tests for the feature-image wire record.
"""

import io

import numpy as np
import numpy.testing as npt
import pytest

from swinfi.errors import FormatError, IncompatibleCheckpointError, LengthError
from swinfi.model import FeatureImage, ModelConfig
from swinfi.wire import (
    HEADER_SIZE, deserialize_feature_image, header_problem, iter_records, payload_size, record_size,
    serialize_feature_image
)


DIGEST = 0x1122334455667788


def feature_image(rng, frame_id=5, grid=(2, 4), dim=8):
    feats = rng.normal(size=(grid[0] * grid[1], dim)).astype(np.float32)
    return FeatureImage(grid=grid, feats=feats, frame_id=frame_id, config_digest=DIGEST)


class TestRecord:
    def test_header_is_24_bytes(self):
        assert HEADER_SIZE == 24

    def test_default_config_payload(self):
        cfg = ModelConfig()
        assert payload_size(cfg.feature_grid, cfg.C) == 16384
        assert record_size(cfg.feature_grid, cfg.C) == 16408

    def test_layout(self, rng):
        record = serialize_feature_image(feature_image(rng))
        assert len(record) == 24 + 2 * 4 * 8 * 4
        assert record[:4] == b"SWFI"
        assert record[4] == 1 and record[5] == 0
        assert int.from_bytes(record[6:8], "little") == 8
        assert int.from_bytes(record[12:16], "little") == 5
        assert int.from_bytes(record[16:24], "little") == DIGEST

    def test_decoded_values_are_bit_exact(self, rng):
        fi = feature_image(rng)
        back = deserialize_feature_image(serialize_feature_image(fi), expected_digest=DIGEST)
        assert back.grid == (2, 4) and back.frame_id == 5
        npt.assert_array_equal(back.feats.view(np.uint32), fi.feats.view(np.uint32))

    def test_bad_magic(self, rng):
        record = bytearray(serialize_feature_image(feature_image(rng)))
        record[:4] = b"NOPE"
        with pytest.raises(FormatError):
            deserialize_feature_image(bytes(record))

    def test_bad_version(self, rng):
        record = bytearray(serialize_feature_image(feature_image(rng)))
        record[4] = 9
        with pytest.raises(FormatError):
            deserialize_feature_image(bytes(record))

    @pytest.mark.parametrize("cut", [10, 100])
    def test_truncated(self, rng, cut):
        record = serialize_feature_image(feature_image(rng))
        with pytest.raises(LengthError):
            deserialize_feature_image(record[:cut])

    def test_trailing_bytes(self, rng):
        record = serialize_feature_image(feature_image(rng))
        with pytest.raises(LengthError):
            deserialize_feature_image(record + b"\0")

    def test_digest_mismatch(self, rng):
        record = serialize_feature_image(feature_image(rng))
        with pytest.raises(IncompatibleCheckpointError):
            deserialize_feature_image(record, expected_digest=DIGEST + 1)

    def test_frame_id_must_fit(self, rng):
        with pytest.raises(FormatError):
            serialize_feature_image(feature_image(rng, frame_id=2 ** 32))


class TestRecordStream:
    def test_splits_concatenated_records(self, rng):
        records = [serialize_feature_image(feature_image(rng, frame_id=i)) for i in range(3)]
        split = list(iter_records(io.BytesIO(b"".join(records))))
        assert split == records

    def test_resyncs_past_corrupt_magic(self, rng):
        records = [serialize_feature_image(feature_image(rng, frame_id=i)) for i in range(3)]
        middle = bytearray(records[1])
        middle[0] ^= 0xFF
        reasons = []
        split = list(iter_records(io.BytesIO(records[0] + bytes(middle) + records[2]), on_skip=reasons.append))
        assert split == [records[0], records[2]]
        assert len(reasons) == 1 and "magic" in reasons[0]

    def test_unexpected_dims_are_not_trusted_as_a_length(self, rng):
        records = [serialize_feature_image(feature_image(rng, frame_id=i)) for i in range(4)]
        middle = bytearray(records[1])
        middle[6:8] = (7).to_bytes(2, "little")
        reasons = []
        stream = io.BytesIO(records[0] + bytes(middle) + records[2] + records[3])
        split = list(iter_records(stream, expected=(8, 2, 4), on_skip=reasons.append))
        assert [deserialize_feature_image(r).frame_id for r in split] == [0, 2, 3]
        assert len(reasons) == 1

    def test_garbage_tail_is_dropped(self, rng):
        record = serialize_feature_image(feature_image(rng))
        reasons = []
        split = list(iter_records(io.BytesIO(record + b"\x00" * 100), on_skip=reasons.append))
        assert split == [record]
        assert len(reasons) == 1

    def test_header_problem(self, rng):
        header = serialize_feature_image(feature_image(rng))[:HEADER_SIZE]
        assert header_problem(header) is None
        assert header_problem(header, expected=(8, 2, 4)) is None
        assert "expects" in header_problem(header, expected=(8, 4, 2))

    def test_truncated_stream(self, rng):
        record = serialize_feature_image(feature_image(rng))
        stream = io.BytesIO(record + record[:30])
        reader = iter_records(stream)
        assert next(reader) == record
        with pytest.raises(LengthError):
            next(reader)

    def test_empty_stream(self):
        assert list(iter_records(io.BytesIO(b""))) == []
