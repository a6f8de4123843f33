"""
Tests for CSI preprocessing: capture container, masks, phase sanitization,
framing and batch standardization.
"""

import numpy as np
import numpy.testing as npt
import pytest

from swinfi.csiprep import (
    CAPTURE_MAGIC, LinearFitParams, RawCsiCapture, amplitude_db, assemble_batch, capture_from_bytes,
    capture_to_bytes, channels_for_mode, compute_norm_stats, default_usable_mask,
    frame_windows, linear_fit_correct, load_frame_archive, mask_subcarriers,
    parse_capture, raw_bandwidth_bps, sanitize_phase, save_frame_archive,
    subcarrier_indices, unwrap_phase, write_capture
)
from swinfi.errors import (
    ConfigError, DegenerateDataError, DegenerateFitError, FormatError, LengthError, ShapeError
)


def random_capture(rng, packets=40, antennas=2, subcarriers=16, label=1):
    values = rng.normal(size=(packets, antennas, subcarriers)) + 1j * rng.normal(size=(packets, antennas, subcarriers))
    return RawCsiCapture(packets=values, sample_rate_hz=100.0, label=label, source="test.csi")


class TestCaptureContainer:
    def test_file_preserves_values_and_header(self, rng, tmp_path):
        capture = random_capture(rng)
        loaded = parse_capture(write_capture(capture, tmp_path / "cap.csi"))
        npt.assert_array_equal(loaded.packets, capture.packets)
        assert loaded.label == 1
        assert loaded.sample_rate_hz == 100.0
        assert loaded.source == "cap.csi"

    def test_bad_magic(self, rng):
        buf = bytearray(capture_to_bytes(random_capture(rng)))
        buf[:4] = b"XXXX"
        with pytest.raises(FormatError):
            capture_from_bytes(bytes(buf))

    def test_truncated_payload(self, rng):
        buf = capture_to_bytes(random_capture(rng))
        with pytest.raises(LengthError):
            capture_from_bytes(buf[:-8])

    def test_shorter_than_header(self):
        with pytest.raises(LengthError):
            capture_from_bytes(CAPTURE_MAGIC)

    def test_rejects_non_positive_rate(self):
        with pytest.raises(ConfigError):
            RawCsiCapture(packets=np.zeros((1, 1, 4), dtype=complex), sample_rate_hz=0.0)

    def test_raw_bandwidth(self):
        assert raw_bandwidth_bps(4, 256, 100) == pytest.approx(6.5536e6)


class TestSubcarrierMasks:
    @pytest.mark.parametrize("fft_size, usable", [(64, 52), (128, 108), (256, 234)])
    def test_usable_counts(self, fft_size, usable):
        assert default_usable_mask(fft_size).sum() == usable

    def test_masks_are_symmetric(self):
        for fft_size in (64, 128, 256):
            k = subcarrier_indices(fft_size)
            mask = default_usable_mask(fft_size)
            usable = set(k[mask].tolist())
            assert usable == {-v for v in usable}

    def test_unknown_size_is_fully_usable(self):
        assert default_usable_mask(30).all()

    def test_mask_zeroes_rows(self):
        matrix = np.ones((3, 8))
        mask = np.array([True, False] * 4)
        out = mask_subcarriers(matrix, mask)
        assert out[:, 1::2].sum() == 0
        assert out[:, ::2].sum() == 12

    def test_mask_length_mismatch(self):
        with pytest.raises(ShapeError):
            mask_subcarriers(np.ones((3, 8)), np.ones(7, dtype=bool))


class TestPhase:
    def test_amplitude_db_of_known_magnitudes(self):
        packets = np.array([[[1.0, 10.0j, 0.0]]])
        capture = RawCsiCapture(packets=packets, sample_rate_hz=100.0, label=0, source="amp")
        db = amplitude_db(capture)
        npt.assert_allclose(db[0, 0, :2], [0.0, 20.0], atol=1e-9)
        assert np.isfinite(db[0, 0, 2]) and db[0, 0, 2] < -200

    def test_unwrap_known_vector(self):
        npt.assert_allclose(unwrap_phase(np.array([0.0, 3.0, -3.0])),
                            [0.0, 3.0, -3.0 + 2 * np.pi], atol=1e-12)

    def test_unwrap_is_idempotent(self, rng):
        phi = np.angle(np.exp(1j * np.cumsum(rng.uniform(-3, 3, size=50))))
        once = unwrap_phase(phi)
        npt.assert_allclose(unwrap_phase(once), once)
        assert np.all(np.abs(np.diff(once)) <= np.pi + 1e-12)

    def test_unwrap_random_vectors(self, rng):
        phi = rng.uniform(-np.pi, np.pi, size=(1000, 64))
        out = unwrap_phase(phi)
        steps = np.diff(out, axis=-1)
        assert np.all(steps > -np.pi - 1e-12) and np.all(steps <= np.pi + 1e-12)
        npt.assert_array_equal(out[:, 0], phi[:, 0])
        turns = (out - phi) / (2 * np.pi)
        npt.assert_allclose(turns, np.round(turns), atol=1e-9)

    def test_unwrap_recovers_a_sawtooth(self):
        k = np.arange(234, dtype=float)
        line = 0.5 * k
        wrapped = np.angle(np.exp(1j * line))
        assert np.abs(np.diff(wrapped)).max() > np.pi
        npt.assert_allclose(unwrap_phase(wrapped), line, atol=1e-9)
        record = linear_fit_correct(unwrap_phase(wrapped), k)
        assert record.a_slope == pytest.approx(0.5, abs=1e-12)
        npt.assert_allclose(record.phi_tilde, 0.0, atol=1e-9)

    def test_linear_fit_leaves_a_sinusoid(self):
        k = np.arange(-32, 33, dtype=float)
        ripple = np.sin(2 * np.pi * k / 64)
        record = linear_fit_correct(0.2 * k + 0.7 + ripple, k)
        residual = record.phi_tilde
        assert abs(residual[0]) < 1e-9 and abs(residual[-1]) < 1e-9
        assert abs(residual.mean()) < 1e-9
        npt.assert_allclose(residual, ripple, atol=1e-9)

    def test_linear_fit_removes_line(self):
        k = np.arange(-10, 11, dtype=float)
        record = linear_fit_correct(0.3 * k + 1.2, k)
        assert record.a_slope == pytest.approx(0.3)
        assert record.b_intercept == pytest.approx(1.2)
        npt.assert_allclose(record.phi_tilde, 0.0, atol=1e-12)

    def test_linear_fit_degenerate(self):
        with pytest.raises(DegenerateFitError):
            LinearFitParams(n=1)
        with pytest.raises(ShapeError):
            linear_fit_correct(np.zeros(3), np.array([0.0, 2.0, 1.0]))

    def test_sanitize_removes_wrapped_linear_error(self):
        k = subcarrier_indices(64)
        true_phase = 0.05 * k + 2.5 + np.array([[0.0], [0.7]])
        packets = np.exp(1j * true_phase)[None].repeat(3, axis=0)
        corrected = sanitize_phase(RawCsiCapture(packets=packets))
        mask = default_usable_mask(64)
        npt.assert_allclose(corrected[..., mask], 0.0, atol=1e-5)
        assert np.all(corrected[..., ~mask] == 0)


class TestFraming:
    def test_frame_count_and_layout(self, rng):
        capture = random_capture(rng, packets=30000, antennas=1, subcarriers=4)
        frames = frame_windows(capture, T=256)
        assert len(frames) == 117
        assert frames[0].data.shape == (2, 4, 256)
        assert frames[1].start == 256

    def test_amplitude_channels_come_first(self, rng):
        capture = random_capture(rng, packets=8, antennas=2, subcarriers=16)
        frame = frame_windows(capture, T=8)[0]
        expected = 20 * np.log10(np.abs(capture.packets[:, 0, :].astype(np.complex128)) + 1e-12)
        npt.assert_allclose(frame.data[0], expected.T, atol=1e-4)

    def test_short_capture_yields_nothing(self, rng):
        assert frame_windows(random_capture(rng, packets=5), T=8) == []

    def test_overlapping_stride(self, rng):
        frames = frame_windows(random_capture(rng, packets=16), T=8, stride=4)
        assert [f.start for f in frames] == [0, 4, 8]


class TestBatching:
    def test_standardized_usable_rows(self, rng):
        frames = frame_windows(random_capture(rng, packets=64, subcarriers=64), T=8)
        batch = assemble_batch(frames, "amplitude")
        mask = batch.usable_mask
        assert batch.data.shape == (8, 2, 64, 8)
        assert np.all(batch.data[:, :, ~mask, :] == 0)
        usable = batch.data[:, :, mask, :].astype(np.float64)
        npt.assert_allclose(usable.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        npt.assert_allclose(usable.std(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_mixed_mode_keeps_all_channels(self, rng):
        frames = frame_windows(random_capture(rng, packets=16), T=8)
        assert assemble_batch(frames, "mixed").data.shape[1] == 4
        assert channels_for_mode("mixed", 2) == 4
        assert channels_for_mode("phase", 2) == 2

    def test_reuses_training_statistics(self, rng):
        train = frame_windows(random_capture(rng, packets=32), T=8)
        test = frame_windows(random_capture(rng, packets=16, label=2), T=8)
        stats = assemble_batch(train, "amplitude").norm_stats
        batch = assemble_batch(test, "amplitude", norm_stats=stats)
        assert batch.norm_stats is stats
        npt.assert_array_equal(batch.labels, [2, 2])

    def test_constant_channel_is_degenerate(self):
        data = np.ones((2, 1, 4, 3))
        with pytest.raises(DegenerateDataError):
            compute_norm_stats(data, np.ones(4, dtype=bool))

    def test_empty_without_statistics(self):
        with pytest.raises(DegenerateDataError):
            assemble_batch([], "amplitude")

    def test_unknown_mode(self, rng):
        with pytest.raises(ConfigError):
            assemble_batch(frame_windows(random_capture(rng, packets=8), T=8), "power")

    def test_frame_archive(self, rng, tmp_path):
        frames = frame_windows(random_capture(rng, packets=32), T=8)
        batch = assemble_batch(frames, "amplitude", frame_ids=[10, 11, 12, 13])
        splits = {"train": batch.subset(slice(0, 3)), "test": batch.subset(slice(3, 4))}
        loaded = load_frame_archive(save_frame_archive(tmp_path / "frames.npz", splits))
        assert sorted(loaded) == ["test", "train"]
        npt.assert_array_equal(loaded["test"].frame_ids, [13])
        npt.assert_array_equal(loaded["train"].data, batch.data[:3])
        assert loaded["train"].mode == "amplitude"
