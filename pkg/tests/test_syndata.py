"""
Tests for the synthetic CSI generator and the per-class split.
"""

from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pytest

from swinfi.csiprep import default_usable_mask, sanitize_phase
from swinfi.errors import ConfigError
from swinfi.syndata import (
    ClassSignature, PhaseErrorSpec, SynthSpec, generate_capture, generate_dataset,
    phase_error_terms, split_indices
)


class TestSynthSpec:
    def test_default_signatures_are_distinct(self):
        spec = SynthSpec()
        valid, errors = spec.validate()
        assert valid, errors
        signatures = spec.resolved_signatures()
        assert len(signatures) == 8
        assert len({sig[0].doppler_hz for sig in signatures}) == 8

    def test_signature_count_must_match_classes(self):
        spec = SynthSpec(n_classes=2, signatures=[[ClassSignature(5.0, 0.0, 2.0)]])
        with pytest.raises(ConfigError):
            spec.check()

    def test_doppler_above_nyquist(self):
        spec = SynthSpec(n_classes=1, signatures=[[ClassSignature(60.0, 0.0, 2.0)]])
        valid, errors = spec.validate()
        assert not valid
        assert "doppler" in errors[0]

    def test_repeated_signature(self):
        sig = [ClassSignature(5.0, 0.0, 2.0)]
        valid, errors = SynthSpec(n_classes=2, signatures=[sig, sig]).validate()
        assert not valid
        assert any("repeats" in e for e in errors)

    def test_from_dict(self):
        spec = SynthSpec.from_dict({
            "n_classes": 2,
            "phase_error": {"slope_range": [-0.1, 0.1], "noise_std": 0.01},
            "signatures": [[{"doppler_hz": 3.0, "subcarrier_center": -5, "bandwidth": 2}],
                           [[7.0, 5, 2]]],
        })
        assert spec.phase_error.slope_range == (-0.1, 0.1)
        assert spec.resolved_signatures()[1][0].doppler_hz == 7.0
        with pytest.raises(ConfigError):
            SynthSpec.from_dict({"n_clases": 2})


class TestGenerateCapture:
    def test_deterministic(self, tiny_spec):
        a = generate_capture(tiny_spec, 1)
        b = generate_capture(tiny_spec, 1)
        npt.assert_array_equal(a.packets, b.packets)
        assert a.packets.shape == (96, 2, 16)
        assert a.label == 1

    def test_seed_changes_output(self, tiny_spec):
        a = generate_capture(tiny_spec, 0)
        b = generate_capture(replace(tiny_spec, seed=4), 0)
        assert not np.array_equal(a.packets, b.packets)

    def test_class_out_of_range(self, tiny_spec):
        with pytest.raises(ConfigError):
            generate_capture(tiny_spec, 3)

    def test_sanitizer_removes_injected_phase_error(self):
        clean = SynthSpec(n_classes=2, packets_per_class=8, snr_db=float("inf"), phase_error=None)
        corrupted = replace(clean, phase_error=PhaseErrorSpec())
        slopes, offsets = phase_error_terms(corrupted, 1)
        assert np.any(slopes != 0) and np.any(offsets != 0)

        mask = default_usable_mask(64)
        expected = sanitize_phase(generate_capture(clean, 1))[..., mask]
        actual = sanitize_phase(generate_capture(corrupted, 1))[..., mask]
        npt.assert_allclose(actual, expected, atol=1e-4)


class TestSplits:
    def test_split_is_stratified_and_disjoint(self):
        labels = np.repeat([0, 1, 2], 20)
        splits = split_indices(labels, split_seed=3)
        everything = np.concatenate(list(splits.values()))
        assert sorted(everything.tolist()) == list(range(60))
        for name, count in (("train", 14), ("val", 3), ("test", 3)):
            assert np.all(np.bincount(labels[splits[name]], minlength=3) == count)

    def test_split_seed_changes_membership(self):
        labels = np.repeat([0, 1], 20)
        a, b = split_indices(labels, 0), split_indices(labels, 1)
        assert len(a["test"]) == len(b["test"])
        assert set(a["test"].tolist()) != set(b["test"].tolist())


class TestGenerateDataset:
    def test_frames_and_batches(self, tiny_spec):
        dataset = generate_dataset(tiny_spec, T=8)
        assert len(dataset.frames) == 36
        batches = dataset.batches("amplitude")
        assert batches["train"].data.shape == (24, 2, 16, 8)
        assert len(batches["val"]) == 6 and len(batches["test"]) == 6
        assert batches["val"].norm_stats is batches["train"].norm_stats

    def test_threaded_generation_matches_serial(self, tiny_spec):
        serial = generate_dataset(tiny_spec, T=8)
        threaded = generate_dataset(tiny_spec, T=8, workers=3)
        for a, b in zip(serial.frames, threaded.frames):
            npt.assert_array_equal(a.data, b.data)
            assert a.label == b.label
