"""
Tests for the SwinFi model: configuration invariants, compression ratio and
complexity formulas, forward shapes, feature images and losses.
"""

import math
from dataclasses import replace
from fractions import Fraction

import numpy as np
import numpy.testing as npt
import pytest

from swinfi.errors import (
    ConfigError, DegenerateMetricError, IncompatibleCheckpointError, LabelError, ShapeError
)
from swinfi.model import (
    ModelConfig, SwinFi, classify, complexity_estimate, compression_ratio, cross_entropy,
    decode, encode, nmse_db, nmse_loss, nmse_ratio
)
from swinfi.tensor import Tensor, grad_check


RATIO_ROWS = [
    # D, C, depths, gamma
    (4, 32, (2, 2, 6, 2), 64),
    (4, 16, (2, 2, 6, 2), 128),
    (4, 32, (2, 2, 2, 6, 2), 256),
    (4, 16, (2, 2, 2, 6, 2), 512),
    (4, 32, (2, 2, 2, 2, 6, 2), 1024),
    (8, 64, (2, 2, 6, 2), 64),
    (8, 32, (2, 2, 6, 2), 128),
    (8, 64, (2, 2, 2, 6, 2), 256),
    (8, 32, (2, 2, 2, 6, 2), 512),
    (8, 64, (2, 2, 2, 2, 6, 2), 1024),
]


class TestModelConfig:
    def test_defaults_are_valid(self):
        valid, errors = ModelConfig().validate()
        assert valid, errors
        assert ModelConfig().n_heads == 2

    def test_stage_grids_halve(self):
        assert ModelConfig().stage_grids() == [(32, 256), (16, 128), (8, 64), (4, 32)]

    @pytest.mark.parametrize("changes, fragment", [
        ({"S": 250}, "S=250"),
        ({"C": 24}, "head_dim"),
        ({"depths": (2, 3)}, "even"),
        ({"M_T": 12}, "does not tile"),
        ({"p_S": 0}, "p_S"),
    ])
    def test_invalid_configurations(self, changes, fragment):
        valid, errors = replace(ModelConfig(), **changes).validate()
        assert not valid
        assert any(fragment in e for e in errors)

    def test_check_raises_with_all_errors(self):
        with pytest.raises(ConfigError) as exc:
            ModelConfig(S=250, C=24).check()
        assert len(exc.value.errors) == 2

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"C": 32, "width": 4})

    def test_digest_tracks_architecture(self):
        a = ModelConfig()
        assert a.digest() == ModelConfig.from_dict(a.to_dict()).digest()
        assert a.digest() != ModelConfig(C=16).digest()


class TestFormulas:
    @pytest.mark.parametrize("D, C, depths, gamma", RATIO_ROWS)
    def test_compression_ratio_rows(self, D, C, depths, gamma):
        cfg = ModelConfig(D=D, C=C, depths=depths, head_dim=min(16, C))
        assert compression_ratio(cfg) == gamma
        assert cfg.raw_elements / cfg.latent_elements == gamma

    def test_ratio_is_exact(self):
        cfg = ModelConfig(p_S=3, p_T=3, M_S=4, M_T=4, C=32, depths=(2, 2, 6, 2), S=96, T=96)
        assert compression_ratio(cfg) == Fraction(72)
        assert compression_ratio(ModelConfig(C=48, head_dim=16)) == Fraction(128, 3)

    def test_payload_sizes(self):
        cfg = ModelConfig()
        assert cfg.latent_elements * 4 == 16384
        assert cfg.raw_elements * 4 == 1048576

    def test_complexity_estimate(self):
        report = complexity_estimate(32, 256, 32, 16)
        assert report.omega_wmsa == 41943040
        assert report.omega_msa == 4328521728
        assert report.ratio < Fraction(1, 100)

    def test_complexity_rejects_empty_extent(self):
        with pytest.raises(ConfigError):
            complexity_estimate(0, 256, 32, 16)


class TestNetwork:
    def test_forward_shapes(self, f64, tiny_cfg, rng):
        model = SwinFi(tiny_cfg, seed=0)
        x_hat, z = model(rng.normal(size=(3, 2, 16, 8)))
        assert x_hat.shape == (3, 2, 16, 8)
        assert z.shape == (3, 8, 8)
        assert model.classify_tokens(z).shape == (3, 3)

    def test_same_seed_same_weights(self, tiny_cfg):
        a, b = SwinFi(tiny_cfg, seed=4), SwinFi(tiny_cfg, seed=4)
        for (name, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            npt.assert_array_equal(p.data, q.data, err_msg=name)
        c = SwinFi(tiny_cfg, seed=5)
        assert not np.array_equal(a.encoder.patch_embed.proj.weight.data,
                                  c.encoder.patch_embed.proj.weight.data)

    def test_parameter_groups(self, tiny_cfg):
        names = [name for name, _ in SwinFi(tiny_cfg).named_parameters()]
        assert names[0] == "encoder.patch_embed.proj.weight"
        assert names[-1] == "head.fc.bias"
        assert any(n.startswith("decoder.splits.0.") for n in names)

    def test_wrong_input_shape(self, f64, tiny_cfg):
        with pytest.raises(ShapeError):
            SwinFi(tiny_cfg).encode_tokens(np.zeros((1, 2, 8, 8)))

    def test_invalid_config_refused(self, tiny_cfg):
        with pytest.raises(ConfigError):
            SwinFi(replace(tiny_cfg, S=18))

    def test_end_to_end_gradient(self, f64, tiny_cfg, rng):
        model = SwinFi(tiny_cfg, seed=1)
        x = rng.normal(size=(1, 2, 16, 8))
        param = model.encoder.patch_embed.proj.weight
        assert grad_check(lambda _: nmse_loss(x, model(x)[0]), param) < 1e-4

    def test_classifier_gradient(self, f64, tiny_cfg, rng):
        model = SwinFi(tiny_cfg, seed=1)
        z = Tensor(rng.normal(size=(4, 8, 8)))
        labels = [0, 2, 1, 2]
        assert grad_check(lambda t: cross_entropy(model.classify_tokens(t), labels), z) < 1e-4
        assert grad_check(lambda _: cross_entropy(model.classify_tokens(z), labels),
                          model.head.fc.weight) < 1e-4


class TestFeatureImages:
    def test_encode_decode_shapes(self, f64, tiny_cfg, rng):
        model = SwinFi(tiny_cfg)
        x = rng.normal(size=(4, 2, 16, 8))
        images = encode(x, model, frame_ids=[7, 8, 9, 10])
        assert [fi.frame_id for fi in images] == [7, 8, 9, 10]
        assert images[0].grid == (2, 4)
        assert images[0].feats.shape == (8, 8)
        assert images[0].config_digest == tiny_cfg.digest()
        assert decode(images, model).shape == (4, 2, 16, 8)
        assert classify(images, model).shape == (4, 3)

    def test_threaded_encode_matches_serial(self, f64, tiny_cfg, rng):
        model = SwinFi(tiny_cfg)
        x = rng.normal(size=(5, 2, 16, 8))
        serial = encode(x, model)
        threaded = encode(x, model, workers=3)
        for a, b in zip(serial, threaded):
            npt.assert_allclose(a.feats, b.feats, rtol=1e-6)

    def test_decode_rejects_other_config(self, f64, tiny_cfg, rng):
        images = encode(rng.normal(size=(1, 2, 16, 8)), SwinFi(tiny_cfg))
        other = SwinFi(replace(tiny_cfg, C=16))
        with pytest.raises(IncompatibleCheckpointError):
            decode(images, other)

    def test_empty_batches(self, f64, tiny_cfg):
        model = SwinFi(tiny_cfg)
        assert decode([], model).shape == (0, 2, 16, 8)
        assert classify([], model).shape == (0, 3)


class TestLosses:
    def test_nmse_db_known_value(self):
        x = np.ones((1, 1, 4, 4))
        assert nmse_ratio(x, 0.9 * x) == pytest.approx(0.01)
        assert nmse_db(x, 0.9 * x) == pytest.approx(-20.0)
        assert nmse_db(x, x) == float("-inf")

    def test_nmse_row_mask(self):
        x = np.ones((1, 1, 4, 2))
        x_hat = x.copy()
        x_hat[:, :, 0] = 0.0
        mask = np.array([False, True, True, True])
        assert nmse_ratio(x, x_hat) == pytest.approx(0.25)
        assert nmse_ratio(x, x_hat, mask) == 0.0

    def test_nmse_zero_reference(self, f64):
        with pytest.raises(DegenerateMetricError):
            nmse_ratio(np.zeros((1, 1, 2, 2)), np.ones((1, 1, 2, 2)))
        with pytest.raises(DegenerateMetricError):
            nmse_loss(np.zeros((1, 2)), Tensor(np.ones((1, 2))))

    def test_nmse_loss_matches_metric(self, f64, rng):
        x, x_hat = rng.normal(size=(2, 1, 4, 4)), rng.normal(size=(2, 1, 4, 4))
        assert nmse_loss(x, Tensor(x_hat)).item() == pytest.approx(nmse_ratio(x, x_hat))

    def test_cross_entropy_uniform_logits(self, f64):
        loss = cross_entropy(Tensor(np.zeros((5, 21))), [0, 3, 20, 7, 7])
        assert loss.item() == pytest.approx(math.log(21))

    def test_cross_entropy_label_range(self, f64):
        with pytest.raises(LabelError):
            cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
        with pytest.raises(ShapeError):
            cross_entropy(Tensor(np.zeros((2, 3))), [0])


class TestTableConfigurations:
    @pytest.mark.parametrize("D, C, depths, gamma", RATIO_ROWS)
    def test_decode_mirrors_encode(self, D, C, depths, gamma, rng):
        cfg = ModelConfig(D=D, C=C, depths=depths, head_dim=min(16, C))
        model = SwinFi(cfg, seed=0)
        x = rng.normal(size=(1, D, 256, 256))
        images = encode(x, model)
        assert images[0].grid == cfg.feature_grid
        assert images[0].elements * gamma == x.size
        assert decode(images, model).shape == x.shape

    def test_depth_six_clamps_the_last_window(self, rng):
        cfg = ModelConfig(D=4, C=32, depths=(2, 2, 2, 2, 6, 2))
        model = SwinFi(cfg, seed=0)
        last = model.encoder.stages[-1]
        assert last.grid == (1, 8)
        for block in last.blocks:
            assert block.window == (1, 8)
            assert block.shift == (0, 0)
            assert block.attn_mask is None
        images = encode(rng.normal(size=(1, 4, 256, 256)), model)
        assert images[0].grid == (1, 8)
        assert images[0].feats.shape == (8, 32)


class TestInvariants:
    def test_silent_blocks_leave_patch_embed_and_merges(self, f64, tiny_cfg, rng):
        model = SwinFi(tiny_cfg, seed=2)
        for stage in model.encoder.stages:
            for block in stage.blocks:
                for layer in (block.attn.proj, block.mlp.fc2):
                    layer.weight.data[...] = 0.0
                    layer.bias.data[...] = 0.0
        x = rng.normal(size=(2, 2, 16, 8))
        expected = model.encoder.merges[0](model.encoder.patch_embed(Tensor(x)))
        npt.assert_array_equal(model.encode_tokens(x).data, expected.data)

    def test_classify_ignores_token_order(self, f64, tiny_cfg, rng):
        model = SwinFi(tiny_cfg, seed=2)
        z = rng.normal(size=(3, 8, 8))
        order = rng.permutation(8)
        npt.assert_allclose(model.classify_tokens(z[:, order]).data, model.classify_tokens(z).data,
                            rtol=1e-12, atol=1e-12)

    def test_zero_head_gives_uniform_loss(self, f64, tiny_cfg, rng):
        model = SwinFi(replace(tiny_cfg, n_classes=21), seed=2)
        model.head.fc.weight.data[...] = 0.0
        model.head.fc.bias.data[...] = 0.0
        logits = model.classify_tokens(rng.normal(size=(4, 8, 8)))
        assert cross_entropy(logits, [0, 5, 20, 13]).item() == pytest.approx(math.log(21), abs=1e-12)
