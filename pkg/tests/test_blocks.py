import numpy as np
import pytest

from deformnet.blocks import (
    BlockParams,
    DownsampleParams,
    FfnParams,
    HeadParams,
    LayerNormParams,
    PredictorParams,
    StemParams,
    basic_block,
    downsample,
    head,
    predict_field,
    stem,
)
from deformnet.dcn import DcnConfig, DcnWeights
from deformnet.errors import ConfigError
from deformnet.tensor import Conv2dWeights, LinearWeights, layer_norm
from deformnet.verify import check_block_gradients, make_random_block


def zero_predictor(c: int, cfg: DcnConfig) -> PredictorParams:
    kg = cfg.num_points * cfg.groups
    return PredictorParams(
        dw=Conv2dWeights(np.zeros((c, 1, 3, 3)), np.zeros(c), stride=1, padding=1, groups=c),
        lin=LinearWeights(np.zeros((3 * kg, c)), np.zeros(3 * kg)),
    )


class TestPredictField:
    def test_zero_predictor_emits_zero_field(self):
        rng = np.random.default_rng(0)
        cfg = DcnConfig(channels=8, groups=2)
        x = rng.standard_normal((1, 8, 6, 6))
        field = predict_field(x, zero_predictor(8, cfg), cfg)
        assert np.all(field.offsets == 0.0)
        assert np.all(field.mask_logits == 0.0)

    def test_channel_contract(self):
        cfg = DcnConfig(channels=16, groups=4)
        field = predict_field(
            np.zeros((2, 16, 5, 5)), zero_predictor(16, cfg), cfg
        )
        assert field.offsets.shape == (2, 2 * 9 * 4, 5, 5)
        assert field.mask_logits.shape == (2, 9 * 4, 5, 5)

    def test_constant_input_gives_constant_interior_field(self):
        rng = np.random.default_rng(1)
        cfg = DcnConfig(channels=4, groups=1)
        p = PredictorParams(
            dw=Conv2dWeights(
                rng.standard_normal((4, 1, 3, 3)), rng.standard_normal(4),
                stride=1, padding=1, groups=4,
            ),
            lin=LinearWeights(rng.standard_normal((27, 4)), rng.standard_normal(27)),
        )
        x = np.full((1, 4, 7, 7), 1.3)
        field = predict_field(x, p, cfg)
        inner = field.offsets[:, :, 1:-1, 1:-1]
        assert np.abs(inner - inner[:, :, :1, :1]).max() <= 1e-12

    def test_wrong_predictor_width_rejected(self):
        cfg = DcnConfig(channels=8, groups=2)
        bad = PredictorParams(
            dw=Conv2dWeights(np.zeros((8, 1, 3, 3)), stride=1, padding=1, groups=8),
            lin=LinearWeights(np.zeros((10, 8))),
        )
        with pytest.raises(ConfigError):
            predict_field(np.zeros((1, 8, 5, 5)), bad, cfg)


class TestBasicBlock:
    def _dead_branch_block(self, c: int) -> BlockParams:
        cfg = DcnConfig(channels=c, groups=1)
        return BlockParams(
            cfg=cfg,
            dcn=DcnWeights(proj=LinearWeights(np.zeros((c, c)))),
            predictor=zero_predictor(c, cfg),
            ln1=LayerNormParams(np.full(c, 1.1), np.full(c, 0.2)),
            ln2=LayerNormParams(np.full(c, 0.9), np.full(c, -0.1)),
            ffn=FfnParams(
                LinearWeights(np.random.default_rng(2).standard_normal((2 * c, c))),
                LinearWeights(np.zeros((c, 2 * c))),
            ),
        )

    def test_dead_branches_reduce_to_double_layer_norm(self):
        rng = np.random.default_rng(3)
        c = 6
        p = self._dead_branch_block(c)
        x = rng.standard_normal((2, c, 5, 5))
        z = basic_block(x, p)
        y = layer_norm(x, p.ln1.gamma, p.ln1.beta, p.ln1.eps)
        ref = layer_norm(y, p.ln2.gamma, p.ln2.beta, p.ln2.eps)
        assert np.abs(z - ref).max() <= 1e-12

    def test_shape_preserved_across_random_configs(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            g = int(rng.choice([1, 2, 4]))
            cp = int(rng.choice([2, 4]))
            c = g * cp
            n = int(rng.integers(1, 3))
            h = int(rng.integers(5, 9))
            w_ = int(rng.integers(5, 9))
            blk = make_random_block(
                rng, channels=c, groups=g,
                shared_weights=bool(rng.integers(0, 2)),
                multi_group=True,
                normalization=str(rng.choice(["softmax", "sigmoid"])),
                layer_scale=bool(rng.integers(0, 2)),
            )
            x = rng.standard_normal((n, c, h, w_))
            assert basic_block(x, blk).shape == x.shape

    def test_zero_init_first_pass_uses_degenerate_field(self):
        rng = np.random.default_rng(5)
        c = 8
        cfg = DcnConfig(channels=c, groups=2)
        pred = zero_predictor(c, cfg)
        x = rng.standard_normal((1, c, 6, 6))
        field = predict_field(x, pred, cfg)
        assert np.all(field.offsets == 0.0) and np.all(field.mask_logits == 0.0)

    def test_gradcheck_default_toggles(self):
        results = check_block_gradients(seed=31, coords_per_tensor=15)
        for r in results:
            assert r.passed, f"{r.name}: {r.max_rel_error:.3e}"


class TestStem:
    def _stem(self, rng, c1: int, in_c: int = 3) -> StemParams:
        half = c1 // 2
        return StemParams(
            conv1=Conv2dWeights(
                rng.standard_normal((half, in_c, 3, 3)), rng.standard_normal(half),
                stride=2, padding=1,
            ),
            ln1=LayerNormParams(np.ones(half), np.zeros(half)),
            conv2=Conv2dWeights(
                rng.standard_normal((c1, half, 3, 3)), rng.standard_normal(c1),
                stride=2, padding=1,
            ),
            ln2=LayerNormParams(np.ones(c1), np.zeros(c1)),
        )

    def test_reduces_224_to_56(self):
        rng = np.random.default_rng(6)
        p = self._stem(rng, 16)
        y = stem(np.zeros((1, 3, 224, 224)), p)
        assert y.shape == (1, 16, 56, 56)

    def test_64_input_with_c1_64(self):
        rng = np.random.default_rng(7)
        p = self._stem(rng, 64)
        y = stem(np.zeros((2, 3, 64, 64)), p)
        assert y.shape == (2, 64, 16, 16)

    def test_zero_weights_collapse_to_beta(self):
        p = StemParams(
            conv1=Conv2dWeights(np.zeros((4, 3, 3, 3)), np.zeros(4), stride=2, padding=1),
            ln1=LayerNormParams(np.ones(4), np.zeros(4)),
            conv2=Conv2dWeights(np.zeros((8, 4, 3, 3)), np.zeros(8), stride=2, padding=1),
            ln2=LayerNormParams(np.ones(8), np.full(8, 1.5)),
        )
        y = stem(np.random.default_rng(8).standard_normal((1, 3, 32, 32)), p)
        assert np.allclose(y, 1.5, atol=0)

    def test_unbalanced_channel_halves_rejected(self):
        p = StemParams(
            conv1=Conv2dWeights(np.zeros((3, 3, 3, 3)), stride=2, padding=1),
            ln1=LayerNormParams(np.ones(3), np.zeros(3)),
            conv2=Conv2dWeights(np.zeros((8, 3, 3, 3)), stride=2, padding=1),
            ln2=LayerNormParams(np.ones(8), np.zeros(8)),
        )
        with pytest.raises(ConfigError):
            stem(np.zeros((1, 3, 32, 32)), p)


class TestDownsample:
    def _down(self, rng, cin, cout) -> DownsampleParams:
        return DownsampleParams(
            conv=Conv2dWeights(
                rng.standard_normal((cout, cin, 3, 3)), rng.standard_normal(cout),
                stride=2, padding=1,
            ),
            ln=LayerNormParams(np.ones(cout), np.zeros(cout)),
        )

    def test_56_to_28(self):
        rng = np.random.default_rng(9)
        y = downsample(np.zeros((1, 4, 56, 56)), self._down(rng, 4, 8))
        assert y.shape == (1, 8, 28, 28)

    def test_odd_7_to_4(self):
        rng = np.random.default_rng(10)
        y = downsample(np.zeros((1, 4, 7, 7)), self._down(rng, 4, 8))
        assert y.shape == (1, 8, 4, 4)

    def test_channel_doubling(self):
        rng = np.random.default_rng(11)
        y = downsample(np.zeros((2, 16, 8, 8)), self._down(rng, 16, 32))
        assert y.shape[1] == 32


class TestHead:
    def test_zero_linear_gives_bias(self):
        b = np.array([0.1, -0.5, 2.0])
        p = HeadParams(fc=LinearWeights(np.zeros((3, 4)), b))
        logits = head(np.random.default_rng(12).standard_normal((2, 4, 3, 3)), p)
        assert logits.shape == (2, 3)
        assert np.allclose(logits, b[None, :], atol=0)

    def test_constant_feature_row_sums(self):
        rng = np.random.default_rng(13)
        v = 0.75
        w = rng.standard_normal((5, 6))
        b = rng.standard_normal(5)
        p = HeadParams(fc=LinearWeights(w, b))
        logits = head(np.full((1, 6, 4, 4), v), p)
        assert np.allclose(logits[0], v * w.sum(axis=1) + b, atol=1e-12)

    def test_output_shape(self):
        p = HeadParams(fc=LinearWeights(np.zeros((10, 8)), np.zeros(10)))
        assert head(np.zeros((3, 8, 2, 2)), p).shape == (3, 10)
