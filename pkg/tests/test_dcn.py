import numpy as np
import pytest

from deformnet.dcn import (
    DcnConfig,
    DcnWeights,
    SamplingField,
    bilinear_sample,
    bilinear_sample_grads,
    dcn_output_hw,
    dcnv2_config,
    dcnv2_forward,
    dcnv3_backward,
    dcnv3_forward,
    dcnv3_naive_forward,
    normalize_masks,
)
from deformnet.errors import ConfigError, InputError
from deformnet.tensor import Conv2dWeights, LinearWeights, conv2d
from deformnet.verify import TOGGLE_ROWS, check_dcn_gradients, run_oracle_trials, ulp_distance


def zero_field(cfg: DcnConfig, n: int, ho: int, wo: int) -> SamplingField:
    kg = cfg.num_points * cfg.groups
    return SamplingField(np.zeros((n, 2 * kg, ho, wo)), np.zeros((n, kg, ho, wo)))


def identity_weights(c: int) -> DcnWeights:
    return DcnWeights(proj=LinearWeights(np.eye(c)))


class TestBilinearSample:
    def test_integer_site_exact(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert bilinear_sample(m, 1.0, 0.0) == 3.0

    def test_quarter_weights(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert bilinear_sample(m, 0.5, 0.5) == 2.5

    def test_out_of_bounds_neighbor_reads_zero(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert bilinear_sample(m, 0.0, -0.5) == 0.5

    def test_partials_match_finite_differences(self):
        rng = np.random.default_rng(0)
        m = rng.standard_normal((5, 6))
        for _ in range(20):
            y = rng.uniform(0.1, 3.9)
            x = rng.uniform(0.1, 4.9)
            _, dy, dx, _ = bilinear_sample_grads(m, y, x)
            h = 1e-6
            fy = (bilinear_sample(m, y + h, x) - bilinear_sample(m, y - h, x)) / (2 * h)
            fx = (bilinear_sample(m, y, x + h) - bilinear_sample(m, y, x - h)) / (2 * h)
            assert abs(dy - fy) < 1e-6 and abs(dx - fx) < 1e-6

    def test_scatter_weights_sum_to_one_inside(self):
        m = np.zeros((4, 4))
        _, _, _, scatter = bilinear_sample_grads(m, 1.3, 2.6)
        assert abs(sum(w for _, _, w in scatter) - 1.0) < 1e-15


class TestDcnv3Forward:
    def test_constant_input_uniform_masks_interior(self):
        c, g = 8, 2
        cfg = DcnConfig(channels=c, groups=g)
        x = np.full((1, c, 7, 7), 2.5)
        field = zero_field(cfg, 1, 7, 7)
        y = dcnv3_forward(x, field, identity_weights(c), cfg)
        assert np.abs(y[:, :, 1:-1, 1:-1] - 2.5).max() <= 1e-12
        # boundary sites average in zero padding, so they shrink
        assert y[0, 0, 0, 0] < 2.5

    def test_box_mean_equivalence_against_conv(self):
        rng = np.random.default_rng(1)
        c, g = 8, 2
        cfg = DcnConfig(channels=c, groups=g)
        x = rng.standard_normal((2, c, 9, 9))
        field = zero_field(cfg, 2, 9, 9)
        y = dcnv3_forward(x, field, identity_weights(c), cfg)
        box = Conv2dWeights(np.full((c, 1, 3, 3), 1.0 / 9.0), stride=1, padding=1, groups=c)
        ref = conv2d(x, box)
        assert np.abs((y - ref)[:, :, 1:-1, 1:-1]).max() <= 1e-12

    def test_saturated_center_mask_reproduces_input(self):
        rng = np.random.default_rng(2)
        c, g = 4, 1
        cfg = DcnConfig(channels=c, groups=g)
        x = rng.standard_normal((1, c, 6, 6))
        field = zero_field(cfg, 1, 6, 6)
        field.mask_logits[:, 4] = 40.0  # center point of the row-major 3x3 grid
        y = dcnv3_forward(x, field, identity_weights(c), cfg)
        assert np.abs((y - x)[:, :, 1:-1, 1:-1]).max() <= 1e-12

    def test_logit_shift_invariance(self):
        rng = np.random.default_rng(3)
        c, g = 8, 2
        cfg = DcnConfig(channels=c, groups=g)
        x = rng.standard_normal((1, c, 7, 7))
        kg = cfg.num_points * g
        field = SamplingField(
            rng.uniform(-1, 1, (1, 2 * kg, 7, 7)), rng.standard_normal((1, kg, 7, 7))
        )
        w = DcnWeights(proj=LinearWeights(rng.standard_normal((c, c))))
        y1 = dcnv3_forward(x, field, w, cfg)
        shifted = SamplingField(field.offsets, field.mask_logits + 11.25)
        y2 = dcnv3_forward(x, shifted, w, cfg)
        assert np.abs(y1 - y2).max() <= 1e-12

    def test_stride_and_dilation_output_shape(self):
        cfg = DcnConfig(channels=4, groups=1, stride=2, pad=1)
        assert dcn_output_hw(8, 8, cfg) == (4, 4)
        cfg = DcnConfig(channels=4, groups=1, dilation=2, pad=2)
        assert dcn_output_hw(9, 9, cfg) == (9, 9)

    def test_non_finite_offsets_rejected(self):
        cfg = DcnConfig(channels=2, groups=1)
        field = zero_field(cfg, 1, 5, 5)
        field.offsets[0, 0, 0, 0] = np.nan
        with pytest.raises(InputError):
            dcnv3_forward(np.zeros((1, 2, 5, 5)), field, identity_weights(2), cfg)

    def test_shape_mismatch_rejected(self):
        cfg = DcnConfig(channels=2, groups=1)
        field = zero_field(cfg, 1, 4, 4)  # wrong spatial dims for 5x5 input
        with pytest.raises(ConfigError):
            dcnv3_forward(np.zeros((1, 2, 5, 5)), field, identity_weights(2), cfg)

    def test_weights_toggle_consistency_enforced(self):
        cfg = DcnConfig(channels=2, groups=1, shared_weights=False)
        field = zero_field(cfg, 1, 5, 5)
        with pytest.raises(ConfigError):
            dcnv3_forward(np.zeros((1, 2, 5, 5)), field, identity_weights(2), cfg)


class TestNormalization:
    def test_softmax_masks_sum_to_one_everywhere(self):
        rng = np.random.default_rng(4)
        cfg = DcnConfig(channels=8, groups=2)
        logits = rng.uniform(-20, 20, (2, 2, 9, 6, 6))
        m = normalize_masks(logits, cfg)
        assert np.abs(m.sum(axis=2) - 1.0).max() <= 1e-12

    def test_sigmoid_masks_range_and_unstable_sum(self):
        rng = np.random.default_rng(5)
        cfg = DcnConfig(channels=8, groups=2, normalization="sigmoid")
        logits = rng.uniform(-6, 6, (2, 2, 9, 6, 6))
        m = normalize_masks(logits, cfg)
        assert m.min() >= 0.0 and m.max() <= 1.0
        sums = m.sum(axis=2)
        assert sums.min() >= 0.0 and sums.max() <= 9.0
        # the per-site sum is not normalized: it genuinely wanders
        assert sums.max() - sums.min() > 1.0


class TestOracleEquivalence:
    def test_small_instances_within_4_ulps(self):
        report = run_oracle_trials(seed=11, trials=25)
        assert report.max_ulp <= 4

    def test_trivial_cases_identical(self):
        c, g = 8, 2
        cfg = DcnConfig(channels=c, groups=g)
        x = np.full((1, c, 7, 7), 2.5)
        field = zero_field(cfg, 1, 7, 7)
        w = identity_weights(c)
        assert np.array_equal(
            dcnv3_forward(x, field, w, cfg), dcnv3_naive_forward(x, field, w, cfg)
        )

    def test_fixed_seed_reproduces_report(self):
        a = run_oracle_trials(seed=7, trials=10)
        b = run_oracle_trials(seed=7, trials=10)
        assert (a.max_ulp, a.max_abs) == (b.max_ulp, b.max_abs)


class TestTranslationEquivariance:
    def test_integer_shift_matches_in_interior(self):
        rng = np.random.default_rng(6)
        c, g, h, w_ = 8, 2, 12, 12
        dy, dx = 1, 2
        cfg = DcnConfig(channels=c, groups=g)
        kg = cfg.num_points * g
        x = rng.standard_normal((1, c, h, w_))
        offsets = rng.uniform(-1.0, 1.0, (1, 2 * kg, h, w_))
        logits = rng.standard_normal((1, kg, h, w_))
        w = DcnWeights(proj=LinearWeights(rng.standard_normal((c, c))))

        def shift(a):
            out = np.zeros_like(a)
            out[:, :, dy:, dx:] = a[:, :, : h - dy, : w_ - dx]
            return out

        y1 = dcnv3_forward(x, SamplingField(offsets, logits), w, cfg)
        y2 = dcnv3_forward(
            shift(x), SamplingField(shift(offsets), shift(logits)), w, cfg
        )
        m = 3  # grid reach 1 + max offset 1 + bilinear neighbor 1
        inner1 = y1[:, :, m : h - m - dy, m : w_ - m - dx]
        inner2 = y2[:, :, m + dy : h - m, m + dx : w_ - m]
        assert np.abs(inner1 - inner2).max() <= 1e-12


class TestDcnv2:
    def test_all_negative_logits_give_zero(self):
        c = 4
        cfg = dcnv2_config(channels=c)
        x = np.random.default_rng(7).standard_normal((1, c, 6, 6))
        field = zero_field(cfg, 1, 6, 6)
        field.mask_logits[:] = -40.0
        w = DcnWeights(per_point=np.stack([np.eye(c)] * 9))
        y = dcnv2_forward(x, field, w, cfg)
        assert np.abs(y).max() <= 1e-12

    def test_half_masks_sum_to_4p5_v(self):
        c, v = 4, 1.75
        cfg = dcnv2_config(channels=c)
        x = np.full((1, c, 7, 7), v)
        field = zero_field(cfg, 1, 7, 7)  # sigmoid(0) = 0.5 for all nine points
        w = DcnWeights(per_point=np.stack([np.eye(c)] * 9))
        y = dcnv2_forward(x, field, w, cfg)
        assert np.abs(y[:, :, 1:-1, 1:-1] - 4.5 * v).max() <= 1e-12

    def test_single_active_center_point(self):
        rng = np.random.default_rng(8)
        c = 4
        cfg = dcnv2_config(channels=c)
        x = rng.standard_normal((1, c, 6, 6))
        field = zero_field(cfg, 1, 6, 6)
        field.mask_logits[:] = -40.0
        field.mask_logits[:, 4] = 40.0
        w = DcnWeights(per_point=np.stack([np.eye(c)] * 9))
        y = dcnv2_forward(x, field, w, cfg)
        assert np.abs((y - x)[:, :, 1:-1, 1:-1]).max() <= 1e-9

    def test_requires_v2_configuration(self):
        cfg = DcnConfig(channels=4, groups=1)  # v3 defaults
        field = zero_field(cfg, 1, 5, 5)
        with pytest.raises(ConfigError):
            dcnv2_forward(np.zeros((1, 4, 5, 5)), field, identity_weights(4), cfg)

    def test_naive_loop_agrees_with_v2(self):
        report = run_oracle_trials(seed=13, trials=15, mode="dcnv2")
        assert report.max_ulp <= 4


class TestBackward:
    @pytest.mark.parametrize("label,row", TOGGLE_ROWS, ids=[t[0] for t in TOGGLE_ROWS])
    def test_gradients_match_finite_differences(self, label, row):
        cfg = DcnConfig(channels=8, groups=2 if row["multi_group"] else 1, **row)
        results = check_dcn_gradients(seed=21, cfg=cfg, coords_per_tensor=60)
        for r in results:
            assert r.passed, f"{r.name}: {r.max_rel_error:.3e} > {r.tolerance}"

    def test_zero_upstream_gives_zero_gradients(self):
        rng = np.random.default_rng(9)
        c, g = 8, 2
        cfg = DcnConfig(channels=c, groups=g)
        kg = cfg.num_points * g
        x = rng.standard_normal((1, c, 7, 7))
        field = SamplingField(
            rng.uniform(0.1, 0.4, (1, 2 * kg, 7, 7)), rng.standard_normal((1, kg, 7, 7))
        )
        w = DcnWeights(proj=LinearWeights(rng.standard_normal((c, c)), rng.standard_normal(c)))
        grads = dcnv3_backward(np.zeros((1, c, 7, 7)), x, field, w, cfg)
        for arr in (grads.x, grads.offsets, grads.mask_logits, grads.proj, grads.proj_bias):
            assert np.all(arr == 0.0)

    def test_ulp_distance_basics(self):
        a = np.array([1.0, -2.0, 0.0])
        assert np.all(ulp_distance(a, a) == 0)
        assert np.all(ulp_distance(a, np.nextafter(a, np.inf)) == 1)
