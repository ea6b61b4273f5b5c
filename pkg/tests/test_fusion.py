"""Object/scene fusion: formulas, reduction laws, level routing and gradients."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fosnet.fusion import (KINDS, FusionInputs, FusionParams, baseline_fuse, ccg_bn_fuse, ccg_fuse, ccm_fuse,
                           ccm_transform, fuse, fuse_at_level, fused_dim, init_fusion, mixed_ccm_ccg)
from fosnet.layers import BNParams
from fosnet.tensor import ShapeError, Tensor, finite_diff_check, mul, tsum

from oracles import matvec_loops, sigmoid_scalar


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def _rand(rng, *shape, scale=1.0):
    return _t(rng.normal(scale=scale, size=shape))


def _ccg(W, b):
    return FusionParams("ccg", W1=W, b1=b)


def _ccg_oracle(W, b, xo, xs):
    pre = matvec_loops(W, xo, b)
    return np.array([sigmoid_scalar(z) * s for z, s in zip(pre, xs)])


class TestCcmTransform:
    def test_zero_and_identity(self):
        x = _t([1.0, -2.0, 3.0])
        assert (ccm_transform(x, _t(np.zeros((2, 3))), _t(np.zeros(2))).data == 0).all()
        np.testing.assert_array_equal(ccm_transform(x, _t(np.eye(3)), _t(np.zeros(3))).data, x.data)

    def test_matches_matvec(self):
        rng = np.random.default_rng(0)
        W, b, x = rng.normal(size=(4, 6)), rng.normal(size=4), rng.normal(size=6)
        np.testing.assert_allclose(ccm_transform(_t(x), _t(W), _t(b)).data, matvec_loops(W, x, b),
                                   rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ccm_transform(_t(np.zeros(5)), _t(np.zeros((2, 3))), _t(np.zeros(2)))


class TestCcg:
    def test_zero_gate_input_halves_scene(self):
        rng = np.random.default_rng(1)
        xs = rng.normal(size=5)
        y = ccg_fuse(FusionInputs(_rand(rng, 3), _t(xs)), _ccg(_t(np.zeros((5, 3))), _t(np.zeros(5))))
        assert np.abs(y.data - 0.5 * xs).max() <= 1e-12

    def test_saturated_gate_passes_scene(self):
        rng = np.random.default_rng(2)
        xs = rng.normal(size=5)
        y = ccg_fuse(FusionInputs(_rand(rng, 3), _t(xs)), _ccg(_t(np.zeros((5, 3))), _t(np.full(5, 50.0))))
        assert np.abs(y.data - xs).max() < 1e-10

    def test_matches_formula(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            W, b = rng.normal(size=(4, 6)), rng.normal(size=4)
            xo, xs = rng.normal(size=6), rng.normal(size=4)
            y = ccg_fuse(FusionInputs(_t(xo), _t(xs)), _ccg(_t(W), _t(b)))
            np.testing.assert_allclose(y.data, _ccg_oracle(W, b, xo, xs), rtol=0, atol=1e-12)

    def test_batched_rows_independent(self):
        rng = np.random.default_rng(4)
        p = _ccg(_rand(rng, 4, 3), _rand(rng, 4))
        xo, xs = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
        y = ccg_fuse(FusionInputs(_t(xo), _t(xs)), p).data
        for i in range(5):
            np.testing.assert_allclose(y[i], ccg_fuse(FusionInputs(_t(xo[i]), _t(xs[i])), p).data, atol=1e-15)

    def test_gate_scene_mismatch(self):
        with pytest.raises(ShapeError, match="gate shape"):
            ccg_fuse(FusionInputs(_t(np.zeros(3)), _t(np.zeros(5))), _ccg(_t(np.zeros((4, 3))), _t(np.zeros(4))))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_output_bounded_by_scene(self, seed):
        rng = np.random.default_rng(seed)
        xs = rng.normal(scale=5, size=6)
        p = _ccg(_rand(rng, 6, 4, scale=3), _rand(rng, 6))
        y = ccg_fuse(FusionInputs(_rand(rng, 4, scale=3), _t(xs)), p).data
        assert (np.abs(y) <= np.abs(xs)).all()

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 5), st.floats(0, 5))
    def test_gate_monotone_in_bias(self, seed, i, delta):
        rng = np.random.default_rng(seed)
        W, b, xo = _rand(rng, 6, 4), rng.normal(size=6), _rand(rng, 4)
        ones = _t(np.ones(6))
        g0 = ccg_fuse(FusionInputs(xo, ones), _ccg(W, _t(b))).data
        b2 = b.copy()
        b2[i] += delta
        g1 = ccg_fuse(FusionInputs(xo, ones), _ccg(W, _t(b2))).data
        assert g1[i] >= g0[i]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_gate_strictly_inside_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        g = ccg_fuse(FusionInputs(_rand(rng, 4, scale=3), _t(np.ones(6))), _ccg(_rand(rng, 6, 4), _rand(rng, 6))).data
        assert ((0 < g) & (g < 1)).all()


class TestCcgBn:
    def _params(self, rng, d_out=4, d_in=3, beta=0.0):
        bn = BNParams.init(d_out)
        bn.beta.data[:] = beta
        return FusionParams("ccg_bn", W1=_rand(rng, d_out, d_in), bn=bn)

    def test_identity_bn_reduces_to_ccg_without_bias(self):
        rng = np.random.default_rng(5)
        p = self._params(rng)
        xo, xs = _rand(rng, 6, 3), _rand(rng, 6, 4)
        y = ccg_bn_fuse(FusionInputs(xo, xs), p, training=False).data
        # inference BN with identity stats divides by sqrt(1 + eps)
        W = p.W1.data / np.sqrt(1 + p.bn.epsilon)
        ref = ccg_fuse(FusionInputs(xo, xs), _ccg(_t(W), _t(np.zeros(4)))).data
        assert np.abs(y - ref).max() <= 1e-12

    def test_saturated_beta(self):
        rng = np.random.default_rng(6)
        p = self._params(rng, beta=50.0)
        xo, xs = _rand(rng, 5, 3, scale=0.1), _rand(rng, 5, 4)
        y = ccg_bn_fuse(FusionInputs(xo, xs), p, training=True).data
        assert np.abs(y - xs.data).max() < 1e-10

    def test_single_vector_inference(self):
        rng = np.random.default_rng(7)
        p = self._params(rng)
        y = ccg_bn_fuse(FusionInputs(_rand(rng, 3), _rand(rng, 4)), p, training=False)
        assert y.shape == (4,)

    def test_batch_of_one_in_training_rejected(self):
        rng = np.random.default_rng(8)
        with pytest.raises(ValueError):
            ccg_bn_fuse(FusionInputs(_rand(rng, 1, 3), _rand(rng, 1, 4)), self._params(rng), training=True)

    def test_needs_bn(self):
        with pytest.raises(ValueError, match="batch-norm"):
            FusionParams("ccg_bn", W1=_t(np.zeros((2, 2))))


class TestMixed:
    def test_identity_remap_equals_ccg(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            W1, b1 = _rand(rng, 5, 3), _rand(rng, 5)
            inputs = FusionInputs(_rand(rng, 4, 3), _rand(rng, 4, 5))
            p = FusionParams("mixed_ccm_ccg", W1=W1, b1=b1, W2=_t(np.eye(5)), b2=_t(np.zeros(5)))
            assert np.abs(mixed_ccm_ccg(inputs, p).data - ccg_fuse(inputs, _ccg(W1, b1)).data).max() <= 1e-12

    def test_zero_gate_halves_remapped_scene(self):
        rng = np.random.default_rng(10)
        W2, b2, xs = rng.normal(size=(4, 4)), rng.normal(size=4), rng.normal(size=4)
        p = FusionParams("mixed_ccm_ccg", W1=_t(np.zeros((4, 3))), b1=_t(np.zeros(4)), W2=_t(W2), b2=_t(b2))
        y = mixed_ccm_ccg(FusionInputs(_rand(rng, 3), _t(xs)), p).data
        np.testing.assert_allclose(y, 0.5 * matvec_loops(W2, xs, b2), rtol=0, atol=1e-12)

    def test_matches_formula(self):
        rng = np.random.default_rng(11)
        W1, b1, W2, b2 = rng.normal(size=(4, 6)), rng.normal(size=4), rng.normal(size=(4, 5)), rng.normal(size=4)
        xo, xs = rng.normal(size=6), rng.normal(size=5)
        p = FusionParams("mixed_ccm_ccg", W1=_t(W1), b1=_t(b1), W2=_t(W2), b2=_t(b2))
        y = mixed_ccm_ccg(FusionInputs(_t(xo), _t(xs)), p).data
        np.testing.assert_allclose(y, _ccg_oracle(W1, b1, xo, matvec_loops(W2, xs, b2)), rtol=0, atol=1e-12)

    def test_bounded_by_remapped_scene(self):
        rng = np.random.default_rng(12)
        W2, b2, xs = rng.normal(size=(4, 4)), rng.normal(size=4), rng.normal(size=4)
        p = FusionParams("mixed_ccm_ccg", W1=_rand(rng, 4, 3), b1=_rand(rng, 4), W2=_t(W2), b2=_t(b2))
        y = mixed_ccm_ccg(FusionInputs(_rand(rng, 3), _t(xs)), p).data
        assert (np.abs(y) <= np.abs(matvec_loops(W2, xs, b2))).all()

    def test_needs_w2(self):
        with pytest.raises(ValueError, match="W2"):
            FusionParams("mixed_ccm_ccg", W1=_t(np.zeros((2, 2))), b1=_t(np.zeros(2)))


class TestCcm:
    def test_relu_then_add(self):
        W, b = np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0.0, -5.0])
        p = FusionParams("ccm", W1=_t(W), b1=_t(b))
        y = ccm_fuse(FusionInputs(_t([2.0, 1.0]), _t([10.0, 10.0])), p).data
        np.testing.assert_array_equal(y, [12.0, 10.0])

    def test_without_relu(self):
        p = FusionParams("ccm", W1=_t(np.eye(2)), b1=_t([0.0, -5.0]), ccm_relu=False)
        y = ccm_fuse(FusionInputs(_t([2.0, 1.0]), _t([10.0, 10.0])), p).data
        np.testing.assert_array_equal(y, [12.0, 6.0])


class TestBaselines:
    def test_sum_with_zero(self):
        x = _t([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(baseline_fuse(FusionInputs(_t(np.zeros(3)), x), FusionParams("sum")).data,
                                      x.data)

    def test_sum_commutes(self):
        rng = np.random.default_rng(13)
        a, b = _rand(rng, 4, 6), _rand(rng, 4, 6)
        p = FusionParams("sum")
        np.testing.assert_array_equal(baseline_fuse(FusionInputs(a, b), p).data,
                                      baseline_fuse(FusionInputs(b, a), p).data)

    def test_concat_dims(self):
        y = baseline_fuse(FusionInputs(_t(np.zeros((2, 3))), _t(np.ones((2, 5)))), FusionParams("concat"))
        assert y.shape == (2, 8)
        assert fused_dim("concat", 3, 5) == 8 and fused_dim("ccg", 3, 5) == 5

    def test_sum_unequal_dims(self):
        with pytest.raises(ShapeError):
            baseline_fuse(FusionInputs(_t(np.zeros(3)), _t(np.zeros(4))), FusionParams("sum"))


class TestLevels:
    def test_score_level_ccg_keeps_class_dim(self):
        rng = np.random.default_rng(14)
        p = init_fusion("ccg", "score", 6, 8, 8, rng)
        assert p.classifier is None
        assert fuse_at_level(_rand(rng, 3, 6), _rand(rng, 3, 8), p).shape == (3, 8)

    def test_feature_level_concat_classifier_input(self):
        rng = np.random.default_rng(15)
        p = init_fusion("concat", "feature", 16, 32, 8, rng)
        assert p.classifier.weights.shape[1] == 48
        assert fuse_at_level(_rand(rng, 2, 16), _rand(rng, 2, 32), p).shape == (2, 8)

    def test_score_level_sum_class_mismatch(self):
        with pytest.raises(ShapeError, match="class counts"):
            fuse_at_level(_t(np.zeros(6)), _t(np.zeros(8)), FusionParams("sum", level="score"))

    def test_score_level_concat_rejected(self):
        with pytest.raises(ValueError, match="feature-level only"):
            FusionParams("concat", level="score")

    def test_feature_level_needs_classifier(self):
        with pytest.raises(ValueError, match="classifier"):
            fuse_at_level(_t(np.zeros(3)), _t(np.zeros(3)), FusionParams("sum"))

    def test_unknown_kind_and_level(self):
        with pytest.raises(ValueError, match="kind"):
            FusionParams("product")
        with pytest.raises(ValueError, match="level"):
            FusionParams("sum", level="pixel")

    @pytest.mark.parametrize("kind", KINDS)
    def test_init_every_kind(self, kind):
        rng = np.random.default_rng(16)
        p = init_fusion(kind, "feature", 8, 8, 5, rng)
        out = fuse_at_level(_rand(rng, 4, 8), _rand(rng, 4, 8), p, training=True)
        assert out.shape == (4, 5)
        assert all(t.requires_grad for t in p.parameters().values())


class TestFusionGradients:
    @pytest.mark.parametrize("kind,bn", [(k, False) for k in KINDS] + [("ccm", True), ("mixed_ccm_ccg", True)])
    def test_feature_level(self, kind, bn):
        rng = np.random.default_rng(17)
        p = init_fusion(kind, "feature", 5, 5, 3, rng, bn=bn)
        if kind == "ccm":
            # keep ReLU arguments away from the kink
            if p.b1 is not None:
                p.b1.data[:] = 0.3
        names = list(p.parameters())
        xo, xs = _rand(rng, 4, 5), _rand(rng, 4, 5)
        r = _t(np.random.default_rng(0).normal(size=(4, 3)))

        def f(xo, xs, *params):
            for name, t in zip(names, params):
                _assign(p, name, t)
            return tsum(mul(fuse_at_level(xo, xs, p, training=True), r))

        assert finite_diff_check(f, [xo, xs, *p.parameters().values()]) < 1e-4

    @pytest.mark.parametrize("kind", ["ccm", "ccg", "ccg_bn", "mixed_ccm_ccg"])
    def test_score_level(self, kind):
        rng = np.random.default_rng(18)
        p = init_fusion(kind, "score", 4, 6, 6, rng)
        names = list(p.parameters())
        xo, xs = _rand(rng, 3, 4), _rand(rng, 3, 6)

        def f(xo, xs, *params):
            for name, t in zip(names, params):
                _assign(p, name, t)
            return tsum(mul(fuse(FusionInputs(xo, xs), p, training=True), xs))

        assert finite_diff_check(f, [xo, xs, *p.parameters().values()]) < 1e-4


def _assign(p, name, t):
    if "." in name:
        owner, attr = name.split(".")
        setattr(getattr(p, owner), attr, t)
    else:
        setattr(p, name, t)
