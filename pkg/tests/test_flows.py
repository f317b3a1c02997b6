"""Tests for the invertible elementwise transformations."""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import flowgp.autodiff as ad
from flowgp import flows
from flowgp.errors import DomainError, RangeError, UsageError


def _resolved(chain, **overrides):
    raw = flows.init_raw(chain)
    raw.update({k: np.float64(v) for k, v in overrides.items()})
    return flows.resolve(chain, raw)


def sal():
    return flows.parse_preset("sal")


ALL_PRESETS = ["sal", "sal3", "sal+sp", "softplus", "tanh", "arcsinh",
               "boxcox", "tukey", "arcsinh-mixture(3)", "sinh", "affine"]

INVERTIBLE_PRESETS = ALL_PRESETS  # every preset chain here is strictly monotone


class TestPresets:
    def test_sal_structure(self):
        c = sal()
        assert [s.kind for s in c.steps] == ["sinh-arcsinh", "affine"]

    def test_salk_repeats(self):
        c = flows.parse_preset("sal3")
        assert [s.kind for s in c.steps] == ["sinh-arcsinh", "affine"] * 3

    def test_sal_sp(self):
        c = flows.parse_preset("sal+sp")
        assert [s.kind for s in c.steps] == ["sinh-arcsinh", "affine", "softplus"]

    def test_mixture_size(self):
        c = flows.parse_preset("arcsinh-mixture(4)")
        assert c.steps[0].mixture_size == 4
        assert len(flows.param_spec(c)) == 16

    def test_identity_preset_is_empty(self):
        assert len(flows.parse_preset("identity")) == 0

    def test_inverse_parameterization(self):
        c = flows.parse_preset("inv-sal+sp")
        assert [s.kind for s in c.steps] == ["softplus", "affine", "sinh-arcsinh"]
        assert all(s.inverted for s in c.steps)

    def test_bad_preset_rejected(self):
        with pytest.raises(UsageError):
            flows.parse_preset("nosuchflow")

    def test_serialization_round_trip(self):
        for name in ALL_PRESETS + ["inv-sal+sp"]:
            c = flows.parse_preset(name)
            assert flows.chain_from_dict(flows.chain_to_dict(c)) == c


class TestForward:
    def test_identity_sal(self):
        c = sal()
        x = np.array([1.7, -0.3, 0.0])
        np.testing.assert_allclose(flows.flow_forward(c, x, _resolved(c)), x, atol=1e-14)

    def test_softplus_at_zero(self):
        c = flows.parse_preset("softplus")
        np.testing.assert_allclose(flows.flow_forward(c, np.array([0.0]), _resolved(c)),
                                   [math.log(2.0)], rtol=1e-15)

    def test_boxcox_at_two(self):
        c = flows.FlowChain((flows.FlowStep("boxcox"),))
        from flowgp.kernels import unconstrain
        raw = {"flow.k0.lam": unconstrain(1.0)}
        out = flows.flow_forward(c, np.array([2.0]), flows.resolve(c, raw))
        np.testing.assert_allclose(out, [1.0], atol=1e-12)

    def test_log_domain_violation(self):
        c = flows.FlowChain((flows.FlowStep("log"),))
        with pytest.raises(DomainError) as e:
            flows.flow_forward(c, np.array([-1.0]), flows.resolve(c, {}))
        assert e.value.step_index == 0

    def test_composition_order_is_step0_first(self):
        c = flows.FlowChain((flows.FlowStep("exp"), flows.FlowStep("affine")))
        from flowgp.kernels import unconstrain
        raw = {"flow.k1.a": np.float64(1.0), "flow.k1.b": unconstrain(2.0)}
        out = flows.flow_forward(c, np.array([0.0]), flows.resolve(c, raw))
        np.testing.assert_allclose(out, [3.0], rtol=1e-14)  # 1 + 2*exp(0)


class TestLogDeriv:
    def test_identity_sal_zero(self):
        c = sal()
        x = np.linspace(-2, 2, 9)
        ld = flows.flow_log_deriv(c, x, _resolved(c))
        np.testing.assert_allclose(ld, np.zeros_like(x), atol=1e-12)

    def test_softplus_at_zero(self):
        c = flows.parse_preset("softplus")
        ld = flows.flow_log_deriv(c, np.array([0.0]), _resolved(c))
        np.testing.assert_allclose(ld, [math.log(0.5)], rtol=1e-12)

    def test_tukey_matches_finite_difference(self):
        from flowgp.kernels import unconstrain
        c = flows.FlowChain((flows.FlowStep("tukey"),))
        raw = {"flow.k0.g": unconstrain(0.5), "flow.k0.h": unconstrain(0.1)}
        r = flows.resolve(c, raw)
        x = np.array([0.3])
        ld = flows.flow_log_deriv(c, x, r)
        h = 1e-7
        fd = (flows.flow_forward(c, x + h, r) - flows.flow_forward(c, x - h, r)) / (2 * h)
        np.testing.assert_allclose(np.exp(ld), fd, rtol=1e-7)

    @pytest.mark.parametrize("name", ALL_PRESETS)
    def test_matches_finite_difference_all_presets(self, name):
        c = flows.parse_preset(name)
        rng = np.random.default_rng(0)
        raw = flows.init_raw(c, mode="random", rng=rng)
        r = flows.resolve(c, raw)
        x = np.linspace(0.2, 2.0, 7)  # in-domain for every preset
        ld = flows.flow_log_deriv(c, x, r)
        h = 1e-6
        fd = (flows.flow_forward(c, x + h, r) - flows.flow_forward(c, x - h, r)) / (2 * h)
        np.testing.assert_allclose(ld, np.log(np.abs(fd)), rtol=1e-5, atol=1e-7)

    def test_composition_sums_per_step(self):
        c = flows.parse_preset("sal+sp")
        rng = np.random.default_rng(1)
        raw = flows.init_raw(c, mode="random", rng=rng)
        r = flows.resolve(c, raw)
        x = np.linspace(-1.5, 1.5, 5)
        total = flows.flow_log_deriv(c, x, r)
        acc = np.zeros_like(x)
        cur = x
        for i, step in enumerate(c.steps):
            sub = flows.FlowChain((step,))
            acc = acc + flows.flow_log_deriv(sub, cur, [r[i]])
            cur = flows.flow_forward(sub, cur, [r[i]])
        np.testing.assert_allclose(total, acc, rtol=1e-12)


class TestInverse:
    def test_softplus_inverse_at_log2(self):
        c = flows.parse_preset("softplus")
        out = flows.flow_inverse(c, np.array([math.log(2.0)]), _resolved(c))
        np.testing.assert_allclose(out, [0.0], atol=1e-14)

    def test_round_trip_sal3_thousand_points(self):
        c = flows.parse_preset("sal3")
        rng = np.random.default_rng(2)
        raw = flows.init_raw(c, mode="random", rng=rng)
        r = flows.resolve(c, raw)
        x = rng.normal(size=1000) * 2.0
        y = flows.flow_forward(c, x, r)
        np.testing.assert_allclose(flows.flow_inverse(c, y, r), x, atol=1e-8)

    def test_tanh_saturation_range_error(self):
        from flowgp.kernels import unconstrain
        c = flows.FlowChain((flows.FlowStep("tanh"),))
        raw = {"flow.k0.a": unconstrain(1.0), "flow.k0.b": unconstrain(1.0),
               "flow.k0.c": np.float64(0.0), "flow.k0.d": np.float64(0.0)}
        with pytest.raises(RangeError):
            flows.flow_inverse(c, np.array([2.0]), flows.resolve(c, raw))

    @pytest.mark.parametrize("name", INVERTIBLE_PRESETS)
    def test_round_trip_every_preset(self, name):
        c = flows.parse_preset(name)
        rng = np.random.default_rng(3)
        raw = flows.init_raw(c, mode="random", rng=rng)
        r = flows.resolve(c, raw)
        x = np.linspace(0.1, 1.5, 50)  # in-domain everywhere
        y = flows.flow_forward(c, x, r)
        np.testing.assert_allclose(flows.flow_inverse(c, y, r), x, atol=1e-8)

    def test_inverted_chain_round_trip(self):
        c = flows.parse_preset("inv-sal+sp")
        rng = np.random.default_rng(4)
        raw = flows.init_raw(c, mode="random", rng=rng)
        r = flows.resolve(c, raw)
        y = np.linspace(0.05, 4.0, 40)  # positive: domain of the inverted softplus
        z = flows.flow_forward(c, y, r)
        np.testing.assert_allclose(flows.flow_inverse(c, z, r), y, atol=1e-8)


class TestMonotonicityAndRanks:
    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_rank_preservation(self, seed):
        rng = np.random.default_rng(seed)
        name = ALL_PRESETS[seed % len(ALL_PRESETS)]
        c = flows.parse_preset(name)
        raw = flows.init_raw(c, mode="random", rng=rng)
        r = flows.resolve(c, raw)
        x = rng.uniform(0.05, 3.0, size=31)  # in-domain for every preset
        y = flows.flow_forward(c, x, r)
        assert np.array_equal(np.argsort(np.argsort(x)), np.argsort(np.argsort(y)))


class TestInitIdentity:
    def test_sal_recovers_identity(self):
        c = sal()
        fitted, mse = flows.init_identity(c, epochs=400, lr=0.05)
        assert mse <= 1e-6
        r = flows.resolve(c, fitted)
        x = np.linspace(-3, 3, 41)
        np.testing.assert_allclose(flows.flow_forward(c, x, r), x, atol=2e-3)

    def test_softplus_terminated_near_identity_on_positive_grid(self):
        c = flows.parse_preset("sal+sp")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fitted, mse = flows.init_identity(c, grid_range=(0.5, 3.0), epochs=800, lr=0.05)
        assert mse <= 1e-3

    def test_parameterless_chain_returns_mse(self):
        c = flows.parse_preset("softplus")
        fitted, mse = flows.init_identity(c, grid_range=(0.5, 3.0))
        assert fitted == {}
        assert mse > 0

    def test_unreachable_identity_warns(self):
        c = flows.parse_preset("softplus")
        # softplus alone cannot be identity near large negatives
        with pytest.warns(UserWarning):
            flows.init_identity(c, grid_range=(-3.0, 0.0), epochs=1)


class TestInitGaussianize:
    def test_affine_recovers_moments(self):
        rng = np.random.default_rng(5)
        y = rng.normal(5.0, 2.0, size=10_000)
        c = flows.FlowChain((flows.FlowStep("affine"),))
        fitted, _ = flows.init_gaussianize(c, y, epochs=1500, lr=0.05)
        r = flows.resolve(c, fitted)
        a = float(np.asarray(r[0]["a"]))
        b = float(np.asarray(r[0]["b"]))
        assert abs(a - 5.0) / 5.0 < 0.1
        assert abs(b - 2.0) / 2.0 < 0.1

    def test_standard_normal_data_gives_near_identity_loglik(self):
        rng = np.random.default_rng(6)
        y = rng.standard_normal(4000)
        c = sal()
        fitted, loglik = flows.init_gaussianize(c, y, epochs=800, lr=0.02)
        entropy = 0.5 * (1.0 + math.log(2.0 * math.pi))
        assert abs(loglik - (-entropy)) < 0.05

    def test_single_value_warns(self):
        c = flows.FlowChain((flows.FlowStep("affine"),))
        with pytest.warns(UserWarning):
            flows.init_gaussianize(c, np.array([1.3]), epochs=1)

    def test_out_of_range_data_raises(self):
        c = flows.parse_preset("sal+sp")
        with pytest.raises(RangeError):
            flows.init_gaussianize(c, np.array([-1.0, 2.0]), epochs=1)

    def test_fallback_for_tanh_chain(self):
        rng = np.random.default_rng(7)
        y = np.tanh(rng.standard_normal(500))
        c = flows.parse_preset("tanh")
        fitted, score = flows.init_gaussianize(c, y, epochs=300, lr=0.05)
        assert set(fitted) == {f"flow.k0.{p}" for p in ("a", "b", "c", "d")}


class TestTapeIntegration:
    """Flow parameter gradients through the tape pass finite differences."""

    @pytest.mark.parametrize("name", ["sal", "sal+sp", "tukey", "boxcox",
                                      "arcsinh-mixture(2)", "tanh"])
    def test_logdet_param_gradients(self, name):
        c = flows.parse_preset(name)
        rng = np.random.default_rng(8)
        init = flows.init_raw(c, mode="random", rng=rng)
        if not init:
            pytest.skip("parameterless chain")
        x = np.linspace(0.3, 1.4, 6)

        t = ad.Tape()
        refs = {k: t.slot(k, ()) for k in init}
        r = flows.resolve(c, refs)
        fk, ld = flows.flow_forward_logdet(c, t.const(x), r)
        t.set_loss(ad.sum_(ad.square(fk)) + ad.sum_(ld))
        theta = t.pack(init)

        def f(v):
            return t.forward(v)

        def g(v):
            t.forward(v)
            return t.backward()

        assert ad.finite_diff_check(f, g, theta) < 1e-6
