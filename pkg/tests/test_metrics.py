import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from muwarm.data import TokenStream
from muwarm.metrics import (
    CoordCheckResult,
    activation_l1,
    coord_check,
    default_sigma,
    fit_slope,
    gaussian_kernel,
    gaussian_smooth,
    weight_norms,
)
from muwarm.model import ModelConfig, ScaleLadder
from muwarm.parameterization import Scheme


class TestActivationL1:
    def test_zero(self):
        assert activation_l1({"a": np.zeros((2, 3))}) == {"a": 0.0}

    def test_hand_case(self):
        assert activation_l1({"a": np.array([1.0, -1.0, 3.0])})["a"] == pytest.approx(5 / 3)

    def test_permutation_invariant(self):
        x = np.random.default_rng(0).standard_normal((8, 5, 3))
        perm = x[np.random.default_rng(1).permutation(8)]
        assert activation_l1({"a": x})["a"] == pytest.approx(activation_l1({"a": perm})["a"], rel=1e-14)


class TestWeightNorms:
    def test_zero_and_constant(self):
        n = weight_norms({"z": np.zeros(4), "two": np.full((3, 3), 2.0)})
        assert n["z"] == (0.0, 0.0) and n["two"] == (2.0, 2.0)

    def test_gaussian_l2(self):
        w = np.random.default_rng(0).normal(0, 0.3, size=200_000)
        assert abs(weight_norms({"w": w})["w"][1] - 0.3) <= 0.015


class TestSmoothing:
    def test_sigma_zero_identity(self):
        v = [3.0, 1.0, 4.0, 1.0, 5.0]
        assert gaussian_smooth(v, 0).smoothed == v

    @given(st.floats(-100, 100), st.integers(1, 60), st.floats(0.1, 10))
    def test_constant_unchanged(self, c, n, sigma):
        out = gaussian_smooth([c] * n, sigma).smoothed
        assert np.allclose(out, c, rtol=1e-12, atol=1e-12)

    def test_impulse(self):
        v = np.zeros(41)
        v[20] = 1.0
        out = np.array(gaussian_smooth(v, 2.0).smoothed)
        k = gaussian_kernel(2.0)
        assert out[20] == pytest.approx(k[len(k) // 2], abs=1e-15)
        assert abs(out.sum() - 1.0) <= 1e-9

    @given(st.floats(0.1, 20))
    def test_kernel_normalized(self, sigma):
        k = gaussian_kernel(sigma)
        assert abs(k.sum() - 1) < 1e-12 and len(k) == 2 * math.ceil(3 * sigma) + 1

    def test_periodic_mean_preserved(self):
        v = np.tile([1.0, 2.0, 3.0, 2.0], 25)
        out = gaussian_smooth(v, 1.5).smoothed
        assert abs(np.mean(out) - np.mean(v)) < 1e-6

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            gaussian_smooth([1.0], -1)

    def test_default_sigma(self):
        assert default_sigma(50) == 1.0


class TestSlope:
    @given(st.floats(-3, 3), st.floats(-5, 5))
    def test_exact_recovery(self, alpha, c):
        widths = [32, 64, 128, 256]
        vals = [math.exp(alpha * math.log(w) + c) for w in widths]
        assert abs(fit_slope(widths, vals) - alpha) <= 1e-9


def _tiny_setup(scheme, steps=2):
    base = ModelConfig.with_width(16, head_size=8, block_size=8)
    ladder = ScaleLadder.from_widths(base, [16, 32, 64])
    rng = np.random.default_rng(0)
    corpus = rng.integers(32, 96, size=5000)
    stream = TokenStream(corpus, 8, 4)
    batches = [stream.next_batch() for _ in range(steps)]
    return ladder, batches, stream.next_batch()


class TestCoordCheck:
    def test_step_zero_zero_readout(self):
        scheme = Scheme("muP", base_width=16, zero_readout=True)
        ladder, batches, probe = _tiny_setup(scheme)
        cc = coord_check(ladder, scheme, 2**-6, batches, probe, steps=0, seeds=(0,))
        assert cc.norms["logits"][0] == [0.0, 0.0, 0.0]

    def test_every_tap_every_width(self):
        scheme = Scheme("muP", base_width=16, zero_readout=True)
        ladder, batches, probe = _tiny_setup(scheme)
        cc = coord_check(ladder, scheme, 2**-6, batches, probe, steps=2, seeds=(0, 1))
        assert cc.layers == ["embed", "block0", "block1", "logits"]
        for layer in cc.layers:
            for s in cc.steps:
                assert len(cc.norms[layer][s]) == 3
                assert math.isfinite(cc.slopes[layer][s])

    def test_needs_three_widths(self):
        scheme = Scheme("muP", base_width=16)
        base = ModelConfig.with_width(16, block_size=8)
        with pytest.raises(ValueError):
            coord_check(ScaleLadder.from_widths(base, [16, 32]), scheme, 0.01, [], None, steps=0)

    def test_nan_recorded_as_failure(self):
        scheme = Scheme("muP", base_width=16)
        ladder, batches, probe = _tiny_setup(scheme)
        from muwarm.model import build

        def poisoned(cfg, seed):
            m = build(cfg, scheme, seed)
            if cfg.d_model == 32:
                m.params["h.0.mlp.w1"].data[:] = np.nan
            return m

        cc = coord_check(ladder, scheme, 0.01, batches, probe, steps=1, seeds=(0,), make_model=poisoned)
        assert not cc.passes()
        assert any(f["width"] == 32 for f in cc.failures)

    def test_json_roundtrip(self):
        scheme = Scheme("muP", base_width=16, zero_readout=True)
        ladder, batches, probe = _tiny_setup(scheme)
        cc = coord_check(ladder, scheme, 2**-6, batches, probe, steps=1, seeds=(0,), label="x")
        back = CoordCheckResult.from_dict(json.loads(cc.to_json()))
        assert back.to_json() == cc.to_json()

    def test_violations_and_pass(self):
        cc = CoordCheckResult(
            widths=[1, 2, 4], steps=[0, 1], layers=["a"], norms={}, slopes={"a": {0: 3.0, 1: 0.1}},
        )
        assert cc.passes()  # step 0 is not part of the bound
        assert cc.violations(0.05) == [("a", 1, 0.1)]
        assert cc.max_abs_slope() == 3.0
