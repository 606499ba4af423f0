import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mrihallu.metrics import (MetricReport, aggregate, jsonable, metric_triple, nrmse, psnr, report_pair,
                              ssim, ssim_map)
from mrihallu.mri import make_coil_maps, make_sample
from mrihallu.recon import UNetLite
from oracles import ssim_naive

images = arrays(np.float64, (8, 8), elements=st.floats(0.01, 1.0))


class TestPSNR:
    def test_identical_is_infinite_and_flagged(self, rng):
        a = rng.random((8, 8))
        assert psnr(a, a) == math.inf
        t = metric_triple(a, a)
        assert "psnr_infinite" in t["flags"]
        assert jsonable(t)["psnr"] is None

    def test_single_pixel_error(self):
        a = np.ones((8, 8))
        b = a.copy()
        b[3, 4] = 0.0
        # MSE = 1/64, peak 1
        assert psnr(a, b) == pytest.approx(10 * math.log10(64), abs=1e-12)
        assert psnr(a, b) == pytest.approx(18.06, abs=5e-3)

    @settings(max_examples=30, deadline=None)
    @given(a=images, b=images, c=st.floats(0.1, 100.0))
    def test_scale_invariant(self, a, b, c):
        if np.array_equal(a, b):
            return
        assert psnr(c * a, c * b) == pytest.approx(psnr(a, b), abs=1e-9)

    def test_monotone_in_noise(self):
        rng = np.random.default_rng(5)
        a = rng.random((32, 32))
        levels = [0.01, 0.02, 0.05, 0.1, 0.2]
        means = [np.mean([psnr(a, a + rng.normal(0, s, a.shape)) for _ in range(20)]) for s in levels]
        assert all(x > y for x, y in zip(means, means[1:]))

    def test_empty(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((0,)), np.zeros((0,)))


class TestNRMSE:
    def test_identity_values(self, rng):
        a = rng.random((8, 8)) + 0.1
        assert nrmse(a, a) == 0.0
        assert nrmse(a, np.zeros_like(a)) == pytest.approx(1.0)
        assert nrmse(a, 2 * a) == pytest.approx(1.0)

    def test_zero_reference(self):
        with pytest.raises(ValueError):
            nrmse(np.zeros((4, 4)), np.ones((4, 4)))

    @settings(max_examples=50, deadline=None)
    @given(a=images, b=images, c=images)
    def test_triangle_bound(self, a, b, c):
        assert nrmse(a, c) <= nrmse(a, b) + np.linalg.norm(b - c) / np.linalg.norm(a) + 1e-12


class TestSSIM:
    def test_identical_exactly_one(self, rng):
        a = rng.random((16, 16))
        assert ssim(a, a) == 1.0

    def test_zero_pair_flagged(self):
        z = np.zeros((8, 8))
        t = metric_triple(z, z)
        assert t["ssim"] == 1.0 and "ssim_constant_zero" in t["flags"]

    def test_matches_naive_oracle(self, rng):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert abs(ssim(a, b) - ssim_naive(a, b)) < 1e-10

    def test_symmetric_when_maxima_agree(self, rng):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        b[0, 0] = a.max()
        b = np.minimum(b, a.max())
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-14)

    @settings(max_examples=40, deadline=None)
    @given(a=arrays(np.float64, (8, 8), elements=st.floats(0.0, 1.0)),
           b=arrays(np.float64, (8, 8), elements=st.floats(0.0, 1.0)))
    def test_range(self, a, b):
        s = ssim(a, b)
        assert -1.0 - 1e-12 <= s <= 1.0 + 1e-12

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim_map(np.ones((6, 6)), np.zeros((6, 6)))


@pytest.fixture(scope="module")
def setup():
    s = make_sample(0, h=16, w=16, n_coils=2, acceleration=2, center_fraction=0.125,
                    noise_sigma=0.01, seed=0, coil_seed=0)
    return s, make_coil_maps(16, 16, 2, 0), UNetLite((16, 16)).init(0)


class TestReports:
    def test_zero_delta_gives_identity_values(self, setup):
        s, maps, m = setup
        r = report_pair(s.kspace, np.zeros(s.kspace.shape), m, mask=s.mask, maps=maps, sample_id=s.id)
        for pair in (r.input_pair, r.recon_pair):
            assert pair["psnr"] == math.inf and pair["nrmse"] == 0.0 and pair["ssim"] == 1.0
        d = r.to_dict()
        assert d["input_pair"]["psnr"] is None and "input_psnr_infinite" in d["flags"]
        json.dumps(d, allow_nan=False)

    def test_missing_delta(self, setup):
        s, maps, m = setup
        with pytest.raises(ValueError):
            report_pair(s.kspace, None, m, mask=s.mask, maps=maps)

    def test_aggregate_single(self):
        r = MetricReport("a", {"psnr": 30.0, "nrmse": 0.1, "ssim": 0.9}, {"psnr": 20.0, "nrmse": 0.2, "ssim": 0.8})
        agg = aggregate([r])
        assert agg["input_pair"]["psnr"] == {"mean": 30.0, "std": 0.0, "n": 1}
        assert agg["recon_pair"]["ssim"]["mean"] == 0.8

    def test_aggregate_population_std_skips_infinite(self):
        rs = [MetricReport(str(i), {"psnr": v, "nrmse": 0.0, "ssim": 1.0}, {"psnr": v, "nrmse": 0.0, "ssim": 1.0})
              for i, v in enumerate([10.0, 20.0, math.inf])]
        agg = aggregate(rs)["input_pair"]["psnr"]
        assert agg == {"mean": 15.0, "std": 5.0, "n": 2}
