import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from hypertransformer.errors import DegenerateInputError, DimensionError
from hypertransformer.metrics import MetricsReport, cc, ergas, mae_map, mae_per_band, psnr, rmse, rsnr, sam


# -- naive-loop oracles ----------------------------------------------------------------
def loop_cc(x, r):
    c, h, w = x.shape
    total = 0.0
    for b in range(c):
        mx = sum(x[b, i, j] for i in range(h) for j in range(w)) / (h * w)
        mr = sum(r[b, i, j] for i in range(h) for j in range(w)) / (h * w)
        sxy = sxx = syy = 0.0
        for i in range(h):
            for j in range(w):
                dx, dr = x[b, i, j] - mx, r[b, i, j] - mr
                sxy += dx * dr
                sxx += dx * dx
                syy += dr * dr
        total += sxy / math.sqrt(sxx * syy)
    return total / c


def loop_sam(x, r):
    c, h, w = x.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            dot = sum(x[b, i, j] * r[b, i, j] for b in range(c))
            nx = math.sqrt(sum(x[b, i, j] ** 2 for b in range(c)))
            nr = math.sqrt(sum(r[b, i, j] ** 2 for b in range(c)))
            total += math.acos(max(-1.0, min(1.0, dot / (nx * nr))))
    return math.degrees(total / (h * w))


def loop_rmse(x, r):
    c, h, w = x.shape
    s = sum((x[b, i, j] - r[b, i, j]) ** 2 for b in range(c) for i in range(h) for j in range(w))
    return math.sqrt(s / (c * h * w))


def loop_ergas(x, r, ratio=4):
    c, h, w = x.shape
    acc = 0.0
    for b in range(c):
        mse = sum((x[b, i, j] - r[b, i, j]) ** 2 for i in range(h) for j in range(w)) / (h * w)
        mean = sum(r[b, i, j] for i in range(h) for j in range(w)) / (h * w)
        acc += mse / mean**2
    return 100.0 / ratio * math.sqrt(acc / c)


def loop_mae(x, r):
    c, h, w = x.shape
    return [sum(abs(x[b, i, j] - r[b, i, j]) for i in range(h) for j in range(w)) / (h * w) for b in range(c)]


@pytest.fixture
def pair():
    r = np.random.default_rng(8)
    ref = r.uniform(0.1, 1.0, (4, 8, 8))
    return np.clip(ref + 0.05 * r.standard_normal(ref.shape), 0.01, 1.0), ref


def test_metrics_match_loop_oracles(pair):
    x, ref = pair
    assert abs(cc(x, ref) - loop_cc(x, ref)) < 1e-10
    assert abs(sam(x, ref) - loop_sam(x, ref)) < 1e-10
    assert abs(rmse(x, ref) - loop_rmse(x, ref)) < 1e-10
    assert abs(ergas(x, ref) - loop_ergas(x, ref)) < 1e-10
    assert abs(psnr(x, ref) - 20 * math.log10(1 / loop_rmse(x, ref))) < 1e-10
    assert np.abs(mae_per_band(x, ref) - loop_mae(x, ref)).max() < 1e-12


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 4), st.integers(2, 8), st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_metrics_match_loop_oracles_random_shapes(c, h, w, seed):
    r = np.random.default_rng(seed)
    ref = r.uniform(0.1, 1.0, (c, h, w))
    x = r.uniform(0.1, 1.0, (c, h, w))
    assert abs(cc(x, ref) - loop_cc(x, ref)) < 1e-10
    assert abs(sam(x, ref) - loop_sam(x, ref)) < 1e-10
    assert abs(rmse(x, ref) - loop_rmse(x, ref)) < 1e-10
    assert abs(ergas(x, ref) - loop_ergas(x, ref)) < 1e-10


def test_ideal_values_at_reference(pair):
    _, ref = pair
    assert cc(ref, ref) == 1.0
    assert sam(ref, ref) == 0.0
    assert rmse(ref, ref) == 0.0
    assert ergas(ref, ref) == 0.0
    assert psnr(ref, ref) == math.inf
    assert rsnr(ref, ref) == math.inf
    assert_array_equal(mae_per_band(ref, ref), 0.0)
    assert_array_equal(mae_map(ref, ref), 0.0)


def test_cc_sign_and_affine_invariance(pair):
    x, ref = pair
    centred = ref - ref.mean(axis=(1, 2), keepdims=True)
    assert cc(-centred, centred) == pytest.approx(-1.0, abs=1e-15)
    assert cc(2.5 * ref + 0.3, ref) == pytest.approx(1.0, abs=1e-15)
    assert cc(3.0 * x - 1.0, ref) == pytest.approx(cc(x, ref), abs=1e-15)


def test_sam_scale_invariance_and_orthogonality(pair):
    x, ref = pair
    assert sam(2.0 * ref, ref) == 0.0
    assert sam(2.0 * x, ref) == pytest.approx(sam(x, ref), abs=1e-13)
    a = np.array([1.0, 0.0]).reshape(2, 1, 1)
    b = np.array([0.0, 1.0]).reshape(2, 1, 1)
    assert sam(a, b) == pytest.approx(90.0, abs=1e-12)


def test_rmse_and_psnr_closed_forms():
    ref = np.full((2, 3, 3), 0.5)
    assert rmse(ref + 0.1, ref) == pytest.approx(0.1, abs=1e-15)
    assert psnr(ref + 0.1, ref) == pytest.approx(20.0, abs=1e-12)
    a = np.array([0.0, 0.3]).reshape(1, 1, 2)
    b = np.array([0.4, 0.3]).reshape(1, 1, 2)
    assert rmse(a, b) == pytest.approx(0.28284, abs=1e-5)


def test_ergas_closed_form_and_scale_invariance(pair):
    ref = np.full((1, 4, 4), 0.5)
    assert ergas(ref + 0.05, ref, ratio=4) == pytest.approx(2.5, abs=1e-12)
    x, r = pair
    assert ergas(3.0 * x, 3.0 * r) == pytest.approx(ergas(x, r), rel=1e-13)


def test_mae_offset_in_one_band():
    ref = np.random.default_rng(0).random((3, 4, 4))
    x = ref.copy()
    x[0] += 0.2
    assert_allclose(mae_per_band(x, ref), [0.2, 0.0, 0.0], rtol=0, atol=1e-15)


def test_rsnr_definition(pair):
    x, ref = pair
    want = 10 * math.log10((ref**2).sum() / ((ref - x) ** 2).sum())
    assert rsnr(x, ref) == pytest.approx(want, rel=1e-14)


def test_degenerate_inputs():
    ref = np.random.default_rng(0).random((2, 3, 3))
    flat = ref.copy()
    flat[1] = 0.4
    with pytest.raises(DegenerateInputError, match="band 1"):
        cc(ref, flat)
    zero_pix = ref.copy()
    zero_pix[:, 0, 0] = 0
    with pytest.raises(DegenerateInputError):
        sam(zero_pix, ref)
    zero_band = ref.copy()
    zero_band[0] = 0
    with pytest.raises(DegenerateInputError):
        ergas(ref, zero_band)
    with pytest.raises(DimensionError):
        rmse(ref, ref[:1])


def test_report_serialization(pair):
    x, ref = pair
    rep = MetricsReport.compute(x, ref, seed=3, config_hash="abc")
    d = json.loads(rep.to_json())
    assert set(d) >= {"cc", "sam", "rmse", "ergas", "psnr", "mae_per_band", "config_hash", "seed"}
    assert len(d["mae_per_band"]) == 4
    back = MetricsReport.from_dict(d)
    assert back.to_json() == rep.to_json()
    ideal = json.loads(MetricsReport.compute(ref, ref).to_json())
    assert ideal["psnr"] == "inf"
    assert MetricsReport.from_dict(ideal).psnr_db == math.inf


def test_report_average(pair):
    x, ref = pair
    a = MetricsReport.compute(x, ref)
    b = MetricsReport.compute(ref, ref)
    avg = MetricsReport.average([a, a])
    assert avg.to_json() == a.to_json()
    assert MetricsReport.average([a, b]).rmse == pytest.approx(a.rmse / 2)
    with pytest.raises(ValueError):
        MetricsReport.average([])
