import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import cirsurrogate.net as net
from cirsurrogate.core import PARAM_NAMES
from cirsurrogate.dataset import DesignBox, sample_params
from cirsurrogate.evaluation import EvaluationError, ecdf, evaluate, nrmse, pearson, write_report
from conftest import read_csv


def test_nrmse_hand_examples():
    assert nrmse([1, 2, 3], [1, 2, 3]) == 0.0
    assert nrmse([3, 4], [0, 0]) == 1.0
    assert nrmse([1, 0], [1, 1]) == 1.0
    assert nrmse([2, 0, 0], [2, 0, 0.2]) == pytest.approx(0.1, rel=1e-15)


def test_nrmse_errors():
    with pytest.raises(EvaluationError):
        nrmse([0, 0], [1, 1])
    with pytest.raises(EvaluationError):
        nrmse([1, 2], [1, 2, 3])


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 1e6), st.integers(0, 10_000))
def test_nrmse_scale_covariance(a, seed):
    r = np.random.default_rng(seed)
    h, g = r.random(30) + 0.01, r.random(30)
    assert nrmse(a * h, a * g) == pytest.approx(nrmse(h, g), rel=1e-12)


def test_ecdf_examples():
    assert ecdf([0.1]).percentile(0.9) == 0.1
    c = ecdf(np.arange(10, 0, -1.0))
    assert c.percentile(0.9) == 9.0
    assert c.percentile(0.5) == 5.0
    assert c.percentile(1.0) == 10.0
    np.testing.assert_allclose(c.fractions, np.arange(1, 11) / 10)
    with pytest.raises(EvaluationError):
        ecdf([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=50), st.floats(0, 1), st.floats(0, 1))
def test_ecdf_percentile_monotone(vals, q1, q2):
    c = ecdf(vals)
    lo, hi = sorted((q1, q2))
    assert c.percentile(lo) <= c.percentile(hi)
    assert np.all(np.diff(c.fractions) > 0) and c.fractions[-1] == 1.0


def test_pearson_examples():
    x = np.array([1.0, 2, 3, 4, 5])
    assert pearson(x, 3 * x + 1) == pytest.approx(1.0, abs=1e-15)
    assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-15)
    assert pearson([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, rel=1e-12)
    with pytest.raises(EvaluationError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(EvaluationError):
        pearson([1, 2], [1, 2])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(-100, 100), st.floats(0.01, 100))
def test_pearson_affine_invariance(seed, a, b, c):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=20), r.normal(size=20)
    assert pearson(a * x + b, c * y - b) == pytest.approx(pearson(x, y), abs=1e-12)


def _fake_predict(monkeypatch, scale=1.1):
    def predict(model, p, grid=None):
        return SimpleNamespace(h=scale * np.linspace(1.0, 2.0, 5) * p.ell_z * 1e5)
    monkeypatch.setattr(net, "predict_cir", predict)


def test_evaluate_excludes_zero_references(monkeypatch):
    _fake_predict(monkeypatch)
    params = np.array([p.as_array() for p in sample_params(DesignBox(), 6, seed=1)])
    H = np.array([np.linspace(1.0, 2.0, 5) * p[7] * 1e5 for p in params])
    H[2] = 0.0
    rep = evaluate(None, np.arange(10, 16), params, H)
    assert rep.excluded == 1
    assert list(rep.indices) == [10, 11, 13, 14, 15]
    np.testing.assert_allclose(rep.nrmse, 0.1, rtol=1e-12)
    with pytest.raises(EvaluationError):
        evaluate(None, np.arange(0), params[:0], H[:0])


def test_report_files(monkeypatch, tmp_path):
    _fake_predict(monkeypatch)
    r = np.random.default_rng(0)
    params = np.array([p.as_array() for p in sample_params(DesignBox(), 8, seed=2)])
    H = np.array([np.linspace(1.0, 2.0, 5) * p[7] * 1e5 * r.uniform(0.8, 1.2) for p in params])
    rep = evaluate(None, np.arange(8), params, H, out=tmp_path)
    head, rows = read_csv(tmp_path / "correlations.csv")
    assert head == ["ParamName", "ParamMean", "CorrWithNRMSE"]
    assert [row[0] for row in rows] == list(PARAM_NAMES)
    for (name, mean, corr), k in zip(rows, range(8)):
        assert float(mean) == pytest.approx(params[:, k].mean(), rel=1e-6)
        assert -1 <= float(corr) <= 1
    head, rows = read_csv(tmp_path / "cdf.csv")
    assert head == ["value", "fraction"]
    vals = [float(v) for v, _ in rows]
    fr = [float(f) for _, f in rows]
    assert vals == sorted(vals) and fr[-1] == 1.0
    head, rows = read_csv(tmp_path / "samples.csv")
    assert head == ["index", *PARAM_NAMES, "nrmse"] and len(rows) == 8
    assert (tmp_path / "cdf.svg").read_text().startswith("<svg")
    assert rep.percentiles()["p90"] == rep.cdf.percentile(0.9)


def test_constant_column_reported_as_na(tmp_path):
    params = np.tile(np.arange(1.0, 9.0), (4, 1))
    params[:, 0] = [1, 2, 3, 4]
    from cirsurrogate.evaluation import EvalReport, correlation_table

    errs = np.array([0.1, 0.3, 0.2, 0.4])
    rep = EvalReport(np.arange(4), params, errs, 0, correlation_table(params, errs))
    write_report(rep, tmp_path)
    _, rows = read_csv(tmp_path / "correlations.csv")
    assert rows[1][2] == "n/a"
    assert math.isfinite(float(rows[0][2]))
