import numpy as np
import pytest

from metaunlearn import diffusion as dm
from metaunlearn import metrics as mx
from metaunlearn.meta import MetaStepRecord


def test_forget_score_degenerate_center_emitter(table, sched, monkeypatch):
    cfg = dm.ModelConfig()
    params = dm.init_params(cfg, np.random.default_rng(0))

    def fake_sample(params_, cond, sched_, rng, n):
        return np.tile(table["F"].center, (n, 1))

    monkeypatch.setattr(mx, "sample", fake_sample)
    assert mx.forget_score(params, table, sched, 100, 0) == 100.0


def test_forget_score_wrong_cluster_emitter(table, sched, monkeypatch):
    cfg = dm.ModelConfig()
    params = dm.init_params(cfg, np.random.default_rng(0))
    monkeypatch.setattr(mx, "sample", lambda p, c, s, r, n: np.tile(table["U1"].center, (n, 1)))
    assert mx.forget_score(params, table, sched, 100, 0) == 0.0


def test_forget_score_requires_min_samples(table, sched):
    cfg = dm.ModelConfig()
    params = dm.init_params(cfg, np.random.default_rng(0))
    with pytest.raises(ValueError):
        mx.forget_score(params, table, sched, 99, 0)


def test_forget_score_pretrained_above_band(theta_star, table, sched):
    assert mx.forget_score(theta_star, table, sched, 500, 7) > 80.0


def test_forget_score_deterministic(theta_star, table, sched):
    a = mx.forget_score(theta_star, table, sched, 200, 3)
    b = mx.forget_score(theta_star, table, sched, 200, 3)
    assert a == b


# ---------------------------------------------------------------------------
# MMD
# ---------------------------------------------------------------------------


def test_mmd_identical_sets_near_zero():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((50, 2))
    assert mx.mmd2_unbiased(x, x.copy()) <= 0.05


def test_mmd_requires_two_samples():
    with pytest.raises(ValueError):
        mx.mmd2_unbiased(np.zeros((1, 2)), np.zeros((1, 2)))


def test_mmd_null_calibration_single():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1000, 2))
    y = rng.standard_normal((1000, 2))
    assert abs(mx.mmd2_unbiased(x, y)) < 0.01


def test_mmd_null_calibration_quantile():
    # over 50 null draws at n=1000, the 95th percentile of |estimate| < 0.02
    rng = np.random.default_rng(2)
    vals = []
    for _ in range(50):
        x = rng.standard_normal((1000, 2))
        y = rng.standard_normal((1000, 2))
        vals.append(abs(mx.mmd2_unbiased(x, y)))
    assert np.quantile(vals, 0.95) < 0.02


def test_mmd_detects_shift():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((400, 2))
    y = rng.standard_normal((400, 2)) + 2.0
    assert mx.mmd2_unbiased(x, y) > 0.1


def test_median_bandwidth_positive():
    rng = np.random.default_rng(4)
    assert mx.median_bandwidth(rng.standard_normal((10, 2)), rng.standard_normal((10, 2))) > 0


def test_retain_mmd_rejects_forget_concept(theta_star, table, sched):
    with pytest.raises(ValueError):
        mx.retain_mmd(theta_star, table, "F", sched, 100, 0)


def test_retain_mmd_small_for_trained_model(theta_star, table, sched):
    assert mx.retain_mmd(theta_star, table, "U1", sched, 500, 7) < 0.1


# ---------------------------------------------------------------------------
# Alignment series
# ---------------------------------------------------------------------------


def _recs(values):
    return [MetaStepRecord(i, 0.0, 0.0, 0.0, float(v), 0.0) for i, v in enumerate(values)]


def test_alignment_constant_series():
    slope, intercept = mx.alignment_series(_recs([0.4] * 8))
    assert abs(slope) < 1e-12 and np.isclose(intercept, 0.4)


def test_alignment_two_point_line():
    slope, intercept = mx.alignment_series(_recs([1.0, 0.0]))
    assert np.isclose(slope, -1.0) and np.isclose(intercept, 1.0)


def test_alignment_matches_hand_ols():
    values = [0.2, 0.5, 0.1, -0.3, 0.4]
    steps = np.arange(5.0)
    slope, intercept = mx.alignment_series(_recs(values))
    xm, ym = steps.mean(), np.mean(values)
    hand_slope = float(np.sum((steps - xm) * (np.array(values) - ym)) / np.sum((steps - xm) ** 2))
    hand_icept = ym - hand_slope * xm
    assert abs(slope - hand_slope) < 1e-12
    assert abs(intercept - hand_icept) < 1e-12


def test_alignment_needs_two_records():
    with pytest.raises(ValueError):
        mx.alignment_series(_recs([0.1]))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def test_metric_report_bounds():
    with pytest.raises(ValueError):
        mx.MetricReport(forget_score=101.0, retain_mmd={}, related_score=0.0, alignment=None)
    with pytest.raises(ValueError):
        mx.MetricReport(forget_score=10.0, retain_mmd={}, related_score=-1.0, alignment=None)


def test_metric_report_build_and_save(theta_star, table, sched, tmp_path):
    report = mx.build_metric_report(theta_star, table, sched, 200, 7, records=_recs([0.1, 0.2, 0.0]))
    assert set(report.retain_mmd) == {"R", "U1", "U2"}
    assert report.alignment is not None
    mx.save_metric_report(tmp_path / "r.json", report)
    import json

    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["schema"] == mx.REPORT_SCHEMA
    assert 0 <= doc["forget_score"] <= 100
