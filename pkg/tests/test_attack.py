import numpy as np
import pytest

from metaunlearn import attack as atk
from metaunlearn import metrics as mx
from metaunlearn.attack import AttackConfig, CompareBands, RelearnCurve, compare_runs

from conftest import EVAL_SEED


def _acfg(**kw):
    base = dict(dataset="ft_single", lr=1e-3, checkpoints_at=(10, 20), batch=16, eval_samples=150, eval_seed=EVAL_SEED)
    base.update(kw)
    return AttackConfig(**base)


# ---------------------------------------------------------------------------
# Config validation
# ---------------------------------------------------------------------------


def test_attack_config_validation():
    with pytest.raises(ValueError):
        _acfg(checkpoints_at=(20, 10))
    with pytest.raises(ValueError):
        _acfg(checkpoints_at=())
    with pytest.raises(ValueError):
        _acfg(lr=0.0)
    with pytest.raises(ValueError):
        _acfg(dataset="nope")
    with pytest.raises(ValueError):
        _acfg(optimizer="nope")


# ---------------------------------------------------------------------------
# Attack runs
# ---------------------------------------------------------------------------


def test_zero_step_entry_equals_released_metrics(theta_esd, bundle, table, sched):
    cfg = _acfg(checkpoints_at=(0,))
    curve, snaps = atk.run_attack(theta_esd, cfg, bundle, table, sched, np.random.default_rng(0))
    assert curve.steps == [0]
    assert np.array_equal(snaps[0].flat, theta_esd.flat)
    assert curve.forget_score[0] == mx.forget_score(theta_esd, table, sched, cfg.eval_samples, cfg.eval_seed)


def test_attack_is_deterministic(theta_esd, bundle, table, sched):
    cfg = _acfg()
    c1, _ = atk.run_attack(theta_esd, cfg, bundle, table, sched, np.random.default_rng(5))
    c2, _ = atk.run_attack(theta_esd, cfg, bundle, table, sched, np.random.default_rng(5))
    assert c1.forget_score == c2.forget_score
    assert c1.l_forget == c2.l_forget
    assert c1.retain_mmd == c2.retain_mmd


def test_ft_attack_strictly_relearns(theta_esd, bundle, table, sched):
    cfg = _acfg(checkpoints_at=(50, 100, 200, 300), eval_samples=400)
    released = mx.forget_score(theta_esd, table, sched, 400, EVAL_SEED)
    curve, _ = atk.run_attack(theta_esd, cfg, bundle, table, sched, np.random.default_rng(21))
    assert all(v > released for v in curve.forget_score)
    assert curve.forget_score[-1] > curve.forget_score[0]


def test_ft_attack_monotone_exposure(theta_esd, bundle, table, sched):
    # the finetuning loss on the attack's own data never rises by more than batch noise
    cfg = _acfg(checkpoints_at=(50, 100, 200, 300))
    curve, _ = atk.run_attack(theta_esd, cfg, bundle, table, sched, np.random.default_rng(21))
    for a, b in zip(curve.l_forget, curve.l_forget[1:]):
        assert b <= a + 0.1


def test_benign_attack_on_pretrained_is_a_no_op(theta_star, bundle, table, sched):
    cfg = _acfg(dataset="benign", checkpoints_at=(50, 100, 200, 300), eval_samples=400)
    start = mx.forget_score(theta_star, table, sched, 400, EVAL_SEED)
    curve, _ = atk.run_attack(theta_star, cfg, bundle, table, sched, np.random.default_rng(21))
    assert all(abs(v - start) <= 10.0 for v in curve.forget_score)


def test_ft_multi_uses_paraphrase_embeddings(bundle, table, theta_esd, sched):
    rng = np.random.default_rng(3)
    embs = atk.paraphrase_embeddings(table, 5, 0.1, rng)
    assert embs.shape == (5, 8)
    assert np.allclose(np.linalg.norm(embs, axis=1), 1.0)
    base = table.embedding("F")
    assert all(e @ base > 0.9 for e in embs)  # small perturbations stay close


def test_attack_truncates_on_divergence(theta_esd, bundle, table, sched):
    cfg = _acfg(lr=1e9, checkpoints_at=(10, 20))
    curve, snaps = atk.run_attack(theta_esd, cfg, bundle, table, sched, np.random.default_rng(0))
    assert curve.failed_at is not None
    assert len(curve.steps) < 2


def test_curve_csv_roundtrip(tmp_path):
    curve = RelearnCurve([50, 100], [1.5, 2.5], [3.0, 2.0], [1.0, 1.1], [0.01, 0.02], eval_seed=7)
    atk.write_curve_csv(tmp_path / "c.csv", curve)
    loaded = atk.read_curve_csv(tmp_path / "c.csv", eval_seed=7)
    assert loaded.steps == curve.steps
    assert loaded.forget_score == curve.forget_score
    assert loaded.retain_mmd == curve.retain_mmd


# ---------------------------------------------------------------------------
# Curve comparison
# ---------------------------------------------------------------------------


def _curve(scores, l_forget=None, l_retain=None, steps=(50, 100), seed=7):
    n = len(scores)
    return RelearnCurve(
        list(steps)[:n],
        list(scores),
        list(l_forget or [3.0] * n),
        list(l_retain or [1.0] * n),
        [0.01] * n,
        eval_seed=seed,
    )


def test_compare_identical_curves_all_zero_deltas():
    a = _curve([10.0, 20.0])
    v = compare_runs(a, _curve([10.0, 20.0]))
    assert v.forget_score_delta == [0.0, 0.0]
    assert v.l_retain_delta == [0.0, 0.0]
    assert v.verdict_forget_dominance  # <= holds with equality
    assert v.verdict_benign_band


def test_compare_dominance_fixture():
    unlearn = _curve([30.0, 50.0])
    meta = _curve([10.0, 20.0])
    v = compare_runs(unlearn, meta)
    assert v.verdict_forget_dominance and v.forget_dominance_count == 2


def test_compare_self_destruct_crossing():
    bands = CompareBands(self_destruct_threshold=2.0, benign_band=15.0)
    unlearn = _curve([30.0, 50.0], l_forget=[2.5, 1.5], l_retain=[1.0, 1.2])
    meta = _curve([10.0, 20.0], l_forget=[2.4, 1.8], l_retain=[2.0, 2.5])
    v = compare_runs(unlearn, meta, bands)
    assert v.crossing_step_unlearn == 100 and v.crossing_step_meta == 100
    assert v.verdict_self_destruct is True


def test_compare_self_destruct_none_when_no_crossing():
    bands = CompareBands(self_destruct_threshold=0.5)
    v = compare_runs(_curve([1.0, 2.0]), _curve([1.0, 2.0]), bands)
    assert v.verdict_self_destruct is None


def test_compare_rejects_schedule_mismatch():
    a = _curve([1.0, 2.0], steps=(50, 100))
    b = _curve([1.0, 2.0, 3.0], steps=(50, 100, 200))
    with pytest.raises(ValueError, match="schedules"):
        compare_runs(a, b)


def test_compare_rejects_eval_seed_mismatch():
    with pytest.raises(ValueError, match="seeds"):
        compare_runs(_curve([1.0, 2.0], seed=7), _curve([1.0, 2.0], seed=8))


def test_verdict_report_serializes(tmp_path):
    v = compare_runs(_curve([30.0, 50.0]), _curve([10.0, 20.0]))
    v.save(tmp_path / "v.json")
    import json

    doc = json.loads((tmp_path / "v.json").read_text())
    assert doc["verdict_forget_dominance"] is True
    assert doc["bands"]["benign_band"] == 15.0
