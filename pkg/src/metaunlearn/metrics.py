"""Evaluation metrics: concept scores, kernel two-sample distance, alignment trend."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .concepts import ConceptTable, ROLE_FORGET, ROLE_RELATED, classify
from .diffusion import DenoiserParams, NoiseSchedule, sample

REPORT_SCHEMA = "metaunlearn/metric-report"


def concept_score(
    params: DenoiserParams,
    table: ConceptTable,
    name: str,
    sched: NoiseSchedule,
    n: int,
    seed: int,
) -> float:
    """Percentage of ``name``-conditioned samples whose nearest center is ``name``."""
    rng = np.random.default_rng(seed)
    cond = table.condition_tokens(name, params.cfg.tokens)
    xs = sample(params, cond, sched, rng, n)
    labels = classify(table, xs)
    return 100.0 * sum(1 for lbl in labels if lbl == name) / n


def forget_score(params: DenoiserParams, table: ConceptTable, sched: NoiseSchedule, n: int, seed: int) -> float:
    """Toy analog of a harmful-content detector score (higher = more relearned)."""
    if n < 100:
        raise ValueError("forget_score needs n >= 100")
    return concept_score(params, table, table.forget_name, sched, n, seed)


def related_score(params: DenoiserParams, table: ConceptTable, sched: NoiseSchedule, n: int, seed: int) -> float:
    """Fraction (%) of related-retain-conditioned samples classified as that concept."""
    (name,) = table.names(ROLE_RELATED)
    return concept_score(params, table, name, sched, n, seed)


# ---------------------------------------------------------------------------
# Maximum mean discrepancy
# ---------------------------------------------------------------------------


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    return np.maximum(aa + bb - 2.0 * (a @ b.T), 0.0)


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    """Median pairwise distance of the pooled sample (scale-free heuristic)."""
    z = np.concatenate([x, y])
    d = np.sqrt(_sq_dists(z, z))
    off = d[np.triu_indices(len(z), k=1)]
    med = float(np.median(off))
    return med if med > 0 else 1.0


def mmd2_unbiased(x: np.ndarray, y: np.ndarray, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with Gaussian kernel exp(-||a-b||^2 / (2 h^2)).

    The unbiased estimator can dip slightly below zero; values are reported
    raw (clamp only in display).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ValueError("unbiased MMD needs at least 2 samples per set")
    h = median_bandwidth(x, y) if bandwidth is None else float(bandwidth)
    kxx = np.exp(-_sq_dists(x, x) / (2.0 * h * h))
    kyy = np.exp(-_sq_dists(y, y) / (2.0 * h * h))
    kxy = np.exp(-_sq_dists(x, y) / (2.0 * h * h))
    a = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    b = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    c = kxy.mean()
    return float(a + b - 2.0 * c)


def retain_mmd(
    params: DenoiserParams,
    table: ConceptTable,
    concept: str,
    sched: NoiseSchedule,
    n: int,
    seed: int,
) -> float:
    """Unbiased MMD^2 between model samples conditioned on a retained concept
    and fresh ground-truth draws from its distribution."""
    c = table[concept]
    if c.role == ROLE_FORGET:
        raise ValueError(f"{concept!r} is the forget concept, not a retained one")
    if n < 2:
        raise ValueError("retain_mmd needs n >= 2")
    rng = np.random.default_rng(seed)
    cond = table.condition_tokens(concept, params.cfg.tokens)
    model_x = sample(params, cond, sched, rng, n)
    truth_x = c.center + c.spread * rng.standard_normal((n, c.center.shape[0]))
    return mmd2_unbiased(model_x, truth_x)


# ---------------------------------------------------------------------------
# Gradient-alignment trend
# ---------------------------------------------------------------------------


def alignment_series(records) -> tuple[float, float]:
    """Ordinary least squares of the tracked inner-product term against step index.

    Returns (slope, intercept); the regression line smooths a noisy series.
    """
    if len(records) < 2:
        raise ValueError("alignment_series needs at least 2 records")
    steps = np.array([r.step for r in records], dtype=np.float64)
    vals = np.array([r.inner_product_norm for r in records], dtype=np.float64)
    slope, intercept = np.polyfit(steps, vals, 1)
    return float(slope), float(intercept)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    forget_score: float  # percentage in [0, 100]
    retain_mmd: dict  # concept name -> raw unbiased MMD^2
    related_score: float
    alignment: tuple[float, float] | None  # (slope, intercept) when records exist

    def __post_init__(self):
        if not (0.0 <= self.forget_score <= 100.0):
            raise ValueError("forget_score must lie in [0, 100]")
        if not (0.0 <= self.related_score <= 100.0):
            raise ValueError("related_score must lie in [0, 100]")

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "version": 1,
            "forget_score": self.forget_score,
            "retain_mmd": {k: float(v) for k, v in self.retain_mmd.items()},
            "related_score": self.related_score,
            "alignment": None if self.alignment is None else {"slope": self.alignment[0], "intercept": self.alignment[1]},
        }


def build_metric_report(
    params: DenoiserParams,
    table: ConceptTable,
    sched: NoiseSchedule,
    n: int,
    seed: int,
    records=None,
) -> MetricReport:
    mmds = {name: retain_mmd(params, table, name, sched, n, seed) for name in table.retain_names()}
    alignment = alignment_series(records) if records else None
    return MetricReport(
        forget_score=forget_score(params, table, sched, n, seed),
        retain_mmd=mmds,
        related_score=related_score(params, table, sched, n, seed),
        alignment=alignment,
    )


def save_metric_report(path, report: MetricReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=1))
