"""Bilevel meta-unlearning outer loop.

Each outer step combines the unlearning gradient with the gradient of a meta
objective evaluated after simulating an attacker's finetune step on the
forget data. Two routes for the meta gradient:

* ``exact`` — differentiate through the M-step inner unroll (second order,
  back-propagating through the inner gradients);
* ``first_order`` — the Taylor surrogate: a finetuning-loss term, a
  gradient-norm penalty, and a forget/retain gradient inner-product penalty,
  accurate to O(tau^2) with effective step size M*tau.

Within one outer step, the timestep/noise draws are frozen and shared across
the inner unroll and the matched meta-loss terms (variance control; also what
makes finite-difference verification possible).
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericsError, Tape, Value
from .concepts import ConceptTable, DatasetBundle
from .diffusion import DenoiserParams, FrozenDraws, ModelConfig, NoiseSchedule, freeze_draws, loss_on_draws
from .unlearn import (
    CLOSED_FORM_METHODS,
    GRADIENT_METHODS,
    SDD,
    ParamMask,
    UnlearnConfig,
    ema_update,
    prepare_xt_pool,
    sample_batch,
    unlearn_gradient,
)

RECORD_COLUMNS = ("step", "l_unlearn", "l_meta", "grad_norm_sq_ft", "inner_product_norm", "wall_ms")

MODES = ("exact", "first_order")


@dataclass(frozen=True)
class MetaConfig:
    """Hyperparameter surface of the meta-unlearning outer loop."""

    outer_steps: int = 1000  # N
    inner_steps: int = 1  # M
    inner_lr: float = 1e-3  # tau
    outer_lr: float = 1e-2  # omega
    gamma1: float = 1.0
    gamma2: float = 0.1
    zeta: float = 1.0
    ft_batch: int = 16
    retain_batch: int = 32
    mode: str = "exact"
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    two_stage: bool | None = None  # None: derived from the unlearning method
    drop_ft_loss_term: bool = False  # debug switch for the finetune-loss term of the meta objective
    meta_mask: str | None = None  # optional segment mask applied to the meta update

    def __post_init__(self):
        if self.outer_steps < 1 or self.inner_steps < 1:
            raise ValueError("outer_steps and inner_steps must be >= 1")
        if self.inner_lr < 0 or self.outer_lr <= 0:
            raise ValueError("inner_lr must be >= 0 and outer_lr > 0")
        if self.gamma1 < 0 or self.gamma2 < 0 or self.zeta < 0:
            raise ValueError("gamma1, gamma2 and zeta must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.drop_ft_loss_term and self.zeta == 0:
            raise ValueError("dropping the finetune-loss term with zeta=0 leaves an empty meta objective")

    def is_two_stage(self) -> bool:
        if self.two_stage is not None:
            return self.two_stage
        return self.unlearn.method in CLOSED_FORM_METHODS


@dataclass(frozen=True)
class MetaStepRecord:
    step: int
    l_unlearn: float
    l_meta: float
    grad_norm_sq_ft: float
    inner_product_norm: float  # cosine of the forget/retain gradients (normalized)
    wall_ms: float

    def __post_init__(self):
        for name in ("l_unlearn", "l_meta", "grad_norm_sq_ft", "inner_product_norm", "wall_ms"):
            if not math.isfinite(getattr(self, name)):
                raise NumericsError(f"non-finite record field {name}")


def write_records_csv(path, records: list[MetaStepRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_COLUMNS)
        for r in records:
            writer.writerow(
                [r.step, repr(r.l_unlearn), repr(r.l_meta), repr(r.grad_norm_sq_ft), repr(r.inner_product_norm), repr(r.wall_ms)]
            )


def read_records_csv(path) -> list[MetaStepRecord]:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    return [
        MetaStepRecord(
            int(r["step"]),
            float(r["l_unlearn"]),
            float(r["l_meta"]),
            float(r["grad_norm_sq_ft"]),
            float(r["inner_product_norm"]),
            float(r["wall_ms"]),
        )
        for r in rows
    ]


# ---------------------------------------------------------------------------
# Inner unroll and meta objective
# ---------------------------------------------------------------------------


def inner_finetune(theta: Value, loss_fn, inner_steps: int, inner_lr: float, tape: Tape) -> Value:
    """M plain gradient steps on ``loss_fn``: theta <- theta - tau * grad.

    Run under a ``higher_order`` tape, the returned parameters stay
    differentiable with respect to ``theta`` through both the direct path and
    the inner gradients (that tape is the differentiable link). Loss
    evaluations reuse whatever draws ``loss_fn`` has frozen, across the whole
    unroll.
    """
    if inner_steps < 1:
        raise ValueError("inner_steps must be >= 1")
    th = theta
    for m in range(inner_steps):
        try:
            loss = loss_fn(th)
            (g,) = ad.grad(tape, loss, [th])
            th = ad.sub(th, ad.mul(g, inner_lr))
        except NumericsError as err:
            raise NumericsError(f"inner unroll diverged at step {m}: {err}") from err
    return th


def meta_objective(
    theta_ft: Value,
    theta: Value,
    ft_loss_fn,
    retain_loss_fn,
    zeta: float,
    drop_ft_loss_term: bool = False,
) -> Value:
    """-L_ft(theta_ft) - zeta * [L_retain(theta_ft) - L_retain(theta)].

    Both bracketed terms evaluate the same ``retain_loss_fn`` (matched frozen
    draws); the first term shares ``ft_loss_fn`` with the inner unroll.
    """
    out = None
    if not drop_ft_loss_term:
        out = ad.neg(ft_loss_fn(theta_ft))
    if zeta != 0.0:
        bracket = ad.sub(retain_loss_fn(theta_ft), retain_loss_fn(theta))
        term = ad.mul(bracket, -zeta)
        out = term if out is None else ad.add(out, term)
    if out is None:
        raise ValueError("meta objective has no active terms")
    return out


def meta_loss(
    theta_ft: Value,
    theta: Value,
    cfg: ModelConfig,
    ft_frozen: FrozenDraws,
    retain_frozen: FrozenDraws,
    zeta: float,
    drop_ft_loss_term: bool = False,
) -> Value:
    """The meta objective over frozen diffusion-loss draws."""
    return meta_objective(
        theta_ft,
        theta,
        lambda th: loss_on_draws(th, cfg, ft_frozen),
        lambda th: loss_on_draws(th, cfg, retain_frozen),
        zeta,
        drop_ft_loss_term,
    )


def meta_grad_exact(
    theta_flat: np.ndarray,
    cfg: ModelConfig,
    ft_frozen: FrozenDraws,
    retain_frozen: FrozenDraws,
    mcfg: MetaConfig,
) -> tuple[np.ndarray, float]:
    """Gradient of the meta objective through the inner unroll (second order)."""
    # At inner_lr=0 the unroll is the identity and the retain bracket is
    # identically zero as a function of theta; dropping it keeps the collapsed
    # gradient exactly equal to -grad L_ft (no cancellation rounding).
    zeta = mcfg.zeta if mcfg.inner_lr != 0.0 else 0.0
    with Tape(higher_order=True) as tape:
        th = Value(theta_flat)
        th_ft = inner_finetune(th, lambda t: loss_on_draws(t, cfg, ft_frozen), mcfg.inner_steps, mcfg.inner_lr, tape)
        lmeta = meta_loss(th_ft, th, cfg, ft_frozen, retain_frozen, zeta, mcfg.drop_ft_loss_term)
    (g,) = ad.grad(tape, lmeta, [th])
    return g.data, float(lmeta.data)


def surrogate_grad(
    theta_flat: np.ndarray,
    cfg: ModelConfig,
    ft_frozen: FrozenDraws,
    retain_frozen: FrozenDraws,
    weights: tuple[float, float, float],
) -> tuple[np.ndarray, float]:
    """Gradient of w0*(-L_ft) + w1*||grad L_ft||^2 + w2*(grad L_ft · grad L_ret).

    Zero-weight terms are skipped entirely, so degenerate weight choices
    collapse to exact sub-objectives. The penalty terms require
    Hessian-vector products, supplied by double backward.
    """
    w_neg, w_gn, w_ip = weights
    with Tape(higher_order=True) as tape:
        th = Value(theta_flat)
        terms = []
        l_ft = loss_on_draws(th, cfg, ft_frozen)
        if w_neg != 0.0:
            terms.append(ad.mul(ad.neg(l_ft), w_neg))
        if w_gn != 0.0 or w_ip != 0.0:
            (g_ft,) = ad.grad(tape, l_ft, [th])
            if w_gn != 0.0:
                terms.append(ad.mul(ad.sum_all(ad.square(g_ft)), w_gn))
            if w_ip != 0.0:
                l_ret = loss_on_draws(th, cfg, retain_frozen)
                (g_ret,) = ad.grad(tape, l_ret, [th])
                terms.append(ad.mul(ad.sum_all(ad.mul(g_ft, g_ret)), w_ip))
        if not terms:
            raise ValueError("surrogate objective has no active terms")
        surr = terms[0]
        for t in terms[1:]:
            surr = ad.add(surr, t)
    (g,) = ad.grad(tape, surr, [th])
    return g.data, float(surr.data)


def meta_grad_first_order(
    theta_flat: np.ndarray,
    cfg: ModelConfig,
    ft_frozen: FrozenDraws,
    retain_frozen: FrozenDraws,
    mcfg: MetaConfig,
) -> tuple[np.ndarray, float]:
    """Gradient of the first-order surrogate with effective step M*tau."""
    tau_eff = mcfg.inner_steps * mcfg.inner_lr
    w_neg = 0.0 if mcfg.drop_ft_loss_term else 1.0
    return surrogate_grad(theta_flat, cfg, ft_frozen, retain_frozen, (w_neg, tau_eff, tau_eff * mcfg.zeta))


# ---------------------------------------------------------------------------
# Loss values for the approximation-order study
# ---------------------------------------------------------------------------


def meta_loss_exact_value(
    theta_flat: np.ndarray,
    cfg: ModelConfig,
    ft_frozen: FrozenDraws,
    retain_frozen: FrozenDraws,
    inner_steps: int,
    inner_lr: float,
    zeta: float,
) -> float:
    """Meta-objective value after an actual M-step inner unroll (frozen draws)."""
    with Tape() as tape:
        th = Value(theta_flat)
        th_ft = inner_finetune(th, lambda t: loss_on_draws(t, cfg, ft_frozen), inner_steps, inner_lr, tape)
        lmeta = meta_loss(th_ft, th, cfg, ft_frozen, retain_frozen, zeta)
    return float(lmeta.data)


def meta_loss_surrogate_value(
    theta_flat: np.ndarray,
    cfg: ModelConfig,
    ft_frozen: FrozenDraws,
    retain_frozen: FrozenDraws,
    inner_steps: int,
    inner_lr: float,
    zeta: float,
) -> float:
    """First-order surrogate value at effective step M*tau (frozen draws)."""
    tau_eff = inner_steps * inner_lr
    with Tape(higher_order=True) as tape:
        th = Value(theta_flat)
        l_ft = loss_on_draws(th, cfg, ft_frozen)
        (g_ft,) = ad.grad(tape, l_ft, [th])
        l_ret = loss_on_draws(th, cfg, retain_frozen)
        (g_ret,) = ad.grad(tape, l_ret, [th])
    gf, gr = g_ft.data, g_ret.data
    return float(-l_ft.data + tau_eff * (gf @ gf) + tau_eff * zeta * (gf @ gr))


def forget_retain_gradients(
    theta_flat: np.ndarray,
    cfg: ModelConfig,
    ft_frozen: FrozenDraws,
    retain_frozen: FrozenDraws,
) -> tuple[np.ndarray, np.ndarray]:
    """Plain gradients of the diffusion loss on the two frozen draw sets."""
    with Tape() as tape:
        th = Value(theta_flat)
        l_ft = loss_on_draws(th, cfg, ft_frozen)
        l_ret = loss_on_draws(th, cfg, retain_frozen)
    (g_ft,) = ad.grad(tape, l_ft, [th])
    (g_ret,) = ad.grad(tape, l_ret, [th])
    return g_ft.data, g_ret.data


def gradient_cosine(g_a: np.ndarray, g_b: np.ndarray) -> float:
    na, nb = np.linalg.norm(g_a), np.linalg.norm(g_b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(g_a @ g_b / (na * nb))


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------


def meta_unlearn(
    theta_init: DenoiserParams,
    mcfg: MetaConfig,
    bundle: DatasetBundle,
    table: ConceptTable,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> tuple[DenoiserParams, list[MetaStepRecord]]:
    """Run N outer steps and return the final parameters plus per-step records.

    For gradient-based unlearning methods, ``theta_init`` is the pretrained
    snapshot and the unlearning gradient shares the main random stream with
    the standalone unlearning loop (so disabling the meta term reproduces it
    bit for bit). For closed-form methods (two-stage), ``theta_init`` must be
    the closed-form edited snapshot and the unlearning-gradient line is
    skipped. The meta term uses an independently spawned stream.

    The tracked inner-product column is the cosine of the forget/retain
    gradients (normalized); the optimization itself uses unnormalized terms.
    """
    two_stage = mcfg.is_two_stage()
    ucfg = mcfg.unlearn
    if not two_stage and ucfg.method not in GRADIENT_METHODS:
        raise ValueError(f"non-two-stage runs need a gradient-based method, got {ucfg.method!r}")

    rng_meta = rng.spawn(1)[0]
    cfg = theta_init.cfg
    theta = theta_init.copy()
    theta_star = theta_init.copy()
    teacher = theta_init.flat.copy() if (not two_stage and ucfg.method == SDD) else None
    forget_split = bundle.forget
    if not two_stage and ucfg.xt_from_model:
        forget_split = prepare_xt_pool(theta_star, bundle, table, sched, ucfg.xt_pool_size, rng)
    meta_mask = ParamMask.variant(mcfg.meta_mask).as_array(cfg) if mcfg.meta_mask else None

    records: list[MetaStepRecord] = []
    grad_fn = meta_grad_exact if mcfg.mode == "exact" else meta_grad_first_order
    for n in range(mcfg.outer_steps):
        t0 = time.perf_counter()
        try:
            g_total = np.zeros_like(theta.flat)
            l_un = 0.0
            if not two_stage:
                l_un, g_un = unlearn_gradient(
                    theta.flat, ucfg, cfg, sched, theta_star, teacher, forget_split, bundle, table, rng
                )
                g_total = g_total + mcfg.gamma1 * g_un

            l_meta = 0.0
            grad_norm_sq = 0.0
            cosine = 0.0
            if mcfg.gamma2 > 0.0:
                ft_batch = sample_batch(bundle.forget, mcfg.ft_batch, table, cfg.tokens, rng_meta)
                ft_frozen = freeze_draws(ft_batch, sched, rng_meta)
                ret_batch = sample_batch(bundle.retain, mcfg.retain_batch, table, cfg.tokens, rng_meta)
                ret_frozen = freeze_draws(ret_batch, sched, rng_meta)
                g_meta, l_meta = grad_fn(theta.flat, cfg, ft_frozen, ret_frozen, mcfg)
                if meta_mask is not None:
                    g_meta = g_meta * meta_mask
                g_total = g_total + mcfg.gamma2 * g_meta
                g_ft, g_ret = forget_retain_gradients(theta.flat, cfg, ft_frozen, ret_frozen)
                grad_norm_sq = float(g_ft @ g_ft)
                cosine = gradient_cosine(g_ft, g_ret)

            theta.flat = theta.flat - mcfg.outer_lr * g_total
            if not np.isfinite(theta.flat).all():
                raise NumericsError("parameter update produced non-finite values")
            if teacher is not None:
                teacher = ema_update(teacher, theta.flat, ucfg.ema)
        except NumericsError as err:
            failure = NumericsError(f"meta-unlearning aborted at outer step {n}: {err}")
            failure.records = records  # full record dump for the caller
            raise failure from err

        records.append(
            MetaStepRecord(n, l_un, l_meta, grad_norm_sq, cosine, (time.perf_counter() - t0) * 1e3)
        )
    return theta, records
