"""Baseline concept-unlearning methods.

Two gradient methods (negative-guidance finetuning and self-distillation with
an EMA teacher, parameter-masked per variant) and two closed-form attention
edits (ridge-regularized least-squares editing of the Key/Value matrices, and
its iterative refinement through reconstructed erasing embeddings).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NumericsError, Value
from .concepts import ConceptTable, DatasetBundle, LabeledSet
from .diffusion import (
    Batch,
    DenoiserParams,
    FrozenDraws,
    ModelConfig,
    NoiseSchedule,
    CROSS_ATTENTION_SEGMENTS,
    SEGMENT_NAMES,
    freeze_draws,
    layout_for,
    loss_on_draws,
    predict_noise,
    predict_noise_value,
    sample,
)
from .optim import make_optimizer

ESD = "esd"
SDD = "sdd"
UCE = "uce"
RECE = "rece"
METHODS = (ESD, SDD, UCE, RECE)
GRADIENT_METHODS = (ESD, SDD)
CLOSED_FORM_METHODS = (UCE, RECE)

EDITED_MATRICES = ("w_k", "w_v")  # closed-form edits target the Key/Value matrices

MASK_VARIANTS = ("x", "u", "f")


@dataclass(frozen=True)
class ParamMask:
    """Per-segment inclusion; excluded segments get their gradients zeroed."""

    include: frozenset

    def __post_init__(self):
        unknown = set(self.include) - set(SEGMENT_NAMES)
        if unknown:
            raise ValueError(f"unknown segments in mask: {sorted(unknown)}")
        if not self.include:
            raise ValueError("mask must include at least one segment")

    @classmethod
    def variant(cls, name: str) -> "ParamMask":
        """'x': cross-attention only; 'u': everything but cross-attention; 'f': full."""
        if name == "x":
            return cls(frozenset(CROSS_ATTENTION_SEGMENTS))
        if name == "u":
            return cls(frozenset(set(SEGMENT_NAMES) - set(CROSS_ATTENTION_SEGMENTS)))
        if name == "f":
            return cls(frozenset(SEGMENT_NAMES))
        raise ValueError(f"unknown mask variant {name!r} (expected one of {MASK_VARIANTS})")

    def as_array(self, cfg: ModelConfig) -> np.ndarray:
        layout = layout_for(cfg)
        out = np.zeros(layout.size)
        for seg in self.include:
            out[layout.segments[seg]] = 1.0
        return out


@dataclass(frozen=True)
class UnlearnConfig:
    method: str = ESD
    eta: float = 1.0  # guidance scale for the negative-guidance target
    mask: str = "u"
    steps: int = 1000
    lr: float = 1e-2
    batch: int = 16
    optimizer: str = "sgd"
    ema: float = 0.999  # teacher decay for self-distillation
    lam: float = 0.0  # optional retain-loss trade-off weight
    lam1: float = 0.5  # closed-form edit: retain-preservation weight
    lam2: float = 1e-2  # closed-form edit: ridge weight
    rece_lam: float = 0.1
    rece_iters: int = 3
    xt_from_model: bool = False
    xt_pool_size: int = 512

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r} (expected one of {METHODS})")
        if self.method == ESD and self.eta <= 0:
            raise ValueError("eta must be > 0 for the guidance-based method")
        if not (0.0 <= self.ema < 1.0):
            raise ValueError("ema decay must lie in [0, 1)")
        if self.method in CLOSED_FORM_METHODS and self.lam2 <= 0:
            raise ValueError("lam2 must be > 0 for closed-form edits (invertibility)")
        if self.mask not in MASK_VARIANTS:
            raise ValueError(f"unknown mask variant {self.mask!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.rece_iters < 1:
            raise ValueError("rece_iters must be >= 1")

    def param_mask(self) -> ParamMask:
        return ParamMask.variant(self.mask)


# ---------------------------------------------------------------------------
# Negative-guidance (ESD-style) loss
# ---------------------------------------------------------------------------


def esd_target(eps_c: np.ndarray, eps_null: np.ndarray, eta: float) -> np.ndarray:
    """Steering target eps_null - eta * (eps_c - eps_null), a constant (no gradient)."""
    eps_c = np.asarray(eps_c, dtype=np.float64)
    eps_null = np.asarray(eps_null, dtype=np.float64)
    if eps_c.shape != eps_null.shape:
        raise ValueError("prediction shapes must match")
    return eps_null - eta * (eps_c - eps_null)


def esd_targets_for(theta_star: DenoiserParams, frozen: FrozenDraws, eta: float) -> np.ndarray:
    """Evaluate the steering target from the frozen pretrained model."""
    cfg = theta_star.cfg
    eps_c = predict_noise(theta_star, frozen.x_t, frozen.t, frozen.cond)
    eps_null = predict_noise(theta_star, frozen.x_t, frozen.t, np.zeros_like(frozen.cond))
    return esd_target(eps_c, eps_null, eta)


def esd_loss_on_draws(theta: Value, cfg: ModelConfig, frozen: FrozenDraws, targets: np.ndarray) -> Value:
    pred = predict_noise_value(theta, cfg, frozen.x_t, frozen.t, frozen.cond)
    n = frozen.x_t.shape[0]
    return ad.mul(ad.sum_all(ad.square(ad.sub(pred, Value(targets)))), 1.0 / n)


def esd_loss(
    theta: DenoiserParams,
    theta_star: DenoiserParams,
    batch: Batch,
    eta: float,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> float:
    if len(batch) == 0:
        raise ValueError("empty batch")
    frozen = freeze_draws(batch, sched, rng)
    targets = esd_targets_for(theta_star, frozen, eta)
    with ad.no_recording():
        return float(esd_loss_on_draws(Value(theta.flat), theta.cfg, frozen, targets).data)


# ---------------------------------------------------------------------------
# Self-distillation (SDD-style) loss
# ---------------------------------------------------------------------------


def sdd_loss_on_draws(theta: Value, teacher: Value, cfg: ModelConfig, frozen: FrozenDraws) -> Value:
    """Match the conditional prediction to the teacher's unconditional one.

    The teacher branch goes through stop_gradient, so the gradient with
    respect to teacher parameters is exactly zero even when the teacher is a
    tracked Value.
    """
    pred = predict_noise_value(theta, cfg, frozen.x_t, frozen.t, frozen.cond)
    target = ad.stop_gradient(
        predict_noise_value(teacher, cfg, frozen.x_t, frozen.t, np.zeros_like(frozen.cond))
    )
    n = frozen.x_t.shape[0]
    return ad.mul(ad.sum_all(ad.square(ad.sub(pred, target))), 1.0 / n)


def sdd_loss(
    theta: DenoiserParams,
    teacher: DenoiserParams,
    batch: Batch,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> float:
    if len(batch) == 0:
        raise ValueError("empty batch")
    if teacher.flat.shape != theta.flat.shape:
        raise ValueError("teacher must have the same parameter shape")
    frozen = freeze_draws(batch, sched, rng)
    with ad.no_recording():
        return float(sdd_loss_on_draws(Value(theta.flat), Value(teacher.flat), theta.cfg, frozen).data)


def ema_update(teacher: np.ndarray, student: np.ndarray, mu: float) -> np.ndarray:
    """teacher' = mu * teacher + (1 - mu) * student, elementwise."""
    if not (0.0 <= mu < 1.0):
        raise ValueError("mu must lie in [0, 1)")
    return mu * np.asarray(teacher, dtype=np.float64) + (1.0 - mu) * np.asarray(student, dtype=np.float64)


# ---------------------------------------------------------------------------
# Closed-form attention edit (UCE-style)
# ---------------------------------------------------------------------------


def uce_objective(
    w: np.ndarray,
    w_star: np.ndarray,
    null_emb: np.ndarray,
    forget_embs: list[np.ndarray],
    retain_embs: list[np.ndarray],
    lam1: float,
    lam2: float,
) -> float:
    """Sum of the squared edit objectives (used as the optimality oracle)."""
    total = lam2 * float(np.sum((w - w_star) ** 2))
    for e in forget_embs:
        total += float(np.sum((w @ e - w_star @ null_emb) ** 2))
    for e in retain_embs:
        total += lam1 * float(np.sum((w @ e - w_star @ e) ** 2))
    return total


def uce_objective_grad(
    w: np.ndarray,
    w_star: np.ndarray,
    null_emb: np.ndarray,
    forget_embs: list[np.ndarray],
    retain_embs: list[np.ndarray],
    lam1: float,
    lam2: float,
) -> np.ndarray:
    g = 2.0 * lam2 * (w - w_star)
    for e in forget_embs:
        g += 2.0 * np.outer(w @ e - w_star @ null_emb, e)
    for e in retain_embs:
        g += 2.0 * lam1 * np.outer((w - w_star) @ e, e)
    return g


def uce_solve_embeddings(
    w_star: dict[str, np.ndarray],
    null_emb: np.ndarray,
    forget_embs: list[np.ndarray],
    retain_embs: list[np.ndarray],
    lam1: float,
    lam2: float,
) -> dict[str, np.ndarray]:
    """Normal-equation minimizer of the edit objective for each matrix.

    W = (sum_f W* T(null) e_fᵀ + lam1 sum_r W* e_r e_rᵀ + lam2 W*)
        (sum_f e_f e_fᵀ + lam1 sum_r e_r e_rᵀ + lam2 I)⁻¹
    """
    if lam2 <= 0:
        raise ValueError("lam2 must be > 0")
    k = null_emb.shape[0]
    a = lam2 * np.eye(k)
    for e in forget_embs:
        a += np.outer(e, e)
    for e in retain_embs:
        a += lam1 * np.outer(e, e)

    edited = {}
    for name, w in w_star.items():
        b = lam2 * w.astype(np.float64).copy()
        target = w @ null_emb
        for e in forget_embs:
            b += np.outer(target, e)
        for e in retain_embs:
            b += lam1 * np.outer(w @ e, e)
        try:
            edited[name] = np.linalg.solve(a, b.T).T
        except np.linalg.LinAlgError as err:
            raise NumericsError(f"closed-form edit solve failed for {name!r}: {err}") from err
    return edited


def _resolve_embeddings(table: ConceptTable, names) -> list[np.ndarray]:
    return [table.embedding(n) for n in names]


def uce_solve(
    w_star: dict[str, np.ndarray],
    table: ConceptTable,
    forget: list[str],
    retain: list[str],
    lam1: float,
    lam2: float,
) -> dict[str, np.ndarray]:
    return uce_solve_embeddings(
        w_star,
        table.null_embedding,
        _resolve_embeddings(table, forget),
        _resolve_embeddings(table, retain),
        lam1,
        lam2,
    )


# ---------------------------------------------------------------------------
# Iterative edit refinement (RECE-style)
# ---------------------------------------------------------------------------


def rece_embedding(
    w_tilde: list[np.ndarray],
    w_star: list[np.ndarray],
    e_f: np.ndarray,
    lam: float,
) -> np.ndarray:
    """Ridge-regression embedding that still elicits the erased output.

    Minimizes sum_i ||W̃_i e' - W*_i e_f||^2 + lam ||e'||^2, which is quadratic
    in e'; the solution is (sum W̃ᵀW̃ + lam I)⁻¹ (sum W̃ᵀ W* e_f).
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    k = e_f.shape[0]
    a = lam * np.eye(k)
    b = np.zeros(k)
    for wt, ws in zip(w_tilde, w_star):
        a += wt.T @ wt
        b += wt.T @ (ws @ e_f)
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError as err:
        raise NumericsError(f"erasing-embedding solve failed: {err}") from err


def rece_objective(w_tilde: list[np.ndarray], w_star: list[np.ndarray], e_f: np.ndarray, lam: float, e: np.ndarray) -> float:
    total = lam * float(e @ e)
    for wt, ws in zip(w_tilde, w_star):
        total += float(np.sum((wt @ e - ws @ e_f) ** 2))
    return total


def rece_solve(
    w_star: dict[str, np.ndarray],
    table: ConceptTable,
    forget: list[str],
    retain: list[str],
    lam1: float,
    lam2: float,
    rece_lam: float,
    iters: int,
    trace: list | None = None,
) -> dict[str, np.ndarray]:
    """Closed-form edit, then ``iters`` rounds of: reconstruct an erasing
    embedding from the current edit and re-solve with it appended to the
    forget set (the constructed embeddings accumulate across rounds)."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    null = table.null_embedding
    retain_embs = _resolve_embeddings(table, retain)
    original = _resolve_embeddings(table, forget)
    forget_embs = list(original)
    names = sorted(w_star)
    edited = uce_solve_embeddings(w_star, null, forget_embs, retain_embs, lam1, lam2)
    for _ in range(iters):
        for e_f in original:
            e_new = rece_embedding([edited[n] for n in names], [w_star[n] for n in names], e_f, rece_lam)
            forget_embs.append(e_new)
            if trace is not None:
                trace.append(e_new)
        edited = uce_solve_embeddings(w_star, null, forget_embs, retain_embs, lam1, lam2)
    return edited


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def sample_batch(split: LabeledSet, size: int, table: ConceptTable, tokens: int, rng: np.random.Generator) -> Batch:
    """Uniform with-replacement minibatch with resolved condition embeddings."""
    idx = rng.integers(0, len(split), size=size)
    names = [split.names[i] for i in idx]
    return Batch(split.x[idx], table.embed_names(names, tokens))


def prepare_xt_pool(
    theta_star: DenoiserParams,
    bundle: DatasetBundle,
    table: ConceptTable,
    sched: NoiseSchedule,
    pool_size: int,
    rng: np.random.Generator,
) -> LabeledSet:
    """Model-generated stand-in for the forget split (the original methods
    sample x from the frozen pretrained model rather than from data)."""
    name = table.forget_name
    cond = table.condition_tokens(name, theta_star.cfg.tokens)
    xs = sample(theta_star, cond, sched, rng, pool_size)
    return LabeledSet(xs, (name,) * pool_size)


def unlearn_gradient(
    theta_flat: np.ndarray,
    ucfg: UnlearnConfig,
    model_cfg: ModelConfig,
    sched: NoiseSchedule,
    theta_star: DenoiserParams,
    teacher_flat: np.ndarray | None,
    forget_split: LabeledSet,
    bundle: DatasetBundle,
    table: ConceptTable,
    rng: np.random.Generator,
) -> tuple[float, np.ndarray]:
    """One masked unlearning gradient on a fresh forget minibatch.

    Shared by the standalone unlearning loop and the meta outer loop so the
    two consume the random stream identically (the meta run with the meta
    term disabled must reproduce the standalone run bit for bit).
    """
    batch = sample_batch(forget_split, ucfg.batch, table, model_cfg.tokens, rng)
    frozen = freeze_draws(batch, sched, rng)
    if ucfg.method == ESD:
        targets = esd_targets_for(theta_star, frozen, ucfg.eta)
    retain_frozen = None
    if ucfg.lam > 0:
        retain_batch = sample_batch(bundle.retain, ucfg.batch, table, model_cfg.tokens, rng)
        retain_frozen = freeze_draws(retain_batch, sched, rng)

    with ad.Tape() as tape:
        th = Value(theta_flat)
        if ucfg.method == ESD:
            loss = esd_loss_on_draws(th, model_cfg, frozen, targets)
        elif ucfg.method == SDD:
            loss = sdd_loss_on_draws(th, Value(teacher_flat), model_cfg, frozen)
        else:
            raise ValueError(f"method {ucfg.method!r} has no gradient loss")
        if retain_frozen is not None:
            loss = ad.add(loss, ad.mul(loss_on_draws(th, model_cfg, retain_frozen), ucfg.lam))
    (g,) = ad.grad(tape, loss, [th])
    masked = g.data * ucfg.param_mask().as_array(model_cfg)
    return float(loss.data), masked


def closed_form_params(
    theta_star: DenoiserParams,
    ucfg: UnlearnConfig,
    table: ConceptTable,
) -> DenoiserParams:
    """Pretrained parameters with the Key/Value matrices replaced by the edit."""
    w_star = {name: theta_star.weight_array(name) for name in EDITED_MATRICES}
    forget = [table.forget_name]
    retain = table.retain_names()
    if ucfg.method == UCE:
        edited = uce_solve(w_star, table, forget, retain, ucfg.lam1, ucfg.lam2)
    else:
        edited = rece_solve(w_star, table, forget, retain, ucfg.lam1, ucfg.lam2, ucfg.rece_lam, ucfg.rece_iters)
    out = theta_star.copy()
    layout = out.layout
    for name in EDITED_MATRICES:
        sl, shape = layout.weights[name]
        out.flat[sl] = edited[name].reshape(-1)
    return out


def run_unlearn(
    theta_star: DenoiserParams,
    ucfg: UnlearnConfig,
    bundle: DatasetBundle,
    table: ConceptTable,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> DenoiserParams:
    """Produce unlearned parameters from the pretrained snapshot."""
    if ucfg.method in CLOSED_FORM_METHODS:
        return closed_form_params(theta_star, ucfg, table)

    theta = theta_star.copy()
    teacher = theta_star.flat.copy() if ucfg.method == SDD else None
    opt = make_optimizer(ucfg.optimizer, ucfg.lr)
    forget_split = bundle.forget
    if ucfg.xt_from_model:
        forget_split = prepare_xt_pool(theta_star, bundle, table, sched, ucfg.xt_pool_size, rng)

    for step in range(ucfg.steps):
        try:
            loss, g = unlearn_gradient(
                theta.flat, ucfg, theta.cfg, sched, theta_star, teacher, forget_split, bundle, table, rng
            )
        except NumericsError as err:
            raise NumericsError(f"unlearning diverged at step {step}: {err}") from err
        theta.flat = opt.step(theta.flat, g)
        if teacher is not None:
            teacher = ema_update(teacher, theta.flat, ucfg.ema)
    return theta
