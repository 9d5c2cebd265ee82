"""Independent verification oracles: finite differences and random probes.

Shared by the CLI ``verify`` subcommand and the test suite. Every oracle here
is computed without reusing the code path it checks (central differences,
finite differences of gradients, analytic objective gradients, random
perturbation probes).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Value
from .diffusion import Batch, ModelConfig, freeze_draws, init_params, loss_on_draws, make_schedule
from .unlearn import rece_embedding, rece_objective, uce_objective, uce_objective_grad, uce_solve_embeddings


def primitive_cases(rng: np.random.Generator):
    """(name, scalar function of a flat vector, input size) for each primitive."""
    a_mat = rng.standard_normal((3, 4))
    b_mat = rng.standard_normal((4, 3))

    def through(fn, shape):
        return lambda v: ad.sum_all(ad.square(fn(ad.reshape(v, shape))))

    return [
        ("add", lambda v: ad.sum_all(ad.square(ad.add(ad.reshape(v, (2, 3)), Value(a_mat[:2, :3])))), 6),
        ("add_broadcast", lambda v: ad.sum_all(ad.square(ad.add(Value(a_mat[:2, :3]), ad.reshape(v, (3,))))), 3),
        ("sub", lambda v: ad.sum_all(ad.square(ad.sub(ad.reshape(v, (2, 3)), Value(a_mat[:2, :3])))), 6),
        ("neg", through(ad.neg, (5,)), 5),
        ("mul", lambda v: ad.sum_all(ad.square(ad.mul(ad.reshape(v, (2, 3)), Value(a_mat[:2, :3])))), 6),
        ("div", lambda v: ad.sum_all(ad.square(ad.div(Value(a_mat[:2, :3]), ad.add(ad.square(ad.reshape(v, (2, 3))), 0.5)))), 6),
        ("matmul", lambda v: ad.sum_all(ad.square(ad.matmul(ad.reshape(v, (3, 4)), Value(b_mat)))), 12),
        ("transpose", through(ad.transpose, (3, 4)), 12),
        ("reshape", lambda v: ad.sum_all(ad.square(ad.reshape(ad.reshape(v, (2, 6)), (3, 4)))), 12),
        ("broadcast", lambda v: ad.sum_all(ad.square(ad.broadcast_to(ad.reshape(v, (1, 4)), (3, 4)))), 4),
        ("sum_axes", lambda v: ad.sum_all(ad.square(ad.sum_axes(ad.reshape(v, (3, 4)), 1, keepdims=True))), 12),
        ("mean", lambda v: ad.square(ad.mean_all(ad.square(v))), 7),
        ("square", through(ad.square, (5,)), 5),
        ("sqrt", lambda v: ad.sum_all(ad.sqrt(ad.add(ad.square(v), 0.3))), 5),
        ("exp", lambda v: ad.sum_all(ad.exp(ad.mul(v, 0.5))), 5),
        ("sin", through(ad.sin, (5,)), 5),
        ("cos", through(ad.cos, (5,)), 5),
        ("sigmoid", through(ad.sigmoid, (5,)), 5),
        ("silu", through(ad.silu, (5,)), 5),
        ("relu", lambda v: ad.sum_all(ad.square(ad.relu(ad.add(v, 0.05)))), 5),
        ("softmax", lambda v: ad.sum_all(ad.square(ad.softmax(ad.reshape(v, (2, 4)), axis=1))), 8),
        ("concat", lambda v: ad.sum_all(ad.square(ad.concat([ad.reshape(v, (2, 3)), Value(a_mat[:2, :3])], axis=1))), 6),
        ("take", lambda v: ad.sum_all(ad.square(ad.take(ad.reshape(v, (3, 4)), (slice(0, 2), slice(1, 3))))), 12),
    ]


def check_primitives(draws: int, tol: float, seed: int = 0) -> list[tuple[str, float, bool]]:
    """Central-difference check for every primitive over random inputs.

    Returns (name, worst deviation, passed) per primitive; ``draws`` random
    inputs per primitive in total (split across the case list).
    """
    rng = np.random.default_rng(seed)
    cases = primitive_cases(rng)
    per_case = max(1, draws // len(cases))
    results = []
    for name, fn, size in cases:
        worst = 0.0
        for _ in range(per_case):
            theta = rng.standard_normal(size)
            rep = ad.fd_check(fn, theta, tol)
            worst = max(worst, rep.max_rel_error)
        results.append((name, worst, worst < tol))
    return results


def small_model_setup(seed: int = 0, batch: int = 6):
    """A tiny (< 200 parameter) model plus one frozen minibatch."""
    cfg = ModelConfig(data_dim=2, hidden=6, time_dim=4, embed_dim=3, tokens=2)
    sched = make_schedule(10, 1e-3, 0.05)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    x = rng.standard_normal((batch, cfg.data_dim)) + 1.0
    cond = rng.standard_normal((batch, cfg.tokens, cfg.embed_dim))
    frozen = freeze_draws(Batch(x, cond), sched, rng)
    return cfg, params, frozen


def check_dm_loss_gradient(tol: float = 1e-4, seed: int = 0) -> ad.FdReport:
    """fd_check of the full diffusion training loss on a frozen minibatch."""
    cfg, params, frozen = small_model_setup(seed)
    return ad.fd_check(lambda v: loss_on_draws(v, cfg, frozen), params.flat, tol)


def dense_hessian_fd(f_grad, theta: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Hessian columns by central differences of a gradient function."""
    n = theta.size
    out = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        out[:, i] = (f_grad(theta + e) - f_grad(theta - e)) / (2.0 * h)
    return out


def check_hvp_against_fd(tol: float = 1e-3, seed: int = 0) -> tuple[float, bool]:
    """HVP columns (v = e_i) versus finite differences of gradients."""
    cfg, params, frozen = small_model_setup(seed)
    theta = params.flat
    n = theta.size

    def analytic_grad(t):
        with Tape() as tape:
            v = Value(t)
            loss = loss_on_draws(v, cfg, frozen)
        return ad.grad(tape, loss, [v])[0].data

    h_fd = dense_hessian_fd(analytic_grad, theta)

    h_an = np.empty((n, n))
    with Tape(higher_order=True) as tape:
        v = Value(theta)
        loss = loss_on_draws(v, cfg, frozen)
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        h_an[:, i] = ad.hvp(tape, loss, v, e).data

    scale = max(np.abs(h_fd).max(), np.abs(h_an).max(), 1e-12)
    dev = float(np.abs(h_an - h_fd).max() / scale)
    return dev, dev < tol


def check_closed_form_optimality(
    instances: int, probes: int = 0, grad_tol: float = 1e-8, seed: int = 0, k: int = 8
) -> tuple[float, float, bool]:
    """Random edit instances: analytic objective gradient norm at the solution,
    plus (optionally) random local probes that must never beat the solution.

    Returns (worst gradient norm, worst probe improvement, passed).
    """
    rng = np.random.default_rng(seed)
    worst_grad = 0.0
    worst_probe = 0.0
    for _ in range(instances):
        w_star = rng.standard_normal((k, k))
        null = np.zeros(k)
        f_embs = [rng.standard_normal(k) for _ in range(rng.integers(1, 3))]
        r_embs = [rng.standard_normal(k) for _ in range(rng.integers(1, 4))]
        lam1 = float(rng.uniform(0.1, 1.0))
        lam2 = float(rng.uniform(1e-3, 0.1))
        solved = uce_solve_embeddings({"w": w_star}, null, f_embs, r_embs, lam1, lam2)["w"]
        g = uce_objective_grad(solved, w_star, null, f_embs, r_embs, lam1, lam2)
        worst_grad = max(worst_grad, float(np.linalg.norm(g)))
        if probes:
            base = uce_objective(solved, w_star, null, f_embs, r_embs, lam1, lam2)
            # vectorized probe sweep over a few perturbation scales
            for scale in (1e-4, 1e-3, 1e-2):
                pert = solved[None, :, :] + scale * rng.standard_normal((probes // 3, k, k))
                vals = _uce_objective_batch(pert, w_star, null, f_embs, r_embs, lam1, lam2)
                worst_probe = max(worst_probe, float((base - vals.min())))
    return worst_grad, worst_probe, worst_grad < grad_tol and worst_probe <= 0.0


def _uce_objective_batch(w_batch, w_star, null_emb, forget_embs, retain_embs, lam1, lam2):
    vals = lam2 * np.sum((w_batch - w_star[None]) ** 2, axis=(1, 2))
    target = w_star @ null_emb
    for e in forget_embs:
        vals += np.sum((w_batch @ e - target[None]) ** 2, axis=1)
    for e in retain_embs:
        vals += lam1 * np.sum((w_batch @ e - (w_star @ e)[None]) ** 2, axis=1)
    return vals


def check_erasing_embedding_optimality(
    instances: int, grad_tol: float = 1e-8, seed: int = 0, k: int = 8
) -> tuple[float, bool]:
    """Ridge objective gradient norm at the reconstructed embedding."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n_mats = int(rng.integers(1, 4))
        w_tilde = [rng.standard_normal((k, k)) for _ in range(n_mats)]
        w_star = [rng.standard_normal((k, k)) for _ in range(n_mats)]
        e_f = rng.standard_normal(k)
        lam = float(rng.uniform(0.01, 1.0))
        e = rece_embedding(w_tilde, w_star, e_f, lam)
        g = 2.0 * lam * e
        for wt, ws in zip(w_tilde, w_star):
            g = g + 2.0 * wt.T @ (wt @ e - ws @ e_f)
        worst = max(worst, float(np.linalg.norm(g)))
    return worst, worst < grad_tol


def check_erasing_embedding_probes(instances: int, probes: int, seed: int = 0, k: int = 8) -> tuple[float, bool]:
    """Random probes around the reconstructed embedding must not improve the objective."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        w_tilde = [rng.standard_normal((k, k)) for _ in range(2)]
        w_star = [rng.standard_normal((k, k)) for _ in range(2)]
        e_f = rng.standard_normal(k)
        lam = float(rng.uniform(0.01, 1.0))
        e = rece_embedding(w_tilde, w_star, e_f, lam)
        base = rece_objective(w_tilde, w_star, e_f, lam, e)
        for scale in (1e-4, 1e-3, 1e-2):
            for _ in range(probes // 3):
                cand = e + scale * rng.standard_normal(k)
                worst = max(worst, base - rece_objective(w_tilde, w_star, e_f, lam, cand))
    return worst, worst <= 0.0
