"""Pipeline stages: pretrain -> unlearn / meta-unlearn -> attack -> eval -> report.

Each stage writes its artifacts under ``out/<config-hash>/<stage>/`` and
registers them (with content addresses) in the run manifest at the output
root. A stage whose manifest entry still matches its files on disk is skipped
on rerun, so pipelines resume without recomputing upstream stages.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, CompareBands, RelearnCurve, compare_runs, read_curve_csv, run_attack, write_curve_csv
from .autodiff import NumericsError
from .concepts import (
    ConceptTable,
    DatasetBundle,
    SplitSizes,
    default_world,
    draw_split,
    load_bundle,
    load_world,
    save_bundle,
    save_world,
)
from .config import Experiment, config_hash
from .diffusion import (
    Batch,
    DenoiserParams,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .meta import meta_unlearn, read_records_csv, write_records_csv
from .metrics import alignment_series, build_metric_report, forget_score, save_metric_report
from .oracles import (
    check_closed_form_optimality,
    check_dm_loss_gradient,
    check_erasing_embedding_optimality,
    check_hvp_against_fd,
    check_primitives,
)
from .optim import make_optimizer
from .plots import plot_alignment_series, plot_relearn_curves
from .unlearn import CLOSED_FORM_METHODS, run_unlearn, sample_batch
from . import autodiff as ad
from .autodiff import Tape, Value
from .diffusion import loss_on_draws, freeze_draws


class MissingInputError(FileNotFoundError):
    """An upstream artifact required by this stage does not exist."""


MANIFEST_SCHEMA = "metaunlearn/manifest"


def _sha256(path: Path) -> str:
    """Content address of an artifact.

    The meta-step records CSV carries a wall-clock column (part of its schema)
    that would defeat run determinism, so it is addressed over a canonical
    form with the timing column stripped.
    """
    path = Path(path)
    if path.name == "records.csv":
        with path.open() as fh:
            rows = [",".join(line.rstrip("\n").split(",")[:-1]) for line in fh]
        return hashlib.sha256("\n".join(rows).encode()).hexdigest()
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Manifest:
    """Content-addressed record of every stage's artifacts."""

    def __init__(self, root: Path, cfg: dict):
        self.root = Path(root)
        self.path = self.root / "manifest.json"
        if self.path.exists():
            self.doc = json.loads(self.path.read_text())
        else:
            self.doc = {
                "schema": MANIFEST_SCHEMA,
                "version": 1,
                "config_hash": config_hash(cfg),
                "package_version": __version__,
                "config": cfg,
                "stages": {},
            }

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.doc, indent=1))

    def record(self, stage: str, files: dict[str, Path], wall_s: float) -> None:
        self.doc["stages"][stage] = {
            "files": {
                name: {"path": str(Path(p).relative_to(self.root)), "sha256": _sha256(p)} for name, p in files.items()
            },
            "wall_s": wall_s,
        }
        self.save()

    def stage_fresh(self, stage: str) -> bool:
        entry = self.doc["stages"].get(stage)
        if not entry:
            return False
        for info in entry["files"].values():
            p = self.root / info["path"]
            if not p.exists() or _sha256(p) != info["sha256"]:
                return False
        return True

    def file(self, stage: str, name: str) -> Path:
        entry = self.doc["stages"].get(stage)
        if not entry or name not in entry["files"]:
            raise MissingInputError(f"stage {stage!r} has not produced {name!r}; run it first")
        p = self.root / entry["files"][name]["path"]
        if not p.exists():
            raise MissingInputError(f"missing artifact {p}")
        return p


def run_root(exp: Experiment, out: str | Path) -> Path:
    return Path(out) / config_hash(exp.raw)


def open_manifest(exp: Experiment, out: str | Path) -> Manifest:
    return Manifest(run_root(exp, out), exp.raw)


# ---------------------------------------------------------------------------
# World and data
# ---------------------------------------------------------------------------


def ensure_world(exp: Experiment, man: Manifest) -> tuple[ConceptTable, DatasetBundle]:
    world_path = man.root / "world" / "world.json"
    bundle_path = man.root / "world" / "bundle.json"
    if man.stage_fresh("world"):
        return load_world(world_path), load_bundle(bundle_path)
    t0 = time.perf_counter()
    w = exp.raw["world"]
    table = default_world(
        exp.stage_seed("world"),
        embed_dim=w["embed_dim"],
        spread=w["spread"],
        related_cosine=w["related_cosine"],
        unrelated_cosine_cap=w["unrelated_cosine_cap"],
        centers=w["centers"],
    )
    bundle = draw_split(table, SplitSizes(**exp.raw["data"]), exp.stage_seed("data"))
    save_world(world_path, table)
    save_bundle(bundle_path, bundle)
    man.record("world", {"world": world_path, "bundle": bundle_path}, time.perf_counter() - t0)
    return table, bundle


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


def train_dm(
    params: DenoiserParams,
    x: np.ndarray,
    names: tuple,
    table: ConceptTable,
    sched,
    steps: int,
    lr: float,
    batch: int,
    optimizer: str,
    rng: np.random.Generator,
) -> list[float]:
    """In-place denoising-loss training; returns the per-step loss history."""
    opt = make_optimizer(optimizer, lr)
    cfg = params.cfg
    losses = []
    for step in range(steps):
        idx = rng.integers(0, len(x), size=batch)
        frozen = freeze_draws(Batch(x[idx], table.embed_names([names[i] for i in idx], cfg.tokens)), sched, rng)
        try:
            with Tape() as tape:
                th = Value(params.flat)
                loss = loss_on_draws(th, cfg, frozen)
            (g,) = ad.grad(tape, loss, [th])
            params.flat = opt.step(params.flat, g.data)
        except NumericsError as err:
            raise NumericsError(f"training diverged at step {step}: {err}") from err
        losses.append(float(loss.data))
    return losses


def cmd_pretrain(exp: Experiment, man: Manifest) -> Path:
    """Train the base model on all concepts' data and checkpoint it."""
    ck_path = man.root / "pretrain" / "checkpoint.json"
    if man.stage_fresh("pretrain"):
        return ck_path
    table, bundle = ensure_world(exp, man)
    t0 = time.perf_counter()
    p = exp.raw["pretrain"]
    rng = exp.stage_rng("pretrain")
    params = init_params(exp.model, rng)
    x = np.concatenate([bundle.forget.x, bundle.retain.x])
    names = bundle.forget.names + bundle.retain.names
    losses = train_dm(params, x, names, table, exp.schedule, p["steps"], p["lr"], p["batch"], p["optimizer"], rng)

    save_checkpoint(
        ck_path,
        params,
        exp.schedule,
        seed_lineage=[exp.seed, "pretrain"],
        provenance={"stage": "pretrain", "config_hash": config_hash(exp.raw)},
    )
    loss_path = man.root / "pretrain" / "loss.csv"
    with loss_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            writer.writerow([i, repr(v)])
    man.record("pretrain", {"checkpoint": ck_path, "loss": loss_path}, time.perf_counter() - t0)
    return ck_path


def _load_params(path: Path) -> DenoiserParams:
    params, _, _ = load_checkpoint(path)
    return params


# ---------------------------------------------------------------------------
# Unlearning stages
# ---------------------------------------------------------------------------


def cmd_unlearn(exp: Experiment, man: Manifest) -> Path:
    ck_path = man.root / "unlearn" / "checkpoint.json"
    if man.stage_fresh("unlearn"):
        return ck_path
    table, bundle = ensure_world(exp, man)
    theta_star = _load_params(man.file("pretrain", "checkpoint"))
    t0 = time.perf_counter()
    theta_un = run_unlearn(theta_star, exp.unlearn, bundle, table, exp.schedule, exp.stage_rng("unlearn"))
    save_checkpoint(
        ck_path,
        theta_un,
        exp.schedule,
        seed_lineage=[exp.seed, "unlearn"],
        provenance={"stage": "unlearn", "method": exp.unlearn.method, "config_hash": config_hash(exp.raw)},
    )
    man.record("unlearn", {"checkpoint": ck_path}, time.perf_counter() - t0)
    return ck_path


def cmd_meta(exp: Experiment, man: Manifest) -> Path:
    """Meta-unlearn; uses the unlearn-stage random stream (see config.STAGE_KEYS)."""
    ck_path = man.root / "meta" / "checkpoint.json"
    if man.stage_fresh("meta"):
        return ck_path
    table, bundle = ensure_world(exp, man)
    theta_star = _load_params(man.file("pretrain", "checkpoint"))
    t0 = time.perf_counter()
    mcfg = exp.meta
    if mcfg.is_two_stage():
        theta_init = run_unlearn(theta_star, exp.unlearn, bundle, table, exp.schedule, exp.stage_rng("unlearn"))
    else:
        theta_init = theta_star
    theta_meta, records = meta_unlearn(theta_init, mcfg, bundle, table, exp.schedule, exp.stage_rng("unlearn"))
    save_checkpoint(
        ck_path,
        theta_meta,
        exp.schedule,
        seed_lineage=[exp.seed, "unlearn", "meta"],
        provenance={
            "stage": "meta",
            "method": exp.unlearn.method,
            "mode": mcfg.mode,
            "two_stage": mcfg.is_two_stage(),
            "config_hash": config_hash(exp.raw),
        },
    )
    rec_path = man.root / "meta" / "records.csv"
    write_records_csv(rec_path, records)
    man.record("meta", {"checkpoint": ck_path, "records": rec_path}, time.perf_counter() - t0)
    return ck_path


# ---------------------------------------------------------------------------
# Attack stage
# ---------------------------------------------------------------------------


def _attack_worker(args) -> tuple[str, int, str]:
    """Process-pool worker: run one attack and write its curve CSV."""
    (label, seed, ck_path, world_path, bundle_path, acfg_kwargs, sched_args, out_path) = args
    from .diffusion import make_schedule  # local import keeps the worker import-light

    table = load_world(world_path)
    bundle = load_bundle(bundle_path)
    params = _load_params(Path(ck_path))
    sched = make_schedule(*sched_args)
    curve, _ = run_attack(params, AttackConfig(**acfg_kwargs), bundle, table, sched, np.random.default_rng(seed))
    write_curve_csv(out_path, curve)
    return label, seed, str(out_path)


def cmd_attack(exp: Experiment, man: Manifest, jobs: int = 1) -> dict[str, Path]:
    """Attack the unlearned and meta-unlearned checkpoints on identical schedules."""
    dataset = exp.raw["attack"]["dataset"]
    stage = f"attack/{dataset}"
    seeds = exp.raw["attack"]["seeds"]
    out_dir = man.root / "attack" / dataset
    expected = {
        f"{label}_seed{seed}": out_dir / f"{label}_seed{seed}.csv"
        for label in ("unlearn", "meta")
        for seed in seeds
    }
    if man.stage_fresh(stage):
        return expected
    ensure_world(exp, man)
    world_path = man.file("world", "world")
    bundle_path = man.file("world", "bundle")
    checkpoints = {"unlearn": man.file("unlearn", "checkpoint"), "meta": man.file("meta", "checkpoint")}
    sched_args = (exp.schedule.timesteps, exp.schedule.beta_start, exp.schedule.beta_end)

    t0 = time.perf_counter()
    tasks = []
    for label, ck in checkpoints.items():
        for seed in seeds:
            acfg = exp.attack_config(seed)
            tasks.append(
                (label, seed, str(ck), world_path, bundle_path, acfg.__dict__.copy(), sched_args, expected[f"{label}_seed{seed}"])
            )
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_attack_worker, tasks))
    else:
        for task in tasks:
            _attack_worker(task)
    man.record(stage, expected, time.perf_counter() - t0)
    return expected


# ---------------------------------------------------------------------------
# Eval stage
# ---------------------------------------------------------------------------


def cmd_eval(exp: Experiment, man: Manifest) -> dict[str, Path]:
    if man.stage_fresh("eval"):
        return {}
    table, _ = ensure_world(exp, man)
    e = exp.raw["eval"]
    t0 = time.perf_counter()
    files = {}
    for stage in ("pretrain", "unlearn", "meta"):
        try:
            ck = man.file(stage, "checkpoint")
        except MissingInputError:
            continue
        records = None
        if stage == "meta":
            try:
                records = read_records_csv(man.file("meta", "records"))
            except MissingInputError:
                records = None
        report = build_metric_report(_load_params(ck), table, exp.schedule, e["samples"], e["seed"], records)
        path = man.root / "eval" / f"{stage}.json"
        save_metric_report(path, report)
        files[stage] = path
    if not files:
        raise MissingInputError("no checkpoints found to evaluate; run pretrain/unlearn/meta first")
    man.record("eval", files, time.perf_counter() - t0)
    return files


# ---------------------------------------------------------------------------
# Report stage
# ---------------------------------------------------------------------------


def _mean_curve(curves: list[RelearnCurve]) -> RelearnCurve:
    steps = curves[0].steps
    for c in curves:
        if c.steps != steps:
            raise ValueError("cannot average curves with different schedules")
    return RelearnCurve(
        steps=list(steps),
        forget_score=[float(v) for v in np.mean([c.forget_score for c in curves], axis=0)],
        l_forget=[float(v) for v in np.mean([c.l_forget for c in curves], axis=0)],
        l_retain=[float(v) for v in np.mean([c.l_retain for c in curves], axis=0)],
        retain_mmd=[float(v) for v in np.mean([c.retain_mmd for c in curves], axis=0)],
        eval_seed=curves[0].eval_seed,
    )


def cmd_report(exp: Experiment, man: Manifest) -> tuple[dict, bool]:
    """Comparison grid, verdict document and figures; returns (summary, gate_ok)."""
    table, bundle = ensure_world(exp, man)
    dataset = exp.raw["attack"]["dataset"]
    seeds = exp.raw["attack"]["seeds"]
    eval_seed = exp.raw["eval"]["seed"]
    out_dir = man.root / "attack" / dataset

    curves: dict[str, list[RelearnCurve]] = {"unlearn": [], "meta": []}
    for label in curves:
        for seed in seeds:
            path = out_dir / f"{label}_seed{seed}.csv"
            if not path.exists():
                raise MissingInputError(f"missing attack curve {path}; run the attack stage first")
            curves[label].append(read_curve_csv(path, eval_seed))

    t0 = time.perf_counter()
    per_seed = [compare_runs(u, m, exp.compare) for u, m in zip(curves["unlearn"], curves["meta"])]
    mean_u = _mean_curve(curves["unlearn"])
    mean_m = _mean_curve(curves["meta"])
    mean_verdict = compare_runs(mean_u, mean_m, exp.compare)

    # before-FT scores for the grid's leading column
    e = exp.raw["eval"]
    before = {}
    for label, stage in (("unlearn", "unlearn"), ("meta", "meta")):
        params = _load_params(man.file(stage, "checkpoint"))
        before[label] = forget_score(params, table, exp.schedule, e["samples"], e["seed"])

    grid_path = man.root / "report" / f"grid_{dataset}.csv"
    grid_path.parent.mkdir(parents=True, exist_ok=True)
    with grid_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "before_ft"] + [f"step_{s}" for s in mean_u.steps])
        writer.writerow(["unlearn", repr(before["unlearn"])] + [repr(v) for v in mean_u.forget_score])
        writer.writerow(["meta", repr(before["meta"])] + [repr(v) for v in mean_m.forget_score])
        writer.writerow(["delta", repr(before["meta"] - before["unlearn"])] + [repr(m - u) for m, u in zip(mean_m.forget_score, mean_u.forget_score)])

    min_dom = exp.raw["compare"]["min_dominance"]
    if dataset == "benign":
        gate_ok = mean_verdict.verdict_benign_band
        gate = f"benign forget-score band < {exp.compare.benign_band}"
    else:
        gate_ok = mean_verdict.forget_dominance_count >= min_dom
        gate = f"forget-score dominance at >= {min_dom}/{len(mean_u.steps)} steps (mean over seeds)"

    verdict_doc = {
        "schema": "metaunlearn/report",
        "version": 1,
        "dataset": dataset,
        "seeds": list(seeds),
        "gate": gate,
        "gate_ok": gate_ok,
        "before_ft": before,
        "mean": mean_verdict.to_dict(),
        "per_seed": [v.to_dict() for v in per_seed],
    }
    verdicts_path = man.root / "report" / f"verdicts_{dataset}.json"
    verdicts_path.write_text(json.dumps(verdict_doc, indent=1))

    fig_path = man.root / "report" / f"relearn_{dataset}.svg"
    plot_relearn_curves(
        {
            "unlearn (mean)": ([0] + list(mean_u.steps), [before["unlearn"]] + list(mean_u.forget_score)),
            "meta-unlearn (mean)": ([0] + list(mean_m.steps), [before["meta"]] + list(mean_m.forget_score)),
        },
        fig_path,
    )
    files = {"grid": grid_path, "verdicts": verdicts_path, "relearn_fig": fig_path}

    try:
        records = read_records_csv(man.file("meta", "records"))
    except MissingInputError:
        records = None
    if records and len(records) >= 2:
        slope, intercept = alignment_series(records)
        align_path = man.root / "report" / "alignment.svg"
        plot_alignment_series(
            [r.step for r in records], [r.inner_product_norm for r in records], slope, intercept, align_path
        )
        files["alignment_fig"] = align_path

    man.record(f"report/{dataset}", files, time.perf_counter() - t0)
    summary = {
        "gate": gate,
        "gate_ok": gate_ok,
        "before_ft": before,
        "mean_scores": {"unlearn": mean_u.forget_score, "meta": mean_m.forget_score},
        "files": {k: str(v) for k, v in files.items()},
    }
    return summary, gate_ok


# ---------------------------------------------------------------------------
# Verify stage (fd / oracle suites)
# ---------------------------------------------------------------------------


def cmd_verify(quick: bool = True) -> bool:
    """Run the finite-difference and closed-form oracle suites; print one line each."""
    ok = True

    draws = 30 if quick else 120
    results = check_primitives(draws=draws, tol=1e-5)
    worst = max(r[1] for r in results)
    passed = all(r[2] for r in results)
    ok &= passed
    print(f"[{'PASS' if passed else 'FAIL'}] primitive gradients vs central differences "
          f"({len(results)} primitives, worst rel err {worst:.2e}, tol 1e-05)")

    rep = check_dm_loss_gradient(tol=1e-4)
    ok &= rep.passed
    print(f"[{'PASS' if rep.passed else 'FAIL'}] diffusion-loss gradient fd_check "
          f"(rel err {rep.max_rel_error:.2e}, tol 1e-04)")

    dev, passed = check_hvp_against_fd(tol=1e-3)
    ok &= passed
    print(f"[{'PASS' if passed else 'FAIL'}] Hessian-vector products vs fd-of-gradients "
          f"(rel err {dev:.2e}, tol 1e-03)")

    n_inst = 10 if quick else 50
    worst_grad, worst_probe, passed = check_closed_form_optimality(n_inst, probes=0 if quick else 300)
    ok &= passed
    print(f"[{'PASS' if passed else 'FAIL'}] closed-form edit optimality "
          f"({n_inst} instances, worst grad norm {worst_grad:.2e}, tol 1e-08)")

    worst, passed = check_erasing_embedding_optimality(n_inst)
    ok &= passed
    print(f"[{'PASS' if passed else 'FAIL'}] erasing-embedding ridge optimality "
          f"({n_inst} instances, worst grad norm {worst:.2e}, tol 1e-08)")

    return ok
