"""Discrete-time DDPM machinery on low-dimensional data.

Noise schedule, forward diffusion, a conditional noise-prediction network
(MLP trunk + sinusoidal time embedding + one cross-attention block over
condition tokens), the denoising training loss, an ancestral sampler, and a
versioned text checkpoint format.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericsError, Value

CHECKPOINT_SCHEMA = "metaunlearn/checkpoint"
CHECKPOINT_VERSION = 1

MAX_PARAMS = 20_000

SEGMENT_NAMES = ("trunk", "time_embed", "attn_query", "attn_key", "attn_value", "head")

# Cross-attention parameter segments, the target of closed-form edits and
# the ESD-x finetuning mask.
CROSS_ATTENTION_SEGMENTS = ("attn_query", "attn_key", "attn_value")


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variance tables for ``timesteps`` discrete diffusion steps."""

    timesteps: int
    beta: np.ndarray  # (T,), beta[t-1] is the step-t variance
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    beta_start: float
    beta_end: float

    def __post_init__(self):
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if not (np.all(self.beta > 0.0) and np.all(self.beta < 1.0)):
            raise ValueError("beta entries must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if np.any(self.sigma < 0.0):
            raise ValueError("sigma must be nonnegative")


def make_schedule(timesteps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule; sigma_t = sqrt(beta_t) (fixed small-variance sampler)."""
    if timesteps < 1:
        raise ValueError("timesteps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"invalid beta range ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    return NoiseSchedule(timesteps, beta, alpha, alpha_bar, sigma, float(beta_start), float(beta_end))


def forward_diffuse(x: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) * x + sqrt(1 - abar_t) * eps, per-row t allowed."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x.shape:
        raise ValueError("eps must have the shape of x")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.timesteps):
        raise ValueError(f"t out of range [1, {sched.timesteps}]")
    ab = sched.alpha_bar[t - 1]
    if x.ndim == 2:
        ab = np.reshape(ab, (-1, 1)) if np.ndim(ab) == 1 else ab
    return np.sqrt(ab) * x + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# Model configuration and parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    data_dim: int = 2
    hidden: int = 32
    time_dim: int = 16
    embed_dim: int = 8
    tokens: int = 1
    activation: str = "silu"

    def __post_init__(self):
        for name in ("data_dim", "hidden", "time_dim", "embed_dim", "tokens"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.time_dim % 2 != 0:
            raise ValueError("time_dim must be even")
        if self.activation not in ("silu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return {
            "data_dim": self.data_dim,
            "hidden": self.hidden,
            "time_dim": self.time_dim,
            "embed_dim": self.embed_dim,
            "tokens": self.tokens,
            "activation": self.activation,
        }


def _weight_specs(cfg: ModelConfig) -> list[tuple[str, str, tuple[int, ...]]]:
    d, h, p, k = cfg.data_dim, cfg.hidden, cfg.time_dim, cfg.embed_dim
    return [
        ("trunk", "w_in", (d, h)),
        ("trunk", "b_in", (h,)),
        ("trunk", "w_mid", (h, h)),
        ("trunk", "b_mid", (h,)),
        ("trunk", "w_ctx", (k, h)),
        ("trunk", "b_ctx", (h,)),
        ("time_embed", "w_time", (p, h)),
        ("time_embed", "b_time", (h,)),
        ("attn_query", "w_q", (h, k)),
        ("attn_key", "w_k", (k, k)),
        ("attn_value", "w_v", (k, k)),
        ("head", "w_out", (h, d)),
        ("head", "b_out", (d,)),
    ]


class ParamLayout:
    """Flat-vector layout: named weights grouped into named segments."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.weights: dict[str, tuple[slice, tuple[int, ...]]] = {}
        self.segments: dict[str, slice] = {}
        offset = 0
        seg_start: dict[str, int] = {}
        seg_end: dict[str, int] = {}
        for segment, name, shape in _weight_specs(cfg):
            size = int(np.prod(shape))
            self.weights[name] = (slice(offset, offset + size), shape)
            seg_start.setdefault(segment, offset)
            seg_end[segment] = offset + size
            offset += size
        self.size = offset
        for segment in SEGMENT_NAMES:
            self.segments[segment] = slice(seg_start[segment], seg_end[segment])

    def weight(self, theta: Value, name: str) -> Value:
        sl, shape = self.weights[name]
        w = ad.take(theta, sl)
        return ad.reshape(w, shape) if len(shape) > 1 else w


_LAYOUT_CACHE: dict[ModelConfig, ParamLayout] = {}


def layout_for(cfg: ModelConfig) -> ParamLayout:
    layout = _LAYOUT_CACHE.get(cfg)
    if layout is None:
        layout = _LAYOUT_CACHE[cfg] = ParamLayout(cfg)
    return layout


@dataclass
class DenoiserParams:
    """The model's parameter vector with named segment views."""

    cfg: ModelConfig
    flat: np.ndarray

    def __post_init__(self):
        layout = layout_for(self.cfg)
        if layout.size > MAX_PARAMS:
            raise ValueError(f"parameter count {layout.size} exceeds the toy-scale budget {MAX_PARAMS}")
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (layout.size,):
            raise ValueError(f"expected {layout.size} parameters, got shape {self.flat.shape}")
        if not np.isfinite(self.flat).all():
            raise NumericsError("non-finite parameter entries")

    @property
    def layout(self) -> ParamLayout:
        return layout_for(self.cfg)

    def segment(self, name: str) -> np.ndarray:
        """A view into the flat vector (aliases the same numbers)."""
        return self.flat[self.layout.segments[name]]

    def weight_array(self, name: str) -> np.ndarray:
        sl, shape = self.layout.weights[name]
        return self.flat[sl].reshape(shape)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.cfg, self.flat.copy())


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> DenoiserParams:
    """Gaussian init scaled by 1/sqrt(fan_in); biases start at zero."""
    layout = layout_for(cfg)
    flat = np.zeros(layout.size)
    for _, name, shape in _weight_specs(cfg):
        sl, _ = layout.weights[name]
        if len(shape) > 1:
            flat[sl] = (rng.standard_normal(shape) / math.sqrt(shape[0])).reshape(-1)
    return DenoiserParams(cfg, flat)


# ---------------------------------------------------------------------------
# Noise prediction network
# ---------------------------------------------------------------------------


def time_features(t, dim: int, max_period: float = 10_000.0) -> np.ndarray:
    """Sinusoidal features of the timestep, shape (n, dim). Constant wrt parameters."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _normalize_condition(cond, cfg: ModelConfig, n: int):
    """Return condition token embeddings as a (n, tokens, embed_dim) Value or array."""
    if isinstance(cond, Value):
        if cond.data.shape != (n, cfg.tokens, cfg.embed_dim):
            raise ValueError(f"condition shape {cond.data.shape} does not match (n, tokens, embed_dim)")
        return cond
    cond = np.asarray(cond, dtype=np.float64)
    if cond.ndim == 1:
        cond = cond[None, :]
    if cond.ndim == 2:  # (tokens, k) shared across the batch
        if cond.shape != (cfg.tokens, cfg.embed_dim):
            raise ValueError(f"condition shape {cond.shape} does not match (tokens, embed_dim)")
        cond = np.broadcast_to(cond, (n,) + cond.shape).copy()
    if cond.shape != (n, cfg.tokens, cfg.embed_dim):
        raise ValueError(f"condition shape {cond.shape} does not match (n, tokens, embed_dim)")
    return Value(cond)


def predict_noise_value(theta: Value, cfg: ModelConfig, x_t, t, cond) -> Value:
    """Differentiable noise prediction; ``theta`` is the flat parameter Value.

    The cross-attention block computes softmax(q·Kᵀ/sqrt(k))·V with
    K = W_K·e and V = W_V·e per condition token e.
    """
    layout = layout_for(cfg)
    x_t = x_t if isinstance(x_t, Value) else Value(np.atleast_2d(np.asarray(x_t, dtype=np.float64)))
    n = x_t.data.shape[0]
    if x_t.data.shape[1] != cfg.data_dim:
        raise ValueError(f"x_t has dim {x_t.data.shape[1]}, expected {cfg.data_dim}")
    cond = _normalize_condition(cond, cfg, n)

    w = lambda name: layout.weight(theta, name)
    act = ad.silu if cfg.activation == "silu" else ad.relu

    pe = Value(time_features(t, cfg.time_dim) * np.ones((n, 1)))
    te = ad.matmul(pe, w("w_time")) + w("b_time")
    h1 = act(ad.matmul(x_t, w("w_in")) + w("b_in") + te)

    q = ad.matmul(h1, w("w_q"))  # (n, k)
    wk_t = ad.transpose(w("w_k"))
    wv_t = ad.transpose(w("w_v"))
    scale = 1.0 / math.sqrt(cfg.embed_dim)
    logits = []
    values = []
    for j in range(cfg.tokens):
        tok = ad.take(cond, (slice(None), j, slice(None)))  # (n, k)
        key = ad.matmul(tok, wk_t)
        logits.append(ad.mul(ad.sum_axes(ad.mul(q, key), 1, keepdims=True), scale))
        values.append(ad.matmul(tok, wv_t))
    attn = ad.softmax(ad.concat(logits, axis=1), axis=1)  # (n, tokens)
    ctx = None
    for j in range(cfg.tokens):
        term = ad.mul(ad.take(attn, (slice(None), slice(j, j + 1))), values[j])
        ctx = term if ctx is None else ctx + term

    h2 = act(ad.matmul(h1, w("w_mid")) + w("b_mid") + ad.matmul(ctx, w("w_ctx")) + w("b_ctx"))
    return ad.matmul(h2, w("w_out")) + w("b_out")


def predict_noise(params: DenoiserParams, x_t, t, cond) -> np.ndarray:
    """Eager noise prediction from a parameter snapshot."""
    with ad.no_recording():
        return predict_noise_value(Value(params.flat), params.cfg, x_t, t, cond).data


# ---------------------------------------------------------------------------
# Training loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Batch:
    """Clean data points with resolved condition token embeddings."""

    x: np.ndarray  # (n, data_dim)
    cond: np.ndarray  # (n, tokens, embed_dim)

    def __len__(self):
        return self.x.shape[0]


@dataclass(frozen=True)
class FrozenDraws:
    """A batch plus fixed timestep/noise draws, making the loss a pure function of theta."""

    x_t: np.ndarray  # (n, data_dim)
    t: np.ndarray  # (n,)
    eps: np.ndarray  # (n, data_dim)
    cond: np.ndarray  # (n, tokens, embed_dim)


def freeze_draws(batch: Batch, sched: NoiseSchedule, rng: np.random.Generator) -> FrozenDraws:
    """Draw t ~ Uniform{1..T} and eps ~ N(0, I) per batch element and fix them."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    t = rng.integers(1, sched.timesteps + 1, size=n)
    eps = rng.standard_normal((n, batch.x.shape[1]))
    x_t = forward_diffuse(batch.x, t, eps, sched)
    return FrozenDraws(x_t, t, eps, batch.cond)


def loss_on_draws(theta: Value, cfg: ModelConfig, frozen: FrozenDraws) -> Value:
    """Mean over the batch of the summed squared noise-prediction error."""
    pred = predict_noise_value(theta, cfg, frozen.x_t, frozen.t, frozen.cond)
    n = frozen.x_t.shape[0]
    return ad.mul(ad.sum_all(ad.square(ad.sub(Value(frozen.eps), pred))), 1.0 / n)


def diffusion_loss(params: DenoiserParams, batch: Batch, sched: NoiseSchedule, rng: np.random.Generator) -> float:
    if len(batch) == 0:
        raise ValueError("empty batch")
    frozen = freeze_draws(batch, sched, rng)
    with ad.no_recording():
        return float(loss_on_draws(Value(params.flat), params.cfg, frozen).data)


# ---------------------------------------------------------------------------
# Ancestral sampler
# ---------------------------------------------------------------------------


def sample(params: DenoiserParams, cond, sched: NoiseSchedule, rng: np.random.Generator, n: int) -> np.ndarray:
    """Ancestral DDPM chain from x_T ~ N(0, I) down to x_0; no noise at t=1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = params.cfg
    x = rng.standard_normal((n, cfg.data_dim))
    with ad.no_recording():
        theta = Value(params.flat)
        for t in range(sched.timesteps, 0, -1):
            eps_hat = predict_noise_value(theta, cfg, x, t, cond).data
            i = t - 1
            mu = (x - sched.beta[i] / math.sqrt(1.0 - sched.alpha_bar[i]) * eps_hat) / math.sqrt(sched.alpha[i])
            if t > 1:
                x = mu + sched.sigma[i] * rng.standard_normal((n, cfg.data_dim))
            else:
                x = mu
    if not np.isfinite(x).all():
        raise NumericsError("sampler produced non-finite points")
    return x


# ---------------------------------------------------------------------------
# Checkpoint persistence
# ---------------------------------------------------------------------------


def save_checkpoint(
    path,
    params: DenoiserParams,
    sched: NoiseSchedule,
    seed_lineage: list | None = None,
    provenance: dict | None = None,
) -> None:
    """Write a versioned text checkpoint. Floats round-trip exactly (shortest repr)."""
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "version": CHECKPOINT_VERSION,
        "model": params.cfg.to_dict(),
        "schedule": {
            "timesteps": sched.timesteps,
            "beta_start": sched.beta_start,
            "beta_end": sched.beta_end,
        },
        "seed_lineage": list(seed_lineage or []),
        "provenance": dict(provenance or {}),
        "params": [float(v) for v in params.flat],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1))


def load_checkpoint(path) -> tuple[DenoiserParams, NoiseSchedule, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"not a checkpoint document: schema={doc.get('schema')!r}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    cfg = ModelConfig(**doc["model"])
    sched = make_schedule(**doc["schedule"])
    params = DenoiserParams(cfg, np.array(doc["params"], dtype=np.float64))
    meta = {"seed_lineage": doc.get("seed_lineage", []), "provenance": doc.get("provenance", {})}
    return params, sched, meta
