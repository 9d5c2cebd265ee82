"""Synthetic 2-D concept world: concept distributions, embeddings, and data splits.

The default world has one forget concept F, a related retained concept R
(overlapping support, embedding cosine 0.6 with F), and two unrelated
retained concepts U1/U2 far from F. "Related" is encoded both spatially and
in embedding space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROLE_FORGET = "forget"
ROLE_RELATED = "related-retain"
ROLE_UNRELATED = "unrelated-retain"

WORLD_SCHEMA = "metaunlearn/world"
BUNDLE_SCHEMA = "metaunlearn/bundle"


@dataclass(frozen=True)
class Concept:
    name: str
    center: np.ndarray  # point in data space
    spread: float
    embedding: np.ndarray  # (embed_dim,)
    role: str

    def __post_init__(self):
        if self.spread <= 0:
            raise ValueError(f"concept {self.name!r}: spread must be positive")
        if self.role not in (ROLE_FORGET, ROLE_RELATED, ROLE_UNRELATED):
            raise ValueError(f"concept {self.name!r}: unknown role {self.role!r}")


class ConceptTable:
    """Map name -> Concept plus the all-zero null (unconditional) embedding."""

    def __init__(self, concepts: list[Concept], embed_dim: int):
        names = [c.name for c in concepts]
        if len(set(names)) != len(names):
            raise ValueError("concept names must be unique")
        self.concepts = {c.name: c for c in concepts}
        self.embed_dim = embed_dim
        self.null_embedding = np.zeros(embed_dim)

    def __contains__(self, name: str) -> bool:
        return name in self.concepts

    def __getitem__(self, name: str) -> Concept:
        return self.concepts[name]

    def names(self, role: str | None = None) -> list[str]:
        if role is None:
            return sorted(self.concepts)
        return sorted(n for n, c in self.concepts.items() if c.role == role)

    @property
    def forget_name(self) -> str:
        (name,) = self.names(ROLE_FORGET)
        return name

    def retain_names(self) -> list[str]:
        return sorted(n for n, c in self.concepts.items() if c.role != ROLE_FORGET)

    def embedding(self, name: str | None) -> np.ndarray:
        """T(c); ``None`` means the null context."""
        if name is None:
            return self.null_embedding
        return self.concepts[name].embedding

    def embed_names(self, names, tokens: int = 1) -> np.ndarray:
        """Condition token array (n, tokens, embed_dim) for a sequence of names.

        Token 0 carries T(c); any further tokens carry the null embedding, so
        the 2-token mode exercises a nontrivial softmax without new concepts.
        """
        n = len(names)
        cond = np.zeros((n, tokens, self.embed_dim))
        for i, name in enumerate(names):
            cond[i, 0] = self.embedding(name)
        return cond

    def condition_tokens(self, name: str | None, tokens: int = 1) -> np.ndarray:
        """Single-sample (tokens, embed_dim) condition block."""
        cond = np.zeros((tokens, self.embed_dim))
        cond[0] = self.embedding(name)
        return cond


def _random_unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


DEFAULT_CENTERS = {"F": (2.0, 2.0), "R": (2.5, 2.5), "U1": (-2.0, 2.0), "U2": (-2.0, -2.0)}


def default_world(
    seed,
    embed_dim: int = 8,
    spread: float = 0.3,
    related_cosine: float = 0.6,
    unrelated_cosine_cap: float = 0.8,
    centers: dict | None = None,
) -> ConceptTable:
    """Four concepts: F (forget), R (related retain), U1/U2 (unrelated retain).

    R's embedding is built as cos·emb(F) + sin·w with w a fresh random unit
    vector orthogonalized against emb(F), so cos(emb(F), emb(R)) equals
    ``related_cosine`` exactly. U1/U2 embeddings are rejection-resampled until
    |cos(emb(F), ·)| stays below ``unrelated_cosine_cap``.
    """
    rng = np.random.default_rng(seed)
    ctr = {name: np.asarray(xy, dtype=np.float64) for name, xy in {**DEFAULT_CENTERS, **(centers or {})}.items()}
    emb_f = _random_unit(rng, embed_dim)

    w = _random_unit(rng, embed_dim)
    w = w - (w @ emb_f) * emb_f
    w = w / np.linalg.norm(w)
    emb_r = related_cosine * emb_f + np.sqrt(1.0 - related_cosine**2) * w

    def unrelated_embedding():
        while True:
            e = _random_unit(rng, embed_dim)
            if abs(e @ emb_f) < unrelated_cosine_cap:
                return e

    concepts = [
        Concept("F", ctr["F"], spread, emb_f, ROLE_FORGET),
        Concept("R", ctr["R"], spread, emb_r, ROLE_RELATED),
        Concept("U1", ctr["U1"], spread, unrelated_embedding(), ROLE_UNRELATED),
        Concept("U2", ctr["U2"], spread, unrelated_embedding(), ROLE_UNRELATED),
    ]
    return ConceptTable(concepts, embed_dim)


# ---------------------------------------------------------------------------
# Data splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabeledSet:
    """Points paired with the names of the concepts they were drawn from."""

    x: np.ndarray  # (n, data_dim)
    names: tuple[str, ...]

    def __post_init__(self):
        if self.x.shape[0] != len(self.names):
            raise ValueError("x and names must have matching lengths")

    def __len__(self):
        return self.x.shape[0]


@dataclass(frozen=True)
class SplitSizes:
    forget: int = 512
    retain_per_concept: int = 512
    ft_pool: int = 256
    benign: int = 512

    def __post_init__(self):
        for name in ("forget", "retain_per_concept", "ft_pool", "benign"):
            if getattr(self, name) < 1:
                raise ValueError(f"sizes.{name} must be positive")


@dataclass(frozen=True)
class DatasetBundle:
    """The forget / retain / finetune-pool / benign splits used throughout."""

    forget: LabeledSet
    retain: LabeledSet
    ft_pool: LabeledSet
    benign: LabeledSet

    def __post_init__(self):
        forget_concepts = set(self.forget.names)
        if not set(self.ft_pool.names) <= forget_concepts:
            raise ValueError("ft_pool concepts must be a subset of forget concepts")
        if set(self.benign.names) & forget_concepts:
            raise ValueError("benign concepts must be disjoint from forget concepts")


def _draw(table: ConceptTable, name: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if name not in table:
        raise KeyError(f"unknown concept {name!r}")
    c = table[name]
    return c.center + c.spread * rng.standard_normal((n, c.center.shape[0]))


def draw_split(table: ConceptTable, sizes: SplitSizes, seed: int) -> DatasetBundle:
    """Gaussian draws per concept; ft_pool from the forget concept only,
    benign from the unrelated retained concepts only."""
    rng = np.random.default_rng(seed)
    forget_name = table.forget_name

    fx = _draw(table, forget_name, sizes.forget, rng)
    forget = LabeledSet(fx, (forget_name,) * sizes.forget)

    xs, names = [], []
    for name in table.retain_names():
        xs.append(_draw(table, name, sizes.retain_per_concept, rng))
        names += [name] * sizes.retain_per_concept
    retain = LabeledSet(np.concatenate(xs), tuple(names))

    ft = LabeledSet(_draw(table, forget_name, sizes.ft_pool, rng), (forget_name,) * sizes.ft_pool)

    unrelated = table.names(ROLE_UNRELATED)
    per = sizes.benign // len(unrelated)
    counts = [per + (1 if i < sizes.benign % len(unrelated) else 0) for i in range(len(unrelated))]
    xs, names = [], []
    for name, cnt in zip(unrelated, counts):
        xs.append(_draw(table, name, cnt, rng))
        names += [name] * cnt
    benign = LabeledSet(np.concatenate(xs), tuple(names))

    return DatasetBundle(forget, retain, ft, benign)


def nearest_concept(table: ConceptTable, x: np.ndarray) -> str:
    """Closest concept center in Euclidean distance; ties break lexicographically."""
    if not table.concepts:
        raise ValueError("empty concept table")
    x = np.asarray(x, dtype=np.float64)
    best_name, best_d = None, np.inf
    for name in sorted(table.concepts):
        d = float(np.linalg.norm(x - table[name].center))
        if d < best_d:
            best_name, best_d = name, d
    return best_name


def classify(table: ConceptTable, xs: np.ndarray) -> list[str]:
    """Vectorized nearest-center classification with the same tie rule."""
    names = sorted(table.concepts)
    centers = np.stack([table[n].center for n in names])
    d = np.linalg.norm(xs[:, None, :] - centers[None, :, :], axis=2)
    return [names[i] for i in np.argmin(d, axis=1)]


# ---------------------------------------------------------------------------
# Serialization (same structured-text style as checkpoints)
# ---------------------------------------------------------------------------


def save_world(path, table: ConceptTable) -> None:
    doc = {
        "schema": WORLD_SCHEMA,
        "version": 1,
        "embed_dim": table.embed_dim,
        "concepts": [
            {
                "name": c.name,
                "center": [float(v) for v in c.center],
                "spread": float(c.spread),
                "embedding": [float(v) for v in c.embedding],
                "role": c.role,
            }
            for c in (table[n] for n in sorted(table.concepts))
        ],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1))


def load_world(path) -> ConceptTable:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != WORLD_SCHEMA:
        raise ValueError(f"not a world document: schema={doc.get('schema')!r}")
    concepts = [
        Concept(
            c["name"],
            np.array(c["center"], dtype=np.float64),
            float(c["spread"]),
            np.array(c["embedding"], dtype=np.float64),
            c["role"],
        )
        for c in doc["concepts"]
    ]
    return ConceptTable(concepts, doc["embed_dim"])


def save_bundle(path, bundle: DatasetBundle) -> None:
    def enc(s: LabeledSet):
        return {"x": [[float(v) for v in row] for row in s.x], "names": list(s.names)}

    doc = {
        "schema": BUNDLE_SCHEMA,
        "version": 1,
        "splits": {
            "forget": enc(bundle.forget),
            "retain": enc(bundle.retain),
            "ft_pool": enc(bundle.ft_pool),
            "benign": enc(bundle.benign),
        },
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))


def load_bundle(path) -> DatasetBundle:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != BUNDLE_SCHEMA:
        raise ValueError(f"not a bundle document: schema={doc.get('schema')!r}")

    def dec(d) -> LabeledSet:
        return LabeledSet(np.array(d["x"], dtype=np.float64), tuple(d["names"]))

    s = doc["splits"]
    return DatasetBundle(dec(s["forget"]), dec(s["retain"]), dec(s["ft_pool"]), dec(s["benign"]))
