"""Class embeddings, class splits and cosine-similarity features."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class EmbeddingError(ValueError):
    pass


class MissingClass(EmbeddingError):
    def __init__(self, name: str):
        super().__init__(f"class {name!r} not found")
        self.name = name


class ZeroNormVector(EmbeddingError):
    pass


class DimensionMismatch(EmbeddingError):
    pass


class MalformedLine(EmbeddingError):
    pass


class InfeasibleSpec(EmbeddingError):
    pass


@dataclass(frozen=True)
class EmbeddingTable:
    dim: int
    entries: Mapping[str, np.ndarray]
    _similarity: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.dim < 1:
            raise DimensionMismatch(f"dim must be positive, got {self.dim}")
        frozen = {}
        for name, vec in self.entries.items():
            vec = np.array(vec, dtype=np.float64)
            vec.setflags(write=False)
            if vec.shape != (self.dim,):
                raise DimensionMismatch(f"{name}: expected length {self.dim}, got {vec.shape}")
            if not np.linalg.norm(vec) > 0.0:
                raise ZeroNormVector(f"{name}: zero-norm embedding")
            frozen[name] = vec
        object.__setattr__(self, "entries", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.entries[name]
        except KeyError:
            raise MissingClass(name) from None

    def __contains__(self, name: object) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def classes(self) -> list[str]:
        return list(self.entries)

    def similarity(self, a: str, b: str) -> float:
        """Memoized ``cosine_similarity(self[a], self[b])``; entries are read-only."""
        key = (a, b)
        cs = self._similarity.get(key)
        if cs is None:
            cs = self._similarity[key] = cosine_similarity(self[a], self[b])
        return cs

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        return (
            self.dim == other.dim
            and list(self.entries) == list(other.entries)
            and all(np.array_equal(self.entries[k], other.entries[k]) for k in self.entries)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class ClassSplit:
    """Seen / unseen / irrelevant class lists.

    ``model_classes`` (seen then irrelevant) fixes the row order of every
    detection matrix. Unseen classes never get a row.
    """

    seen: tuple[str, ...]
    unseen: tuple[str, ...] = ()
    irrelevant: tuple[str, ...] = ()
    _group: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("seen", "unseen", "irrelevant"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.seen:
            raise ValueError("seen classes must be non-empty")
        if not self.irrelevant:
            raise ValueError("irrelevant classes must be non-empty")
        group = {}
        for label, names in (("seen", self.seen), ("unseen", self.unseen), ("irrelevant", self.irrelevant)):
            for name in names:
                if name in group:
                    raise ValueError(f"class {name!r} listed twice ({group[name]} and {label})")
                group[name] = label
        object.__setattr__(self, "_group", group)

    @property
    def model_classes(self) -> tuple[str, ...]:
        return self.seen + self.irrelevant

    @property
    def targets(self) -> tuple[str, ...]:
        return self.seen + self.unseen

    @property
    def all_classes(self) -> tuple[str, ...]:
        return self.seen + self.unseen + self.irrelevant

    def group_of(self, name: str) -> str:
        try:
            return self._group[name]
        except KeyError:
            raise MissingClass(name) from None

    def __contains__(self, name: object) -> bool:
        return name in self._group


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatch(f"shape mismatch {a.shape} vs {b.shape}")
    # same as np.linalg.norm for 1-d float input, minus its dispatch overhead
    na, nb = math.sqrt(a.dot(a)), math.sqrt(b.dot(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroNormVector("cosine similarity of a zero vector")
    return na, nb


def cosine_similarity(g_j: Sequence[float] | np.ndarray, g_t: Sequence[float] | np.ndarray) -> float:
    """(g_j . g_t) / (|g_j| |g_t|), clamped to [-1, 1]."""
    a = np.asarray(g_j, dtype=np.float64)
    b = np.asarray(g_t, dtype=np.float64)
    na, nb = _check_pair(a, b)
    cs = float(a.dot(b)) / (na * nb)
    return min(1.0, max(-1.0, cs))


def similarity_column(table: EmbeddingTable, split: ClassSplit, target: str) -> np.ndarray:
    """Cosine similarity of every model class to ``target``, in split order."""
    table[target]
    if target not in split:
        raise MissingClass(target)
    return np.array([table.similarity(name, target) for name in split.model_classes])


def load_embeddings(path: str | Path, classes: Sequence[str]) -> EmbeddingTable:
    """Read a GloVe-style text file, keeping only ``classes`` in request order."""
    wanted = set(classes)
    found: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 2:
                raise MalformedLine(f"{path}:{lineno}: expected '<name> <float> ...'")
            try:
                vec = np.array([float(p) for p in parts[1:]])
            except ValueError:
                raise MalformedLine(f"{path}:{lineno}: non-numeric component") from None
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise DimensionMismatch(f"{path}:{lineno}: expected {dim} components, got {len(vec)}")
            name = parts[0]
            if name not in wanted:
                continue
            if name in found:
                raise MalformedLine(f"{path}:{lineno}: duplicate entry for {name!r}")
            if not np.linalg.norm(vec) > 0.0:
                raise ZeroNormVector(f"{path}:{lineno}: zero-norm vector for {name!r}")
            found[name] = vec
    for name in classes:
        if name not in found:
            raise MissingClass(name)
    return EmbeddingTable(dim=dim, entries={name: found[name] for name in classes})


def save_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name, vec in table.entries.items():
            fh.write(name + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def synth_embeddings(
    seed: int,
    classes: Sequence[str],
    dim: int,
    cluster_spec: Sequence[int],
    spread: float = 0.4,
    budget: int = 2000,
) -> EmbeddingTable:
    """Synthetic embeddings with controlled cluster structure.

    Cluster centroids are unit vectors with pairwise cosine <= 0.1. Each class
    is its centroid plus Gaussian noise of expected norm ``spread``, then
    normalized. Within a cluster cosine >= 0.7, across clusters <= 0.3;
    draws violating either bound are resampled until ``budget`` runs out.
    """
    if dim < 2:
        raise InfeasibleSpec("dim must be >= 2")
    if len(cluster_spec) != len(classes):
        raise InfeasibleSpec("cluster_spec must give one cluster id per class")
    if len(set(classes)) != len(classes):
        raise InfeasibleSpec("class names must be unique")
    rng = np.random.default_rng(seed)
    cluster_ids = sorted(set(cluster_spec))

    centroids: dict[int, np.ndarray] = {}
    for cid in cluster_ids:
        for _ in range(budget):
            c = rng.standard_normal(dim)
            c /= np.linalg.norm(c)
            if all(float(c @ other) <= 0.1 for other in centroids.values()):
                centroids[cid] = c
                break
        else:
            raise InfeasibleSpec(
                f"cannot place {len(cluster_ids)} clusters with pairwise cosine <= 0.1 in {dim} dimensions"
            )

    vectors: dict[str, np.ndarray] = {}
    for name, cid in zip(classes, cluster_spec):
        for _ in range(budget):
            v = centroids[cid] + rng.standard_normal(dim) * (spread / math.sqrt(dim))
            v /= np.linalg.norm(v)
            ok = True
            for other, ocid in zip(vectors, cluster_spec):
                cs = float(v @ vectors[other])
                if (ocid == cid and cs < 0.7) or (ocid != cid and cs > 0.3):
                    ok = False
                    break
            if ok:
                vectors[name] = v
                break
        else:
            raise InfeasibleSpec(f"resample budget exhausted placing class {name!r}")
    return EmbeddingTable(dim=dim, entries=vectors)
