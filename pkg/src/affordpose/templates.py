"""Pose template library: k-means over normalized poses, representative
selection, nearest-template lookup and JSON persistence."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .pose import NUM_KEYPOINTS, as_pose, normalize

LIBRARY_VERSION = 1
DIM = 2 * NUM_KEYPOINTS


class LibraryFormatError(ValueError):
    pass


@dataclass
class KMeansResult:
    centers: np.ndarray  # (k, 16, 2)
    labels: np.ndarray  # (n,)
    objective: list[float]  # within-cluster sum of squares after each iteration
    n_iter: int


def _as_matrix(poses) -> np.ndarray:
    arr = np.asarray(poses, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.reshape(len(arr), -1)
    if arr.ndim != 2 or arr.shape[1] != DIM:
        raise ValueError(f"expected poses as (n, 16, 2) or (n, 32), got {arr.shape}")
    return arr


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return np.array(centers)


def _means(x: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> np.ndarray:
    out = centers.copy()
    for j in range(len(centers)):
        members = x[labels == j]
        if len(members):
            out[j] = members.mean(axis=0)
    return out


def kmeans(poses, k_prime: int, seed: int = 0, max_iter: int = 100, n_init: int = 1) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding on 32-dim pose vectors.

    Empty clusters are re-seeded at the point farthest from its current center.
    Returned centers are always the exact means of the returned labels.  With
    ``n_init > 1`` the seeded restarts run independently and the one with the
    lowest final objective wins.
    """
    x = _as_matrix(poses)
    if len(x) == 0 or k_prime <= 0 or n_init <= 0:
        raise ValueError("kmeans needs at least one pose, k_prime >= 1 and n_init >= 1")
    n_distinct = len(np.unique(x, axis=0))
    if k_prime > n_distinct:
        raise ValueError(f"k_prime={k_prime} exceeds the {n_distinct} distinct poses")
    if n_init == 1:
        return _lloyd(x, k_prime, np.random.default_rng(seed), max_iter)
    runs = [_lloyd(x, k_prime, rng, max_iter) for rng in np.random.default_rng(seed).spawn(n_init)]
    return min(runs, key=lambda r: r.objective[-1])


def _lloyd(x: np.ndarray, k_prime: int, rng: np.random.Generator, max_iter: int) -> KMeansResult:
    centers = _kmeanspp(x, k_prime, rng)
    labels = np.full(len(x), -1)
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(x, centers)
        new_labels = d2.argmin(axis=1)
        counts = np.bincount(new_labels, minlength=k_prime)
        for j in np.flatnonzero(counts == 0):
            own = d2[np.arange(len(x)), new_labels]
            far = int(own.argmax())
            new_labels[far] = j
            centers[j] = x[far]
            d2[:, j] = ((x - centers[j]) ** 2).sum(1)
        centers = _means(x, new_labels, centers)
        history.append(float(((x - centers[new_labels]) ** 2).sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    labels = new_labels
    return KMeansResult(centers.reshape(-1, NUM_KEYPOINTS, 2), labels, history, it)


def kmeans_cluster(poses, k_prime: int, seed: int = 0, max_iter: int = 100, n_init: int = 1) -> np.ndarray:
    return kmeans(poses, k_prime, seed, max_iter, n_init).centers


def lloyd_step(poses, centers) -> tuple[np.ndarray, float]:
    """One assignment+update pass; returns new centers and their objective."""
    x = _as_matrix(poses)
    c = _as_matrix(centers)
    labels = _sq_dists(x, c).argmin(axis=1)
    c = _means(x, labels, c)
    return c.reshape(-1, NUM_KEYPOINTS, 2), float(((x - c[labels]) ** 2).sum())


def clustering_objective(poses, centers) -> float:
    x = _as_matrix(poses)
    return float(_sq_dists(x, _as_matrix(centers)).min(axis=1).sum())


@dataclass
class TemplateLibrary:
    templates: np.ndarray  # (K, 16, 2), each normalized
    ids: list[str]
    tags: list[Optional[str]] = field(default_factory=list)
    k_prime: Optional[int] = None
    seed: Optional[int] = None
    selection: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.templates = np.asarray(self.templates, dtype=np.float64).reshape(-1, NUM_KEYPOINTS, 2)
        if len(self.templates) < 1:
            raise ValueError("library needs at least one template")
        if len(self.ids) != len(self.templates):
            raise ValueError("one id per template required")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("template ids must be unique")
        if not self.tags:
            self.tags = [None] * len(self.templates)

    def __len__(self) -> int:
        return len(self.templates)

    @property
    def K(self) -> int:
        return len(self.templates)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.templates, dtype="<f8").tobytes())
        h.update(json.dumps(self.ids).encode())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, TemplateLibrary):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.templates.shape == other.templates.shape
            and bool(np.array_equal(self.templates, other.templates))
        )

    @classmethod
    def from_centers(cls, centers, **kw) -> "TemplateLibrary":
        templates = np.stack([normalize(c) for c in np.asarray(centers)])
        ids = kw.pop("ids", None) or [f"T{i:02d}" for i in range(len(templates))]
        return cls(templates, ids, **kw)


def select_representatives(
    centers,
    k: int,
    mode: str = "maxmin",
    explicit_indices: Optional[Sequence[int]] = None,
    *,
    k_prime: Optional[int] = None,
    seed: Optional[int] = None,
) -> TemplateLibrary:
    """Pick ``k`` of the cluster centers as the template library.

    ``explicit`` keeps the given indices in the given order.  ``maxmin`` starts
    from the center closest to the mean of all centers, greedily adds the
    center farthest from the chosen set, then runs single swaps while they
    raise the minimum pairwise distance.
    """
    c = _as_matrix(centers)
    n = len(c)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if mode == "explicit":
        if explicit_indices is None:
            raise ValueError("explicit mode requires explicit_indices")
        idx = [int(i) for i in explicit_indices]
        if len(idx) != k or len(set(idx)) != k or any(not 0 <= i < n for i in idx):
            raise ValueError(f"explicit_indices must be {k} distinct indices in [0, {n})")
    elif mode == "maxmin":
        idx = _maxmin(c, k)
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    return TemplateLibrary.from_centers(
        c[idx].reshape(-1, NUM_KEYPOINTS, 2),
        k_prime=n if k_prime is None else k_prime,
        seed=seed,
        selection=list(idx),
    )


def _maxmin(c: np.ndarray, k: int) -> list[int]:
    n = len(c)
    if k == n:
        return list(range(n))
    dist = np.sqrt(_sq_dists(c, c))
    chosen = [int(((c - c.mean(0)) ** 2).sum(1).argmin())]
    while len(chosen) < k:
        mind = dist[:, chosen].min(axis=1)
        mind[chosen] = -1.0
        chosen.append(int(mind.argmax()))

    def score(sel):
        sub = dist[np.ix_(sel, sel)]
        return sub[np.triu_indices(len(sel), 1)].min() if len(sel) > 1 else 0.0

    best = score(chosen)
    improved = True
    while improved:
        improved = False
        for pos in range(k):
            for cand in range(n):
                if cand in chosen:
                    continue
                trial = chosen[:pos] + [cand] + chosen[pos + 1:]
                s = score(trial)
                if s > best + 1e-12:
                    chosen, best, improved = trial, s, True
    return sorted(chosen)


def build_library(poses, k_prime: int, k: int, seed: int = 0, selection: str = "maxmin",
                  max_iter: int = 100, explicit_indices: Optional[Sequence[int]] = None,
                  n_init: int = 1) -> TemplateLibrary:
    """Normalize ``poses``, cluster into ``k_prime`` centers, keep ``k`` of them."""
    norm = np.stack([normalize(p) for p in poses])
    centers = kmeans_cluster(norm, k_prime, seed=seed, max_iter=max_iter, n_init=n_init)
    return select_representatives(centers, k, selection, explicit_indices, k_prime=k_prime, seed=seed)


def nearest_template(pose, library: TemplateLibrary) -> int:
    if library is None or len(library) == 0:
        raise ValueError("empty template library")
    q = normalize(pose).reshape(-1)
    d2 = ((library.templates.reshape(len(library), -1) - q) ** 2).sum(1)
    return int(np.argmin(d2))


def library_to_dict(library: TemplateLibrary) -> dict:
    return {
        "version": LIBRARY_VERSION,
        "K": library.K,
        "K_prime": library.k_prime,
        "seed": library.seed,
        "selection": [int(i) for i in library.selection],
        "ids": list(library.ids),
        "tags": list(library.tags),
        "templates": [[float(v) for v in t.reshape(-1)] for t in library.templates],
    }


def library_from_dict(doc, where: str = "library") -> TemplateLibrary:
    """Parse and validate a library document; errors name ``where`` and the field."""
    if not isinstance(doc, dict):
        raise LibraryFormatError(f"{where}: top level must be an object")
    for key in ("version", "K", "ids", "templates"):
        if key not in doc:
            raise LibraryFormatError(f"{where}: missing field {key!r}")
    if doc["version"] != LIBRARY_VERSION:
        raise LibraryFormatError(f"{where}: unsupported version {doc['version']!r}")
    rows = doc["templates"]
    if len(rows) != doc["K"] or len(doc["ids"]) != doc["K"]:
        raise LibraryFormatError(f"{where}: K={doc['K']} but {len(rows)} templates / {len(doc['ids'])} ids")
    for i, row in enumerate(rows):
        if not isinstance(row, list) or len(row) != DIM:
            got = len(row) if isinstance(row, list) else type(row).__name__
            raise LibraryFormatError(f"{where}: templates[{i}]: expected {DIM} numbers, got {got}")
        if not all(isinstance(v, (int, float)) and np.isfinite(v) for v in row):
            raise LibraryFormatError(f"{where}: templates[{i}]: non-numeric or non-finite value")
    try:
        return TemplateLibrary(
            np.array(rows, dtype=np.float64),
            [str(i) for i in doc["ids"]],
            tags=doc.get("tags") or [],
            k_prime=doc.get("K_prime"),
            seed=doc.get("seed"),
            selection=doc.get("selection") or [],
        )
    except ValueError as e:
        raise LibraryFormatError(f"{where}: {e}") from e


def save_library(library: TemplateLibrary, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(library_to_dict(library), indent=1))
    return path


def load_library(path) -> TemplateLibrary:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise LibraryFormatError(f"{path}: line {e.lineno}: {e.msg}") from e
    return library_from_dict(doc, str(path))


def validate_library(library: TemplateLibrary, tol: float = 1e-6) -> None:
    for i, t in enumerate(library.templates):
        as_pose(t)
        lo, hi = t.min(0), t.max(0)
        if np.abs(lo + 0.5).max() > tol or np.abs(hi - 0.5).max() > tol:
            raise ValueError(f"template {library.ids[i]} is not normalized")
