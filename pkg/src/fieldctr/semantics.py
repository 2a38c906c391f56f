"""Field semantic embeddings and the field-pair interaction matrix.

Semantic vectors arrive from an external encoder as JSON lines
(``{"field": name, "embedding": [...]}``) or from :func:`synthetic_encode`,
a deterministic stand-in used for tests and desk experiments.
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import FieldSchema


class FieldEmbeddingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FieldEmbeddingMatrix:
    """``H`` has one row per schema field, in schema order."""

    H: np.ndarray
    names: tuple[str, ...]
    provenance: str = "loaded"

    def __post_init__(self):
        if self.H.ndim != 2 or self.H.shape[0] != len(self.names):
            raise FieldEmbeddingError(f"H must be (K, D_sem) with K={len(self.names)}, got {self.H.shape}")
        zero = np.flatnonzero(~np.any(self.H != 0, axis=1))
        if zero.size:
            raise FieldEmbeddingError(f"zero embedding for field(s) {[self.names[i] for i in zero]}")
        if not np.all(np.isfinite(self.H)):
            raise FieldEmbeddingError("field embeddings contain non-finite values")

    @property
    def K(self) -> int:
        return self.H.shape[0]

    @property
    def dim(self) -> int:
        return self.H.shape[1]


def load_field_embeddings(path, schema: FieldSchema) -> FieldEmbeddingMatrix:
    records = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                name, vec = rec["field"], rec["embedding"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FieldEmbeddingError(f"{path}:{lineno}: bad record ({exc})") from None
            vec = np.asarray(vec, dtype=np.float64)
            if vec.ndim != 1 or vec.size == 0:
                raise FieldEmbeddingError(f"{path}:{lineno}: embedding must be a non-empty list of numbers")
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise FieldEmbeddingError(
                    f"{path}:{lineno}: field {name!r} has length {vec.size}, expected {dim}"
                )
            if name in records:
                raise FieldEmbeddingError(f"{path}:{lineno}: duplicate record for field {name!r}")
            records[name] = vec

    missing = [n for n in schema.names if n not in records]
    if missing:
        raise FieldEmbeddingError(f"{path}: no embedding for field(s) {missing}")
    extra = sorted(set(records) - set(schema.names))
    if extra:
        warnings.warn(f"{path}: ignoring embeddings for unknown field(s) {extra}", stacklevel=2)
    for n in schema.names:
        if not np.any(records[n] != 0):
            raise FieldEmbeddingError(f"{path}: zero embedding for field {n!r}")
    H = np.stack([records[n] for n in schema.names])
    return FieldEmbeddingMatrix(H, tuple(schema.names), "loaded")


def save_field_embeddings(fem: FieldEmbeddingMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for name, row in zip(fem.names, fem.H):
            fh.write(json.dumps({"field": name, "embedding": [float(v) for v in row]}) + "\n")


def _trigram_vector(text: str, dim: int, seed: int) -> np.ndarray:
    vec = np.zeros(dim)
    padded = f"  {text.lower()} "
    key = seed.to_bytes(8, "little", signed=True)
    for i in range(len(padded) - 2):
        digest = hashlib.blake2b(padded[i:i + 3].encode("utf-8"), digest_size=8, key=key).digest()
        vec[int.from_bytes(digest, "little") % dim] += 1.0
    return vec / np.linalg.norm(vec)


# within-cluster cosine of structured embeddings (unlisted pairs are exactly 0)
_CLUSTER_COS = 0.95


def _clusters(names: Sequence[str], pairs) -> list[list[int]]:
    parent = list(range(len(names)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    listed = set()
    for a, b in pairs:
        for n in (a, b):
            if n not in names:
                raise FieldEmbeddingError(f"cluster_spec references unknown field {n!r}")
        i, j = names.index(a), names.index(b)
        listed.add(frozenset((i, j)))
        parent[find(i)] = find(j)

    groups: dict[int, list[int]] = {}
    for i in range(len(names)):
        groups.setdefault(find(i), []).append(i)
    out = sorted(groups.values())
    for g in out:
        for x in range(len(g)):
            for y in range(x + 1, len(g)):
                if frozenset((g[x], g[y])) not in listed:
                    raise FieldEmbeddingError(
                        f"cluster_spec is not closed: {names[g[x]]!r} and {names[g[y]]!r} are linked "
                        "through other fields but their pair is not listed"
                    )
    return out


def synthetic_encode(schema: FieldSchema, mode: str = "raw", seed: int = 0, dim: int = 64,
                     cluster_spec=None) -> FieldEmbeddingMatrix:
    """Deterministic stand-in for an LLM encoder.

    ``raw`` hashes character trigrams of each field description into ``dim``
    buckets and L2-normalizes.  ``structured`` returns unit vectors where every
    pair in ``cluster_spec`` has cosine 0.95 and every other pair cosine 0.
    """
    if dim < 2:
        raise FieldEmbeddingError(f"dim must be >= 2, got {dim}")
    names = schema.names
    if mode == "raw":
        H = np.stack([_trigram_vector(f.description, dim, seed) for f in schema.fields])
        return FieldEmbeddingMatrix(H, tuple(names), "synthetic_raw")
    if mode != "structured":
        raise FieldEmbeddingError(f"unknown synthetic mode {mode!r}")

    groups = _clusters(names, cluster_spec or [])
    n_private = sum(len(g) for g in groups if len(g) > 1)
    need = len(groups) + n_private
    if dim < need:
        raise FieldEmbeddingError(f"structured mode needs dim >= {need} for this cluster_spec, got {dim}")
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((dim, need)))
    H = np.zeros((len(names), dim))
    nxt = len(groups)
    for c, g in enumerate(groups):
        if len(g) == 1:
            H[g[0]] = Q[:, c]
            continue
        for i in g:
            H[i] = np.sqrt(_CLUSTER_COS) * Q[:, c] + np.sqrt(1 - _CLUSTER_COS) * Q[:, nxt]
            nxt += 1
    return FieldEmbeddingMatrix(H, tuple(names), "synthetic_structured")


def init_adaptor(dim_sem: int, dim: int, rng: np.random.Generator, init: str = "uniform"):
    """Adaptor weights ``(W, bias)``; ``identity`` requires ``dim_sem == dim``."""
    if init == "identity":
        if dim_sem != dim:
            raise ValueError(f"identity adaptor needs dim_sem == dim, got {dim_sem} != {dim}")
        return np.eye(dim), np.zeros(dim)
    if init != "uniform":
        raise ValueError(f"unknown adaptor init {init!r}")
    bound = 1.0 / np.sqrt(dim_sem)
    return rng.uniform(-bound, bound, size=(dim_sem, dim)), np.zeros(dim)


def adapt_field_embedding(H: np.ndarray, W: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Map semantic rows into model space: ``h'_k = W^T h_k + bias``."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or W.ndim != 2 or H.shape[1] != W.shape[0] or bias.shape != (W.shape[1],):
        raise ValueError(f"shape mismatch: H {H.shape}, W {W.shape}, bias {bias.shape}")
    return H @ W + bias


def adaptor_backward(H: np.ndarray, grad_out: np.ndarray):
    """Gradients of a scalar wrt ``(W, bias)`` given its gradient wrt the adapted rows."""
    return H.T @ grad_out, grad_out.sum(axis=0)


@dataclass(frozen=True, eq=False)
class InteractionMatrix:
    M: np.ndarray
    names: tuple[str, ...]
    stage: str = "raw"


def field_interaction_matrix(fem: FieldEmbeddingMatrix) -> InteractionMatrix:
    """Pairwise cosine similarity of field embeddings, exact unit diagonal."""
    H = fem.H
    norms = np.linalg.norm(H, axis=1)
    if np.any(norms == 0):
        raise FieldEmbeddingError("cosine undefined for a zero field embedding")
    Hn = H / norms[:, None]
    M = Hn @ Hn.T
    M = np.clip((M + M.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(M, 1.0)
    return InteractionMatrix(M, fem.names, "raw")


def rescale_interactions(raw: InteractionMatrix, scale: float, shift: float) -> InteractionMatrix:
    if raw.stage != "raw":
        raise ValueError("rescale_interactions expects a raw interaction matrix")
    return InteractionMatrix(scale * raw.M + shift, raw.names, "rescaled")


def export_interaction_csv(im: InteractionMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + list(im.names))
        for name, row in zip(im.names, im.M):
            w.writerow([name] + [repr(float(v)) for v in row])


def read_interaction_csv(path) -> InteractionMatrix:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    names = tuple(rows[0][1:])
    M = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    if [r[0] for r in rows[1:]] != list(names):
        raise ValueError(f"{path}: row labels do not match the header")
    return InteractionMatrix(M, names, "raw")
