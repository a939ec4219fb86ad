"""Vector primitives shared by every other module, plus the embedding text format.

All arithmetic is float64. Reductions run in a fixed order so repeated runs
are bitwise identical.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np


def as_vector(v) -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"expected a non-empty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector contains non-finite entries")
    return arr


def _norm(v: np.ndarray) -> float:
    return math.sqrt(float(np.dot(v, v)))


def l2_normalize(v) -> np.ndarray:
    v = as_vector(v)
    n = _norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def cosine_similarity(a, b) -> float:
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = _norm(a), _norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for a zero vector")
    s = float(np.dot(a, b)) / (na * nb)
    # rounding can push |s| a hair past 1
    return min(1.0, max(-1.0, s))


def similarity_matrix(texts, images) -> np.ndarray:
    """Entry (i, j) is ``cosine_similarity(texts[i], images[j])``.

    Rows index texts, columns index images. Built from per-pair calls so the
    result is bitwise identical to calling :func:`cosine_similarity` directly.
    """
    texts = list(texts)
    images = list(images)
    if len(texts) == 0 or len(texts) != len(images):
        raise ValueError(f"need equal, non-zero counts; got {len(texts)} texts and {len(images)} images")
    n = len(texts)
    out = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(n):
            out[i, j] = cosine_similarity(texts[i], images[j])
    return out


def row_cosine(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Cosine similarity along the last axis of two broadcastable arrays."""
    nu = np.sqrt(np.sum(u * u, axis=-1))
    nv = np.sqrt(np.sum(v * v, axis=-1))
    return np.sum(u * v, axis=-1) / (nu * nv)


def row_cosine_grad(u: np.ndarray, v: np.ndarray, g: np.ndarray):
    """Backprop ``g`` (upstream d/ds) through ``s = row_cosine(u, v)``.

    Returns ``(du, dv)`` with the shapes of ``u`` and ``v`` after broadcasting.
    """
    nu = np.sqrt(np.sum(u * u, axis=-1, keepdims=True))
    nv = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    s = np.sum(u * v, axis=-1, keepdims=True) / (nu * nv)
    g = g[..., None]
    du = g * (v / (nu * nv) - s * u / (nu * nu))
    dv = g * (u / (nu * nv) - s * v / (nv * nv))
    return du, dv


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs cosine between rows of ``a`` (M x D) and rows of ``b`` (P x D)."""
    na = np.sqrt(np.sum(a * a, axis=1))
    nb = np.sqrt(np.sum(b * b, axis=1))
    return (a @ b.T) / np.outer(na, nb)


def cosine_matrix_grad(a: np.ndarray, b: np.ndarray, g: np.ndarray):
    """Backprop upstream ``g`` (M x P) through :func:`cosine_matrix`."""
    na = np.sqrt(np.sum(a * a, axis=1))
    nb = np.sqrt(np.sum(b * b, axis=1))
    ah = a / na[:, None]
    bh = b / nb[:, None]
    s = ah @ bh.T
    da = (g @ bh - np.sum(g * s, axis=1)[:, None] * ah) / na[:, None]
    db = (g.T @ ah - np.sum(g * s, axis=0)[:, None] * bh) / nb[:, None]
    return da, db


# -- embedding text format -------------------------------------------------
# "#dim D" header, then one "id<TAB>v1 v2 ... vD" record per line.


def format_float(x: float) -> str:
    return repr(float(x))


def write_embeddings(path, records: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> None:
    items = list(records.items()) if isinstance(records, Mapping) else list(records)
    dims = {np.asarray(v).shape[0] for _, v in items}
    if len(dims) > 1:
        raise ValueError(f"inconsistent dims: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#dim {dim}\n")
        fh.write(format_embedding_lines(items))


def format_embedding_lines(items) -> str:
    lines = []
    for key, vec in items:
        if "\t" in key or "\n" in key:
            raise ValueError(f"record id may not contain tabs or newlines: {key!r}")
        lines.append(key + "\t" + " ".join(format_float(x) for x in np.asarray(vec, dtype=np.float64)))
    return "".join(line + "\n" for line in lines)


def parse_embedding_lines(lines: Iterable[str], dim: int) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines, start=2):
        line = line.rstrip("\n")
        if not line:
            continue
        key, sep, body = line.partition("\t")
        if not sep:
            raise ValueError(f"line {lineno}: missing tab separator")
        vec = np.array([float(tok) for tok in body.split()], dtype=np.float64)
        if vec.shape[0] != dim:
            raise ValueError(f"line {lineno}: expected {dim} values, got {vec.shape[0]}")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate id {key!r}")
        out[key] = vec
    return out


def read_embeddings(path) -> dict[str, np.ndarray]:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("#dim "):
        raise ValueError(f"{path}: missing '#dim D' header")
    dim = int(text[0].split()[1])
    return parse_embedding_lines(text[1:], dim)
