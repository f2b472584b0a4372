"""Local orthogonal alignment between text and image embedding neighborhoods.

Text and image embeddings of a contrastively trained encoder live on
slightly offset sub-manifolds of the same sphere.  For a query text
embedding we gather its nearest caption-image pairs from the dataset and
solve the orthogonal Procrustes problem over them, producing a map that
carries the query into the image sub-manifold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-8
_UNIT_TOL = 1e-6


@dataclass
class PairedEmbeddings:
    """Column-paired text/image embedding matrices, both d x k."""

    text: np.ndarray
    image: np.ndarray

    def __post_init__(self):
        self.text = np.asarray(self.text, dtype=np.float64)
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.text.ndim != 2 or self.text.shape != self.image.shape:
            raise ValueError(
                f"paired matrices must share a (d, k) shape, got "
                f"{self.text.shape} vs {self.image.shape}"
            )
        for name, m in (("text", self.text), ("image", self.image)):
            norms = np.linalg.norm(m, axis=0)
            if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
                raise ValueError(f"{name} columns must be unit norm within {_UNIT_TOL}")

    @property
    def dim(self) -> int:
        return self.text.shape[0]

    @property
    def count(self) -> int:
        return self.text.shape[1]


@dataclass
class OrthogonalMap:
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        d = self.matrix.shape[0]
        if self.matrix.shape != (d, d):
            raise ValueError("orthogonal map must be square")
        err = np.linalg.norm(self.matrix.T @ self.matrix - np.eye(d))
        if err >= ORTHO_TOL:
            raise ValueError(f"matrix is not orthogonal: ||R^T R - I||_F = {err:.2e}")


def solve_procrustes(pairs: PairedEmbeddings) -> OrthogonalMap:
    """Closed-form minimizer of ||R @ text - image||_F over orthogonal R.

    R = U V^T from the SVD of image @ text^T.  The solution ranges over the
    full orthogonal group (reflections allowed); computed in 64-bit.
    """
    if not (np.all(np.isfinite(pairs.text)) and np.all(np.isfinite(pairs.image))):
        raise ValueError("paired embeddings contain non-finite values")
    m = pairs.image @ pairs.text.T
    u, _, vt = np.linalg.svd(m)
    return OrthogonalMap(u @ vt)


def project_text(e_t: np.ndarray, mapping: OrthogonalMap) -> np.ndarray:
    """Carry a text embedding into the image sub-manifold; norm is preserved."""
    e_t = np.asarray(e_t, dtype=np.float64)
    if e_t.shape != (mapping.matrix.shape[0],):
        raise ValueError(
            f"embedding dim {e_t.shape} does not match map dim {mapping.matrix.shape[0]}"
        )
    return mapping.matrix @ e_t


def alignment_residual(pairs: PairedEmbeddings, mapping: OrthogonalMap) -> float:
    return float(np.linalg.norm(mapping.matrix @ pairs.text - pairs.image))


def build_local_pairs(e_t: np.ndarray, store, p: int) -> PairedEmbeddings:
    """The p stored pairs whose text embeddings are closest to ``e_t``.

    Exact linear scan, cosine similarity, ties broken by ascending entry id;
    columns are ordered by decreasing similarity.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    n = len(store.entries)
    if n < p:
        raise ValueError(
            f"store has {n} entries but p = {p}; use a smaller neighbor count"
        )
    e = np.asarray(e_t, dtype=np.float64)
    sims = store.text_matrix.astype(np.float64) @ e
    ids = np.array([entry.id for entry in store.entries])
    order = np.lexsort((ids, -sims))[:p]
    return PairedEmbeddings(
        text=store.text_matrix[order].T.astype(np.float64),
        image=store.image_matrix[order].T.astype(np.float64),
    )
