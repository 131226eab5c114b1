"""Shared random orthonormal projectors and project/lift/backfill mechanics.

A projector P (r x d, orthonormal rows) splits any d x m matrix V into
subspace coordinates P V and the orthogonal residual V - P^T P V. Model
columns share one projector: P acts on the feature (row) index, so the m
output coordinates are handled independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_U64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_TAG_PROJECTOR = 1


@dataclass(frozen=True)
class Projector:
    P: np.ndarray  # (r, d), orthonormal rows
    r: int
    d: int
    seed: int
    round: int  # round the matrix was generated for


@dataclass(frozen=True)
class Decomposition:
    proj: np.ndarray  # (r, m) subspace coordinates
    res: np.ndarray  # (d, m) orthogonal residual


def generate_projector(d: int, r: int, seed: int, round: int) -> Projector:
    """Haar-like orthonormal rows: Gaussian d x r matrix, QR, sign-fixed.

    Deterministic in (seed, round); the diagonal of the triangular factor is
    forced nonnegative so the result does not depend on LAPACK sign choices.
    """
    if not 1 <= r <= d:
        raise ValueError(f"need 1 <= r <= d, got r={r}, d={d}")
    key = (int(np.uint64(seed) & _U64), _TAG_PROJECTOR, int(round))
    g = np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
    M = g.standard_normal((d, r))
    Q, R = np.linalg.qr(M)
    Q = Q * np.sign(np.diag(R))[None, :]
    return Projector(P=np.ascontiguousarray(Q.T), r=r, d=d, seed=seed, round=round)


def decompose(proj: Projector, V: np.ndarray) -> Decomposition:
    """Split V into (P V, V - P^T P V)."""
    if V.shape[0] != proj.d:
        raise ValueError(f"V has {V.shape[0]} rows, projector expects {proj.d}")
    W = proj.P @ V
    return Decomposition(proj=W, res=V - proj.P.T @ W)


def lift(proj: Projector, W: np.ndarray) -> np.ndarray:
    """Map subspace coordinates back to the ambient space: P^T W."""
    if W.shape[0] != proj.r:
        raise ValueError(f"W has {W.shape[0]} rows, projector expects {proj.r}")
    return proj.P.T @ W


def backfill(proj: Projector, new_proj: np.ndarray, old_res: np.ndarray,
             verify: bool = False) -> np.ndarray:
    """Recombine updated subspace coordinates with the carried residual.

    Returns P^T new_proj + old_res. With verify=True, checks that old_res is
    orthogonal to the row space of P (within 1e-8, relative).
    """
    if verify:
        leak = float(np.linalg.norm(proj.P @ old_res))
        scale = 1.0 + float(np.linalg.norm(old_res))
        if leak > 1e-8 * scale:
            raise ValueError(
                f"residual leaks into the subspace: |P res| = {leak:.3e}"
            )
    return proj.P.T @ new_proj + old_res
