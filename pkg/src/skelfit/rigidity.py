"""Entropy-derived rigidity coefficients and the dynamic rigidity loss.

Vertices whose skinning rows concentrate on one bone sit inside a rigid
part and get heavily weighted edge-length preservation; vertices with
spread-out rows sit near joints and deform freely. The ARAP variant is the
same edge-length penalty with unit weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotNormalized, TopologyMismatch
from .geom import Mesh

DEFAULT_LAMBDA = 0.1
ENTROPY_CLAMP = 1e-3


def entropy(w_row: np.ndarray, lam: float = DEFAULT_LAMBDA) -> float:
    """Sum of w*log2(w) plus the stabilization constant; 0*log0 = 0.

    Ranges over [lam - log2(B), lam]; crosses zero for B >= 2, hence the
    clamping in rigidity_coefficients.
    """
    w = np.asarray(w_row, dtype=np.float64)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
        raise NotNormalized(f"row sums to {w.sum()}")
    nz = w[w > 0]
    return float(np.sum(nz * np.log2(nz)) + lam)


def _clamped_entropies(W: np.ndarray, lam: float, eps: float) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    logs = np.where(W > 0, np.log2(np.where(W > 0, W, 1.0)), 0.0)
    E = (W * logs).sum(axis=1) + lam
    sign = np.where(E >= 0, 1.0, -1.0)
    return sign * np.maximum(np.abs(E), eps)


@dataclass
class RigidityCoefficients:
    edges: np.ndarray  # (E, 2) int, i < j
    values: np.ndarray  # (E,) signed coefficients
    lam: float = DEFAULT_LAMBDA

    def abs_values(self) -> np.ndarray:
        """Nonnegative weights used by the loss (see module decisions)."""
        return np.abs(self.values)

    def get(self, i: int, j: int) -> float:
        a, b = (i, j) if i < j else (j, i)
        hit = np.nonzero((self.edges[:, 0] == a) & (self.edges[:, 1] == b))[0]
        return float(self.values[hit[0]]) if len(hit) else 0.0


def rigidity_coefficients(
    W: np.ndarray,
    edges: np.ndarray,
    lam: float = DEFAULT_LAMBDA,
    eps: float = ENTROPY_CLAMP,
) -> RigidityCoefficients:
    """R_ij = 1 / (E(i) E(j)) on mesh edges, entropies clamped away from 0."""
    edges = np.sort(np.asarray(edges, dtype=np.int64).reshape(-1, 2), axis=1)
    E = _clamped_entropies(W, lam, eps)
    values = 1.0 / (E[edges[:, 0]] * E[edges[:, 1]])
    return RigidityCoefficients(edges, values, lam)


def _edge_lengths(vertices: np.ndarray, edges: np.ndarray) -> np.ndarray:
    d = vertices[edges[:, 0]] - vertices[edges[:, 1]]
    return np.linalg.norm(d, axis=1)


def _check_topology(mesh_t: Mesh, mesh_t1: Mesh) -> None:
    if mesh_t.num_vertices != mesh_t1.num_vertices or not np.array_equal(
        mesh_t.faces, mesh_t1.faces
    ):
        raise TopologyMismatch("meshes differ in vertex count or faces")


def dr_loss(mesh_t: Mesh, mesh_t1: Mesh, R: RigidityCoefficients) -> float:
    """Rigidity-weighted sum of absolute edge-length changes (>= 0)."""
    _check_topology(mesh_t, mesh_t1)
    lt = _edge_lengths(mesh_t.vertices, R.edges)
    lt1 = _edge_lengths(mesh_t1.vertices, R.edges)
    return float(np.sum(R.abs_values() * np.abs(lt - lt1)))


def dr_loss_grad(mesh_t: Mesh, mesh_t1: Mesh, R: RigidityCoefficients) -> np.ndarray:
    """Gradient of dr_loss with respect to mesh_t1 vertices.

    Sub-gradient 0 at kinks (equal lengths) and at zero-length edges.
    """
    _check_topology(mesh_t, mesh_t1)
    e = R.edges
    lt = _edge_lengths(mesh_t.vertices, e)
    d1 = mesh_t1.vertices[e[:, 0]] - mesh_t1.vertices[e[:, 1]]
    lt1 = np.linalg.norm(d1, axis=1)
    safe = np.maximum(lt1, 1e-15)
    coef = R.abs_values() * np.sign(lt1 - lt) / safe
    coef[lt1 < 1e-15] = 0.0
    contrib = coef[:, None] * d1
    grad = np.zeros_like(mesh_t1.vertices)
    np.add.at(grad, e[:, 0], contrib)
    np.add.at(grad, e[:, 1], -contrib)
    return grad


def arap_loss(mesh_t: Mesh, mesh_t1: Mesh, edges: np.ndarray) -> float:
    """Edge-length preservation with unit weights."""
    _check_topology(mesh_t, mesh_t1)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    lt = _edge_lengths(mesh_t.vertices, edges)
    lt1 = _edge_lengths(mesh_t1.vertices, edges)
    return float(np.sum(np.abs(lt - lt1)))
