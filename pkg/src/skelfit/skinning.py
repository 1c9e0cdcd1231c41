"""Gaussian-mixture skinning weights and linear blend skinning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, SingularBlend
from .geom import SE3, Camera, Mesh
from .skeleton import Skeleton

SINGULAR_DET = 1e-12


@dataclass
class FrameParams:
    """Per-frame pose: root transform, one transform per bone, camera."""

    root: SE3
    bone_transforms: list[SE3]
    camera: Camera

    def require_bones(self, B: int) -> None:
        if len(self.bone_transforms) != B:
            raise DimensionMismatch(
                f"{len(self.bone_transforms)} bone transforms for {B} bones"
            )


def skinning_weights(mesh: Mesh, skeleton: Skeleton) -> np.ndarray:
    """Row-normalized Gaussian responsibilities, evaluated in log space.

    W[n, b] ∝ exp(-0.5 (X_n - C_b)^T Q_b (X_n - C_b)); each row sums to 1
    and never underflows to all-zero.
    """
    return weights_for_points(mesh.vertices, skeleton)


def weights_for_points(points: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    X = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    B = skeleton.num_bones
    log_w = np.empty((len(X), B))
    for b in range(B):
        d = X - skeleton.centers[b]
        log_w[:, b] = -0.5 * np.einsum("ni,ij,nj->n", d, skeleton.precisions[b], d)
    log_w -= log_w.max(axis=1, keepdims=True)
    W = np.exp(log_w)
    W /= W.sum(axis=1, keepdims=True)
    return W


def validate_weights(W: np.ndarray, tol: float = 1e-6) -> None:
    W = np.asarray(W)
    if np.any(W < 0):
        raise ValueError("negative skinning weight")
    if np.abs(W.sum(axis=1) - 1.0).max() > tol:
        raise ValueError("skinning rows must sum to 1")


def blend_transforms(W: np.ndarray, fp: FrameParams):
    """Per-vertex blended affine maps including the root.

    Returns (A, t): A (N, 3, 3), t (N, 3) with x -> A x + t.
    """
    B = len(fp.bone_transforms)
    if W.shape[1] != B:
        raise DimensionMismatch(f"W has {W.shape[1]} bones, params have {B}")
    R = np.stack([T.rotation for T in fp.bone_transforms])
    t = np.stack([T.translation for T in fp.bone_transforms])
    A = np.einsum("nb,bij->nij", W, R)
    tb = W @ t
    A = np.einsum("ij,njk->nik", fp.root.rotation, A)
    tb = tb @ fp.root.rotation.T + fp.root.translation
    return A, tb


def forward_skin(mesh: Mesh, W: np.ndarray, fp: FrameParams) -> Mesh:
    """Deform canonical vertices by the weighted sum of bone transforms,
    then the root transform. Faces and colors pass through unchanged."""
    if len(W) != mesh.num_vertices:
        raise DimensionMismatch(f"W has {len(W)} rows for {mesh.num_vertices} vertices")
    A, t = blend_transforms(W, fp)
    out = np.einsum("nij,nj->ni", A, mesh.vertices) + t
    return mesh.with_vertices(out)


def backward_skin(mesh_t: Mesh, W: np.ndarray, fp: FrameParams) -> Mesh:
    """Exact inverse of forward_skin: invert each vertex's blended affine."""
    if len(W) != mesh_t.num_vertices:
        raise DimensionMismatch(f"W has {len(W)} rows for {mesh_t.num_vertices} vertices")
    A, t = blend_transforms(W, fp)
    det = np.linalg.det(A)
    bad = np.abs(det) < SINGULAR_DET
    if np.any(bad):
        raise SingularBlend(
            f"blended transform singular at vertex {int(np.argmax(bad))} (|det|={np.abs(det).min():.3e})"
        )
    rhs = mesh_t.vertices - t
    out = np.linalg.solve(A, rhs[..., None])[..., 0]
    return mesh_t.with_vertices(out)
