"""Core geometric types: rigid transforms, pinhole cameras, triangle meshes.

Conventions used everywhere downstream:
  * world/model coordinates are float64 arrays, shape (3,) or (N, 3)
  * image coordinates: u rightward, v downward, origin at the top-left
    corner, pixel (i, j) covers [j, j+1) x [i, i+1) with center (j+.5, i+.5)
  * camera space: +z in front of the camera
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BehindCamera, DataError

DEPTH_EPS = 1e-9


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix via polar decomposition (SVD)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U = U.copy()
        U[:, -1] *= -1.0
        Q = U @ Vt
    return Q


def rotation_from_axis_angle(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula; w is an axis-angle vector (radians)."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        K = skew(w)
        return np.eye(3) + K  # first-order, exact enough below 1e-12
    k = w / theta
    K = skew(k)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


@dataclass(frozen=True)
class SE3:
    """Rigid transform x -> R x + t with R orthonormal, det +1."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            R = orthonormalize(R)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "SE3":
        return SE3(np.eye(3), np.zeros(3))

    @staticmethod
    def from_axis_angle(w, t) -> "SE3":
        return SE3(rotation_from_axis_angle(np.asarray(w, float)), np.asarray(t, float))

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a batch (N, 3)."""
        x = np.asarray(x, dtype=np.float64)
        return x @ self.rotation.T + self.translation

    def compose(self, other: "SE3") -> "SE3":
        """self after other: (self ∘ other)(x) = self(other(x))."""
        return SE3(
            orthonormalize(self.rotation @ other.rotation),
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "SE3":
        Rt = self.rotation.T
        return SE3(Rt, -Rt @ self.translation)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M


def se3_apply(T: SE3, x: np.ndarray) -> np.ndarray:
    return T.apply(x)


def se3_inverse(T: SE3) -> SE3:
    return T.inverse()


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: extrinsic maps world to camera space."""

    extrinsic: SE3
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside image")

    def with_extrinsic(self, extrinsic: SE3) -> "Camera":
        return Camera(extrinsic, self.focal, self.cx, self.cy, self.width, self.height)


def project(cam: Camera, X: np.ndarray):
    """Project one world point; returns ((u, v), depth).

    Raises BehindCamera when the camera-space depth is <= DEPTH_EPS.
    """
    p = cam.extrinsic.apply(np.asarray(X, dtype=np.float64))
    z = float(p[2])
    if z <= DEPTH_EPS:
        raise BehindCamera(f"depth {z} <= {DEPTH_EPS}")
    u = cam.focal * p[0] / z + cam.cx
    v = cam.focal * p[1] / z + cam.cy
    return np.array([u, v]), z


def project_points(cam: Camera, X: np.ndarray):
    """Vectorized projection of (N, 3) points.

    Returns (uv (N, 2), depth (N,)); points at or behind the camera get
    depth <= 0 and NaN pixel coordinates instead of raising.
    """
    P = cam.extrinsic.apply(np.asarray(X, dtype=np.float64).reshape(-1, 3))
    z = P[:, 2].copy()
    safe = np.where(z > DEPTH_EPS, z, np.nan)
    uv = np.empty((len(P), 2))
    uv[:, 0] = cam.focal * P[:, 0] / safe + cam.cx
    uv[:, 1] = cam.focal * P[:, 1] / safe + cam.cy
    return uv, z


@dataclass
class Mesh:
    """Triangle mesh; vertices (N, 3) float64, faces (F, 3) int32."""

    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int32).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise ValueError("colors length must match vertices")
        n = len(self.vertices)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ValueError("face index out of range")
        if self.faces.size:
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face (repeated vertex index)")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    def edges(self) -> np.ndarray:
        """Unique undirected edges (E, 2), i < j, sorted lexicographically."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
        e = np.sort(e, axis=1)
        e = np.unique(e, axis=0)
        return e

    def vertex_neighbors(self) -> list[np.ndarray]:
        """1-ring neighbor indices per vertex."""
        nbrs: list[set] = [set() for _ in range(self.num_vertices)]
        for a, b in self.edges():
            nbrs[a].add(b)
            nbrs[b].add(a)
        return [np.array(sorted(s), dtype=np.int64) for s in nbrs]

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(vertices, self.faces, self.colors)

    def bbox_diagonal(self) -> float:
        if self.num_vertices == 0:
            return 0.0
        ext = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        return float(np.linalg.norm(ext))

    def is_edge_manifold(self) -> bool:
        """Every edge borders at most two faces."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts <= 2))


def write_obj(path, mesh: Mesh) -> None:
    """OBJ writer; vertex colors, when present, go on the v records."""
    lines = []
    if mesh.colors is None:
        for v in mesh.vertices:
            lines.append(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    else:
        for v, c in zip(mesh.vertices, mesh.colors):
            lines.append(
                f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}"
                f" {float(c[0])!r} {float(c[1])!r} {float(c[2])!r}"
            )
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> Mesh:
    verts, faces, colors = [], [], []
    has_color = False
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v":
            vals = [float(p) for p in parts[1:]]
            if len(vals) not in (3, 6):
                raise DataError(f"bad v record: {line}")
            verts.append(vals[:3])
            if len(vals) == 6:
                has_color = True
                colors.append(vals[3:])
            else:
                colors.append([0.5, 0.5, 0.5])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            if len(idx) != 3:
                raise DataError("only triangle faces supported")
            faces.append(idx)
    if not verts:
        raise DataError(f"no vertices in {path}")
    return Mesh(
        np.array(verts),
        np.array(faces, dtype=np.int32).reshape(-1, 3),
        np.array(colors) if has_color else None,
    )
