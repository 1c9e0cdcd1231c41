"""Skeleton data model: Gaussian bones linked by joints into a tree.

A bone is a Gaussian ellipsoid (center, 3x3 precision matrix) plus a scalar
length; a joint connects two bones and carries a 3D position. The induced
bone graph must stay connected and acyclic through every edit.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, InvalidSkeleton


@dataclass
class Skeleton:
    centers: np.ndarray  # (B, 3)
    precisions: np.ndarray  # (B, 3, 3) symmetric positive-definite
    lengths: np.ndarray  # (B,)
    joint_bones: np.ndarray  # (J, 2) int
    joint_positions: np.ndarray  # (J, 3)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        self.precisions = np.asarray(self.precisions, dtype=np.float64).reshape(-1, 3, 3)
        self.lengths = np.asarray(self.lengths, dtype=np.float64).reshape(-1)
        self.joint_bones = np.asarray(self.joint_bones, dtype=np.int64).reshape(-1, 2)
        self.joint_positions = np.asarray(self.joint_positions, dtype=np.float64).reshape(-1, 3)

    @property
    def num_bones(self) -> int:
        return len(self.centers)

    @property
    def num_joints(self) -> int:
        return len(self.joint_bones)

    def copy(self) -> "Skeleton":
        return Skeleton(
            self.centers.copy(),
            self.precisions.copy(),
            self.lengths.copy(),
            self.joint_bones.copy(),
            self.joint_positions.copy(),
        )

    def validate(self) -> None:
        """Raise InvalidSkeleton on any structural violation."""
        B, J = self.num_bones, self.num_joints
        if B == 0:
            raise InvalidSkeleton("no bones")
        if not np.all(np.isfinite(self.centers)) or not np.all(np.isfinite(self.joint_positions)):
            raise InvalidSkeleton("non-finite coordinates")
        if np.any(self.lengths <= 0):
            raise InvalidSkeleton("non-positive bone length")
        for b in range(B):
            Q = self.precisions[b]
            if np.abs(Q - Q.T).max() > 1e-8:
                raise InvalidSkeleton(f"precision {b} not symmetric")
            if np.linalg.eigvalsh(Q).min() <= 0:
                raise InvalidSkeleton(f"precision {b} not positive-definite")
        if J != B - 1:
            raise InvalidSkeleton(f"{J} joints cannot form a tree over {B} bones")
        parent = list(range(B))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for j in range(J):
            a, b = int(self.joint_bones[j, 0]), int(self.joint_bones[j, 1])
            if a == b:
                raise InvalidSkeleton(f"joint {j} connects bone {a} to itself")
            if not (0 <= a < B and 0 <= b < B):
                raise InvalidSkeleton(f"joint {j} references missing bone")
            ra, rb = find(a), find(b)
            if ra == rb:
                raise InvalidSkeleton(f"joint {j} closes a cycle")
            parent[ra] = rb
        if len({find(i) for i in range(B)}) != 1:
            raise InvalidSkeleton("bone graph is disconnected")

    # -- adjacency queries -------------------------------------------------

    def joints_of_bone(self, b: int) -> list[int]:
        return [j for j in range(self.num_joints) if b in self.joint_bones[j]]

    def degree(self, b: int) -> int:
        return len(self.joints_of_bone(b))

    def neighbors(self, b: int) -> list[int]:
        out = []
        for j in self.joints_of_bone(b):
            a, c = self.joint_bones[j]
            out.append(int(c if a == b else a))
        return out

    def adjacent_pairs(self) -> list[tuple[int, int, int]]:
        """(bone_a, bone_b, joint_index) triples, a < b."""
        out = []
        for j in range(self.num_joints):
            a, b = sorted(int(x) for x in self.joint_bones[j])
            out.append((a, b, j))
        return out

    def endpoint_bones(self) -> list[int]:
        """Bones with at most one joint (includes an isolated single bone)."""
        return [b for b in range(self.num_bones) if self.degree(b) <= 1]

    def structure_signature(self) -> tuple:
        """Hashable topology summary used for convergence checks."""
        pairs = tuple(sorted((min(int(a), int(b)), max(int(a), int(b))) for a, b in self.joint_bones))
        return (self.num_bones, pairs)

    def principal_axis(self, b: int) -> np.ndarray:
        """Unit vector along the bone's longest ellipsoid axis."""
        w, V = np.linalg.eigh(self.precisions[b])
        return V[:, 0]  # smallest precision eigenvalue = largest radius


def precision_from_axes(axes: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Q = V^T diag(r^-2) V for row-stacked axis matrix V."""
    axes = np.asarray(axes, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    lam = np.diag(1.0 / radii**2)
    return axes.T @ lam @ axes


# ---------------------------------------------------------------------------
# Interchange format (.skel): plain text, repr-precision floats so that a
# write/read/write cycle is byte-identical.


def write_skel(path, skel: Skeleton) -> None:
    lines = [f"skel {skel.num_bones} {skel.num_joints}"]
    for b in range(skel.num_bones):
        vals = [*skel.centers[b], *skel.precisions[b].reshape(9), skel.lengths[b]]
        lines.append(" ".join(repr(float(v)) for v in vals))
    for j in range(skel.num_joints):
        a, b = skel.joint_bones[j]
        pos = " ".join(repr(float(v)) for v in skel.joint_positions[j])
        lines.append(f"{int(a)} {int(b)} {pos}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_skel(path) -> Skeleton:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    head = lines[0].split()
    if len(head) != 3 or head[0] != "skel":
        raise DataError(f"{path}: not a skel file")
    B, J = int(head[1]), int(head[2])
    if len(lines) != 1 + B + J:
        raise DataError(f"{path}: expected {1 + B + J} lines, found {len(lines)}")
    centers = np.zeros((B, 3))
    precisions = np.zeros((B, 3, 3))
    lengths = np.zeros(B)
    for b in range(B):
        vals = [float(x) for x in lines[1 + b].split()]
        if len(vals) != 13:
            raise DataError(f"{path}: bone line {b} has {len(vals)} fields")
        centers[b] = vals[:3]
        precisions[b] = np.array(vals[3:12]).reshape(3, 3)
        lengths[b] = vals[12]
    joint_bones = np.zeros((J, 2), dtype=np.int64)
    joint_positions = np.zeros((J, 3))
    for j in range(J):
        parts = lines[1 + B + j].split()
        if len(parts) != 5:
            raise DataError(f"{path}: joint line {j} has {len(parts)} fields")
        joint_bones[j] = [int(parts[0]), int(parts[1])]
        joint_positions[j] = [float(x) for x in parts[2:]]
    return Skeleton(centers, precisions, lengths, joint_bones, joint_positions)
