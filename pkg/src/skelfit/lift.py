"""Lift a 2D skeleton graph to an initial 3D skeleton and coarse mesh.

Model coordinates are canonical-frame pixels re-centered on the silhouette
centroid: x = u - mean_u, y = v - mean_v, z = 0 on the symmetry plane.
Symmetric part pairs are pushed to opposite sides of z = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError, EmptyGraph, InvalidPairs
from .geom import Mesh
from .silhouette import SkeletonGraph2D, _polyline_length
from .skeleton import Skeleton, precision_from_axes

MIN_RADIUS = 1.0  # pixels; clamp for degenerate parts


@dataclass
class PartEllipsoid:
    center: np.ndarray  # (3,)
    axes: np.ndarray  # (3, 3) orthonormal, rows are axis directions
    radii: np.ndarray  # (3,) major, transverse, transverse
    part_id: int

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.axes = np.asarray(self.axes, dtype=np.float64).reshape(3, 3)
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(3)
        if np.any(self.radii <= 0):
            raise ValueError("ellipsoid radii must be positive")

    def mahalanobis2(self, pts: np.ndarray) -> np.ndarray:
        """(x-c)^T Q (x-c) with Q from the axes/radii; 1 on the surface."""
        d = (np.asarray(pts, dtype=np.float64).reshape(-1, 3) - self.center) @ self.axes.T
        return ((d / self.radii) ** 2).sum(axis=1)

    def endpoints(self) -> np.ndarray:
        """The two tips along the major axis, shape (2, 3)."""
        tip = self.axes[0] * self.radii[0]
        return np.stack([self.center + tip, self.center - tip])


@dataclass
class PartDescriptor:
    part_id: int
    bone_length: float
    mean_radius: float
    feature: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.feature)):
            raise ValueError("non-finite feature vector")


def fit_part_ellipsoids(graph: SkeletonGraph2D, mask: np.ndarray) -> list[PartEllipsoid]:
    """One ellipsoid per graph edge, sized to fit the silhouette.

    Major radius is half the edge arc length; the two transverse radii are
    the mean distance from the edge trace to the silhouette boundary.
    """
    if not graph.edges:
        raise EmptyGraph("graph has no edges")
    mask = np.asarray(mask, dtype=bool)
    dist = ndimage.distance_transform_edt(mask)
    out = []
    cen = _centroid(mask)
    for pid, e in enumerate(graph.edges):
        tr = e.trace.astype(float)
        major = max(e.arc_length / 2.0, MIN_RADIUS)
        d = dist[e.trace[:, 1].clip(0, mask.shape[0] - 1), e.trace[:, 0].clip(0, mask.shape[1] - 1)]
        transverse = max(float(d.mean()), MIN_RADIUS)
        center2d = _point_at_half_length(tr)
        chord = tr[-1] - tr[0]
        n = np.linalg.norm(chord)
        direction = chord / n if n > 0 else np.array([1.0, 0.0])
        axes = np.array(
            [
                [direction[0], direction[1], 0.0],
                [-direction[1], direction[0], 0.0],
                [0.0, 0.0, 1.0],
            ]
        )
        center = np.array([center2d[0] - cen[0], center2d[1] - cen[1], 0.0])
        out.append(PartEllipsoid(center, axes, np.array([major, transverse, transverse]), pid))
    return out


def _centroid(mask: np.ndarray) -> np.ndarray:
    vs, us = np.nonzero(mask)
    return np.array([us.mean(), vs.mean()])


def _point_at_half_length(trace: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(trace, axis=0), axis=1)
    total = seg.sum()
    if total == 0:
        return trace[0]
    target = total / 2.0
    acc = np.concatenate([[0.0], np.cumsum(seg)])
    k = int(np.searchsorted(acc, target))
    k = min(max(k, 1), len(trace) - 1)
    t = (target - acc[k - 1]) / max(seg[k - 1], 1e-12)
    return trace[k - 1] + t * (trace[k] - trace[k - 1])


def _relative_diff(a: float, b: float) -> float:
    denom = max(abs(a), abs(b), 1e-12)
    return abs(a - b) / denom


def _edge_nodes(graph: SkeletonGraph2D, pid: int) -> tuple[int, int]:
    e = graph.edges[pid]
    return e.a, e.b


def match_symmetric_parts(
    descriptors: list[PartDescriptor],
    graph: SkeletonGraph2D,
    tol: float = 0.15,
) -> list[tuple[int, int]]:
    """Greedy disjoint pairing of parts that look alike and attach alike.

    Each of the normalized differences (feature distance, bone length, mean
    radius) must fall below tol, and the parts must hang off the same
    junction or off junctions of equal degree.
    """
    by_id = {d.part_id: d for d in descriptors}
    deg = graph.degrees()
    candidates = []
    ids = sorted(by_id)
    for i_pos, i in enumerate(ids):
        for j in ids[i_pos + 1 :]:
            di, dj = by_id[i], by_id[j]
            dl = _relative_diff(di.bone_length, dj.bone_length)
            dr = _relative_diff(di.mean_radius, dj.mean_radius)
            if di.feature.size and dj.feature.size and di.feature.size == dj.feature.size:
                denom = max(np.linalg.norm(di.feature), np.linalg.norm(dj.feature), 1e-12)
                df = float(np.linalg.norm(di.feature - dj.feature) / denom)
            else:
                df = 0.0
            if dl >= tol or dr >= tol or df >= tol:
                continue
            if not _topologically_compatible(graph, deg, i, j):
                continue
            candidates.append((df + dl + dr, i, j))
    candidates.sort()
    used: set[int] = set()
    pairs = []
    for _, i, j in candidates:
        if i in used or j in used:
            continue
        used.update((i, j))
        pairs.append((i, j))
    return pairs


def _topologically_compatible(graph: SkeletonGraph2D, deg, i: int, j: int) -> bool:
    if i >= len(graph.edges) or j >= len(graph.edges):
        return True  # descriptors for parts outside the graph: geometry only
    ai, bi = _edge_nodes(graph, i)
    aj, bj = _edge_nodes(graph, j)
    if {ai, bi} & {aj, bj}:
        return True
    # symmetric junctions: same degree at the anchoring junction node
    ji = [n for n in (ai, bi) if graph.nodes[n].kind == "junction"]
    jj = [n for n in (aj, bj) if graph.nodes[n].kind == "junction"]
    return bool(ji and jj and any(deg[a] == deg[b] for a in ji for b in jj))


def place_parts_3d(
    graph: SkeletonGraph2D,
    ellipsoids: list[PartEllipsoid],
    pairs: list[tuple[int, int]],
    separation: float | None = None,
) -> list[PartEllipsoid]:
    """Push symmetric pairs off the z=0 plane; average their in-plane pose.

    Unpaired parts stay on the symmetry plane.
    """
    seen: set[int] = set()
    for i, j in pairs:
        if i in seen or j in seen:
            raise InvalidPairs(f"part {i if i in seen else j} appears in two pairs")
        seen.update((i, j))
    placed = [
        PartEllipsoid(e.center.copy(), e.axes.copy(), e.radii.copy(), e.part_id)
        for e in ellipsoids
    ]
    for i, j in pairs:
        ei, ej = placed[i], placed[j]
        center = (ei.center + ej.center) / 2.0
        radii = (ei.radii + ej.radii) / 2.0
        axes = ei.axes if i < j else ej.axes
        sep = separation if separation is not None else float(radii[1])
        lo, hi = (i, j) if i < j else (j, i)
        placed[lo] = PartEllipsoid(center + [0, 0, sep], axes, radii, lo)
        placed[hi] = PartEllipsoid(center - [0, 0, sep], axes, radii, hi)
    return placed


def lift_to_3d(
    graph: SkeletonGraph2D,
    ellipsoids: list[PartEllipsoid],
    pairs: list[tuple[int, int]],
    separation: float | None = None,
) -> Skeleton:
    """Build the initial 3D skeleton: one bone per part, joints at shared nodes.

    At a node shared by several parts, all joints attach to the longest
    incident part so the bone graph stays a tree.
    """
    placed = place_parts_3d(graph, ellipsoids, pairs, separation)
    B = len(placed)
    centers = np.stack([e.center for e in placed])
    precisions = np.stack([precision_from_axes(e.axes, e.radii) for e in placed])
    lengths = np.array([max(graph.edges[b].arc_length, 2 * MIN_RADIUS) for b in range(B)])
    for i, j in pairs:  # mirror pairs share averaged fields, lengths included
        lengths[i] = lengths[j] = (lengths[i] + lengths[j]) / 2.0

    node_parts: dict[int, list[int]] = {}
    for pid, e in enumerate(graph.edges):
        node_parts.setdefault(e.a, []).append(pid)
        node_parts.setdefault(e.b, []).append(pid)

    joint_bones = []
    joint_positions = []
    for node in sorted(node_parts):
        parts = node_parts[node]
        if len(parts) < 2:
            continue
        npos = np.array([graph.nodes[node].u, graph.nodes[node].v, 0.0])
        tips = []
        for p in parts:
            ends = placed[p].endpoints()
            # compare in the symmetry plane; paired parts sit off-plane
            d = np.linalg.norm(ends[:, :2] - npos[None, :2], axis=1)
            tips.append(ends[int(np.argmin(d))])
        jpos = np.mean(tips, axis=0)
        hub = max(parts, key=lambda p: (graph.edges[p].arc_length, -p))
        for p in sorted(parts):
            if p == hub:
                continue
            joint_bones.append((hub, p))
            joint_positions.append(jpos)
    skel = Skeleton(
        centers,
        precisions,
        lengths,
        np.array(joint_bones, dtype=np.int64).reshape(-1, 2),
        np.array(joint_positions, dtype=np.float64).reshape(-1, 3),
    )
    skel.validate()
    return skel


# ---------------------------------------------------------------------------
# Coarse mesh


def icosphere(subdivisions: int = 3) -> Mesh:
    """Unit icosphere via icosahedron subdivision."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [v for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(m)
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return Mesh(np.stack(verts), np.array(faces, dtype=np.int32))


def coarse_mesh_from_ellipsoids(
    ellipsoids: list[PartEllipsoid],
    bridges: list[tuple[int, int]] | None = None,
    grid: int = 56,
    icosphere_subdivisions: int = 4,
) -> Mesh:
    """Closed triangle mesh of the union of part ellipsoids.

    A single ellipsoid maps an icosphere exactly. Unions are polygonized
    from the min of the per-part implicit fields (plus capsule fields along
    requested bridge connections) so the output is always closed and
    orientable, with disconnected inputs flagged and bridged.
    """
    if not ellipsoids:
        raise EmptyGraph("no ellipsoids")
    if len(ellipsoids) == 1:
        e = ellipsoids[0]
        sph = icosphere(icosphere_subdivisions)
        verts = e.center + (sph.vertices * e.radii) @ e.axes
        return Mesh(verts, sph.faces)

    from skimage import measure

    caps = []
    if bridges:
        for i, j in bridges:
            ei, ej = ellipsoids[i], ellipsoids[j]
            if _surfaces_disjoint(ei, ej):
                r = 0.5 * min(ei.radii[1:].mean(), ej.radii[1:].mean())
                caps.append((ei.center, ej.center, r))

    lo = np.min([e.center - e.radii.max() for e in ellipsoids], axis=0)
    hi = np.max([e.center + e.radii.max() for e in ellipsoids], axis=0)
    margin = 0.05 * np.linalg.norm(hi - lo) + 1e-6
    lo, hi = lo - margin, hi + margin
    span = hi - lo
    step = span.max() / grid
    dims = np.maximum((span / step).astype(int) + 2, 4)
    xs = [lo[k] + step * np.arange(dims[k]) for k in range(3)]
    X, Y, Z = np.meshgrid(*xs, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    fieldv = np.full(len(pts), np.inf)
    for e in ellipsoids:
        fieldv = np.minimum(fieldv, e.mahalanobis2(pts) - 1.0)
    for p, q, r in caps:
        fieldv = np.minimum(fieldv, _capsule_field(pts, p, q, r))
    vol = fieldv.reshape(dims)
    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0, spacing=(step, step, step))
    verts = verts + lo
    faces = faces[_nondegenerate(faces)]
    return Mesh(verts, faces.astype(np.int32))


def _nondegenerate(faces: np.ndarray) -> np.ndarray:
    return (
        (faces[:, 0] != faces[:, 1])
        & (faces[:, 1] != faces[:, 2])
        & (faces[:, 0] != faces[:, 2])
    )


def _surfaces_disjoint(a: PartEllipsoid, b: PartEllipsoid) -> bool:
    """Conservative overlap test: sample each surface against the other."""
    sph = icosphere(2)
    pa = a.center + (sph.vertices * a.radii) @ a.axes
    pb = b.center + (sph.vertices * b.radii) @ b.axes
    return bool(b.mahalanobis2(pa).min() > 1.0 and a.mahalanobis2(pb).min() > 1.0)


def _capsule_field(pts: np.ndarray, p: np.ndarray, q: np.ndarray, r: float) -> np.ndarray:
    """Quadratic-style capsule field, negative inside, ~1 scale at surface."""
    d = q - p
    L2 = float(d @ d)
    if L2 < 1e-12:
        return ((pts - p) ** 2).sum(axis=1) / r**2 - 1.0
    t = np.clip((pts - p) @ d / L2, 0.0, 1.0)
    nearest = p + t[:, None] * d
    return ((pts - nearest) ** 2).sum(axis=1) / r**2 - 1.0


def mesh_components(mesh: Mesh) -> int:
    """Number of vertex-connected components."""
    n = mesh.num_vertices
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in mesh.edges():
        ra, rb = find(int(a)), find(int(b))
        if ra != rb:
            parent[ra] = rb
    return len({find(i) for i in range(n)})


# ---------------------------------------------------------------------------
# Part descriptor table: one part per line,
# "part_id bone_length mean_radius f0 f1 ..."


def write_descriptors(path, descriptors: list[PartDescriptor]) -> None:
    lines = []
    for d in descriptors:
        feat = " ".join(repr(float(v)) for v in d.feature)
        base = f"{d.part_id} {float(d.bone_length)!r} {float(d.mean_radius)!r}"
        lines.append(f"{base} {feat}".rstrip())
    Path(path).write_text("\n".join(lines) + "\n")


def read_descriptors(path) -> list[PartDescriptor]:
    out = []
    for ln in Path(path).read_text().splitlines():
        if not ln.strip() or ln.startswith("#"):
            continue
        parts = ln.split()
        if len(parts) < 3:
            raise DataError(f"bad descriptor line: {ln}")
        out.append(
            PartDescriptor(
                int(parts[0]),
                float(parts[1]),
                float(parts[2]),
                np.array([float(x) for x in parts[3:]]),
            )
        )
    return out


def descriptors_from_ellipsoids(
    graph: SkeletonGraph2D, ellipsoids: list[PartEllipsoid]
) -> list[PartDescriptor]:
    """Geometry-only descriptors (no feature vectors) for fallback matching."""
    return [
        PartDescriptor(e.part_id, graph.edges[e.part_id].arc_length, float(e.radii[1]))
        for e in ellipsoids
    ]
