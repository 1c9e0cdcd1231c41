"""Skeleton edits driven by the current mesh and per-frame motion.

Bone shifting and growing keep the skeleton aligned with the evolving
mesh; upsampling refines granularity; merge/split apply the physical
constraints (synchronized bone motion fuses bones, per-frame length
variation inserts joints). All edits preserve the tree invariants and are
fully deterministic: candidates are processed in documented orders.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .boneflow import BoneFlow, cosine_similarity
from .geom import Mesh
from .skeleton import Skeleton
from .skinning import FrameParams, blend_transforms

log = logging.getLogger(__name__)

DEFAULT_T_O = 0.95  # bone-motion cosine threshold for merging
DEFAULT_T_D = 0.2  # relative length-variation threshold for splitting
DEFAULT_T_R = 0.4  # skinning-weight threshold for joint placement
MIN_LENGTH = 1e-6


@dataclass
class PartAssignment:
    part_of: np.ndarray  # (N,) argmax bone index, ties to the lowest index
    sets: list[np.ndarray]  # vertex indices per bone


def part_assignment(W: np.ndarray) -> PartAssignment:
    part_of = np.argmax(W, axis=1)  # argmax returns the first (lowest) max
    B = W.shape[1]
    sets = [np.nonzero(part_of == b)[0] for b in range(B)]
    return PartAssignment(part_of, sets)


def bone_shift(skel: Skeleton, mesh: Mesh, W: np.ndarray) -> Skeleton:
    """Move each bone center to the centroid of its assigned vertices."""
    out = skel.copy()
    assign = part_assignment(W)
    for b in range(skel.num_bones):
        idx = assign.sets[b]
        if len(idx) == 0:
            log.warning("bone_shift: bone %d has no assigned vertices", b)
            continue
        out.centers[b] = mesh.vertices[idx].mean(axis=0)
    return out


def part_extent(mesh: Mesh, idx: np.ndarray) -> float:
    """Max pairwise distance within a vertex set."""
    if len(idx) < 2:
        return 0.0
    P = mesh.vertices[idx]
    from scipy.spatial.distance import pdist

    return float(pdist(P).max())


def endpoint_extents(skel: Skeleton, mesh: Mesh, W: np.ndarray) -> dict[int, float]:
    """Current max intra-part distance for every endpoint bone."""
    assign = part_assignment(W)
    return {b: part_extent(mesh, assign.sets[b]) for b in skel.endpoint_bones()}


def _split_precision(Q: np.ndarray, direction: np.ndarray, factor: float) -> np.ndarray:
    """Shrink the ellipsoid radius most aligned with direction by factor."""
    w, V = np.linalg.eigh(Q)
    k = int(np.argmax(np.abs(V.T @ direction)))
    w = w.copy()
    w[k] *= factor**2
    return (V * w) @ V.T


def grow_skeleton(
    skel: Skeleton,
    mesh: Mesh,
    W: np.ndarray,
    init_extents: dict[int, float],
    k: int = 2,
    return_lineage: bool = False,
):
    """Subdivide endpoint bones whose part extent more than doubled.

    The part's vertices are projected on the growth direction (joint to
    endpoint center), split into k equal-count sections, and the bone is
    replaced by k bones at the section centroids chained by new joints.
    With return_lineage, also returns the source bone index per new bone.
    """
    assign = part_assignment(W)
    centers = [c for c in skel.centers]
    precisions = [q for q in skel.precisions]
    lengths = list(skel.lengths)
    joint_bones = [tuple(int(x) for x in jb) for jb in skel.joint_bones]
    joint_positions = [p for p in skel.joint_positions]
    lineage = list(range(skel.num_bones))

    for b in sorted(init_extents):
        if b >= skel.num_bones or skel.degree(b) != 1:
            continue
        idx = assign.sets[b]
        if len(idx) < 2 * k:
            continue
        extent = part_extent(mesh, idx)
        if extent <= 2.0 * init_extents[b]:
            continue
        j = skel.joints_of_bone(b)[0]
        jpos = skel.joint_positions[j]
        g = skel.centers[b] - jpos
        norm = np.linalg.norm(g)
        if norm < 1e-9:
            log.warning("grow_skeleton: bone %d coincides with its joint", b)
            continue
        g = g / norm
        proj = (mesh.vertices[idx] - jpos) @ g
        order = np.argsort(proj, kind="stable")
        sections = np.array_split(order, k)
        sec_centroids = [mesh.vertices[idx[s]].mean(axis=0) for s in sections]
        sec_bounds = [
            0.5 * (proj[sections[i][-1]] + proj[sections[i + 1][0]])
            for i in range(k - 1)
        ]
        newQ = _split_precision(skel.precisions[b], g, float(k))
        sec_lengths = []
        for s in sections:
            lo, hi = proj[s].min(), proj[s].max()
            sec_lengths.append(max(hi - lo, MIN_LENGTH))
        # section 0 is nearest the joint and reuses slot b
        centers[b] = sec_centroids[0]
        precisions[b] = newQ
        lengths[b] = sec_lengths[0]
        ids = [b]
        for s in range(1, k):
            ids.append(len(centers))
            centers.append(sec_centroids[s])
            precisions.append(newQ.copy())
            lengths.append(sec_lengths[s])
            lineage.append(b)
        for s in range(k - 1):
            joint_bones.append((ids[s], ids[s + 1]))
            joint_positions.append(jpos + g * sec_bounds[s])

    out = Skeleton(
        np.stack(centers),
        np.stack(precisions),
        np.array(lengths),
        np.array(joint_bones, dtype=np.int64).reshape(-1, 2),
        np.array(joint_positions, dtype=np.float64).reshape(-1, 3),
    )
    out.validate()
    if return_lineage:
        return out, lineage
    return out


def _canonical_axis(skel: Skeleton, b: int) -> np.ndarray:
    a = skel.principal_axis(b)
    lead = int(np.argmax(np.abs(a)))
    return a if a[lead] >= 0 else -a


def upsample_skeleton(skel: Skeleton, return_lineage: bool = False):
    """Split every bone in two along its principal axis; doubles bone count.

    Each parent joint re-attaches to the nearer child and a new joint links
    the two halves at the parent center.
    """
    B = skel.num_bones
    centers = np.zeros((2 * B, 3))
    precisions = np.zeros((2 * B, 3, 3))
    lengths = np.zeros(2 * B)
    child = np.zeros((B, 2), dtype=np.int64)
    for b in range(B):
        axis = _canonical_axis(skel, b)
        off = axis * skel.lengths[b] / 4.0
        Q = _split_precision(skel.precisions[b], axis, 2.0)
        i0, i1 = b, B + b
        child[b] = (i0, i1)
        centers[i0] = skel.centers[b] + off
        centers[i1] = skel.centers[b] - off
        precisions[i0] = Q
        precisions[i1] = Q
        lengths[i0] = lengths[i1] = max(skel.lengths[b] / 2.0, MIN_LENGTH)

    joint_bones = []
    joint_positions = []
    for j in range(skel.num_joints):
        a, b = (int(x) for x in skel.joint_bones[j])
        p = skel.joint_positions[j]
        ca = child[a][np.argmin([np.linalg.norm(centers[c] - p) for c in child[a]])]
        cb = child[b][np.argmin([np.linalg.norm(centers[c] - p) for c in child[b]])]
        joint_bones.append((int(ca), int(cb)))
        joint_positions.append(p)
    for b in range(B):
        joint_bones.append((int(child[b][0]), int(child[b][1])))
        joint_positions.append(skel.centers[b].copy())

    out = Skeleton(
        centers,
        precisions,
        lengths,
        np.array(joint_bones, dtype=np.int64),
        np.array(joint_positions, dtype=np.float64),
    )
    out.validate()
    if return_lineage:
        return out, [b % B for b in range(2 * B)]
    return out


def pair_min_similarity(
    bone_flows: list[BoneFlow], a: int, b: int, min_speed: float = 0.0
) -> float | None:
    """Min over frames of the flow cosine; unsupported frames are skipped.

    Frames where either bone moves slower than min_speed (pixels) carry no
    usable direction and are skipped too. Returns None when no frame
    qualifies for both bones.
    """
    best = None
    for bf in bone_flows:
        if not (bf.supported[a] and bf.supported[b]):
            continue
        if min_speed > 0.0 and (
            np.linalg.norm(bf.vectors[a]) < min_speed
            or np.linalg.norm(bf.vectors[b]) < min_speed
        ):
            continue
        s = cosine_similarity(bf.vectors[a], bf.vectors[b])
        best = s if best is None else min(best, s)
    return best


def _bone_tip(skel: Skeleton, b: int, away_from: np.ndarray) -> np.ndarray:
    d = skel.centers[b] - away_from
    n = np.linalg.norm(d)
    u = d / n if n > 1e-12 else _canonical_axis(skel, b)
    return skel.centers[b] + u * skel.lengths[b] / 2.0


def merge_bones(
    skel: Skeleton,
    bone_flows: list[BoneFlow],
    t_o: float,
    W: np.ndarray,
    return_lineage: bool = False,
    min_speed: float = 0.0,
):
    """Fuse joint-adjacent bone pairs that move in sync in every frame.

    Pairs with min-over-frames cosine similarity above t_o fuse greedily in
    descending similarity, each bone at most once per call. Fused fields
    blend by a softmax over total skinning mass; the fused length spans the
    pair's outer extremities.
    """
    candidates = []
    for a, b, j in skel.adjacent_pairs():
        s = pair_min_similarity(bone_flows, a, b, min_speed)
        if s is not None and s > t_o:
            candidates.append((-s, a, b, j))
    candidates.sort()

    mass = np.asarray(W).sum(axis=0)
    used: set[int] = set()
    merged = skel.copy()
    # collect fusions first; rebuild arrays once
    fusions = []
    for negs, a, b, j in candidates:
        if a in used or b in used:
            continue
        used.update((a, b))
        fusions.append((a, b, j))
    if not fusions:
        if return_lineage:
            return merged, list(range(skel.num_bones))
        return merged

    remove_bones: set[int] = set()
    remove_joints: set[int] = set()
    redirect: dict[int, int] = {}
    for a, b, j in fusions:
        m = np.array([mass[a], mass[b]])
        m = np.exp(m - m.max())
        w = m / m.sum()
        merged.centers[a] = w[0] * skel.centers[a] + w[1] * skel.centers[b]
        merged.precisions[a] = w[0] * skel.precisions[a] + w[1] * skel.precisions[b]
        shared = skel.joint_positions[j]
        outer = [
            skel.joint_positions[jj]
            for bone in (a, b)
            for jj in skel.joints_of_bone(bone)
            if jj != j
        ]
        if len(outer) >= 2:
            P = np.stack(outer)
            d2 = ((P[:, None] - P[None]) ** 2).sum(-1)
            i0, i1 = np.unravel_index(int(d2.argmax()), d2.shape)
            new_len = float(np.sqrt(d2[i0, i1]))
        elif len(outer) == 1:
            far = a if np.linalg.norm(skel.centers[a] - outer[0]) >= np.linalg.norm(
                skel.centers[b] - outer[0]
            ) else b
            new_len = float(np.linalg.norm(_bone_tip(skel, far, shared) - outer[0]))
        else:
            new_len = float(
                np.linalg.norm(
                    _bone_tip(skel, a, shared) - _bone_tip(skel, b, shared)
                )
            )
        merged.lengths[a] = max(new_len, MIN_LENGTH)
        remove_bones.add(b)
        remove_joints.add(j)
        redirect[b] = a

    keep_bones = [i for i in range(skel.num_bones) if i not in remove_bones]
    remap = {old: new for new, old in enumerate(keep_bones)}

    def resolve(x: int) -> int:
        while x in redirect:
            x = redirect[x]
        return remap[x]

    jb, jp = [], []
    for j in range(skel.num_joints):
        if j in remove_joints:
            continue
        a, b = (resolve(int(x)) for x in skel.joint_bones[j])
        jb.append((a, b))
        jp.append(merged.joint_positions[j])
    out = Skeleton(
        merged.centers[keep_bones],
        merged.precisions[keep_bones],
        merged.lengths[keep_bones],
        np.array(jb, dtype=np.int64).reshape(-1, 2),
        np.array(jp, dtype=np.float64).reshape(-1, 3),
    )
    out.validate()
    if return_lineage:
        return out, keep_bones
    return out


def split_joints(
    skel: Skeleton, per_frame_lengths: np.ndarray, t_d: float, return_lineage: bool = False
):
    """Insert a joint inside bones whose per-frame length varies too much.

    Variation is relative: (max - min) > t_d * rest length. The new joint
    sits at the mean of the two flanking joints; boundary bones (fewer than
    two flanking joints) are skipped with a warning.
    """
    per_frame_lengths = np.asarray(per_frame_lengths, dtype=np.float64)
    if per_frame_lengths.ndim != 2 or per_frame_lengths.shape[1] != skel.num_bones:
        raise ValueError("per_frame_lengths must be (frames, bones)")
    centers = [c for c in skel.centers]
    precisions = [q for q in skel.precisions]
    lengths = list(skel.lengths)
    joint_bones = [[int(x) for x in jb] for jb in skel.joint_bones]
    joint_positions = [p.copy() for p in skel.joint_positions]
    lineage = list(range(skel.num_bones))

    variation = per_frame_lengths.max(axis=0) - per_frame_lengths.min(axis=0)
    for b in range(skel.num_bones):
        if variation[b] <= t_d * skel.lengths[b]:
            continue
        incident = skel.joints_of_bone(b)
        if len(incident) < 2:
            log.warning("split_joints: bone %d is a boundary bone, skipped", b)
            continue
        P = np.stack([skel.joint_positions[j] for j in incident])
        d2 = ((P[:, None] - P[None]) ** 2).sum(-1)
        i0, i1 = np.unravel_index(int(d2.argmax()), d2.shape)
        jp_, jq_ = incident[min(i0, i1)], incident[max(i0, i1)]
        p, q = skel.joint_positions[jp_], skel.joint_positions[jq_]
        j_new = (p + q) / 2.0
        axis = q - p
        nrm = np.linalg.norm(axis)
        axis = axis / nrm if nrm > 1e-12 else _canonical_axis(skel, b)
        Q = _split_precision(skel.precisions[b], axis, 2.0)
        right = len(centers)
        centers[b] = (p + j_new) / 2.0
        precisions[b] = Q
        lengths[b] = max(np.linalg.norm(j_new - p), MIN_LENGTH)
        centers.append((j_new + q) / 2.0)
        precisions.append(Q.copy())
        lengths.append(max(np.linalg.norm(q - j_new), MIN_LENGTH))
        lineage.append(b)
        # re-point incident joints to the nearer half
        for j in incident:
            other_end = joint_bones[j][0] if joint_bones[j][1] == b else joint_bones[j][1]
            jpos = skel.joint_positions[j]
            near_left = np.linalg.norm(jpos - centers[b]) <= np.linalg.norm(
                jpos - centers[right]
            )
            joint_bones[j] = [other_end, b if near_left else right]
        joint_bones.append([b, right])
        joint_positions.append(j_new)

    out = Skeleton(
        np.stack(centers),
        np.stack(precisions),
        np.array(lengths),
        np.array(joint_bones, dtype=np.int64).reshape(-1, 2),
        np.array(joint_positions, dtype=np.float64).reshape(-1, 3),
    )
    out.validate()
    if return_lineage:
        return out, lineage
    return out


def joint_positions(
    skel: Skeleton, mesh: Mesh, W: np.ndarray, t_r: float = DEFAULT_T_R
) -> Skeleton:
    """Place each joint at the mean of vertices shared by its two bones.

    A vertex qualifies when both bones' weights reach t_r; empty sets fall
    back to the bone-center midpoint (flagged in the log).
    """
    if not (0 < t_r <= 0.5):
        raise ValueError("t_r must lie in (0, 0.5]")
    out = skel.copy()
    W = np.asarray(W)
    for j in range(skel.num_joints):
        a, b = (int(x) for x in skel.joint_bones[j])
        sel = (W[:, a] >= t_r) & (W[:, b] >= t_r)
        if sel.any():
            out.joint_positions[j] = mesh.vertices[sel].mean(axis=0)
        else:
            log.warning("joint_positions: joint %d has no straddling vertices", j)
            out.joint_positions[j] = (skel.centers[a] + skel.centers[b]) / 2.0
    return out


def bone_lengths(skel: Skeleton, mesh: Mesh, W: np.ndarray) -> Skeleton:
    """Refresh bone lengths from joint geometry.

    Interior bones span their two (farthest) flanking joints; endpoint
    bones extend from their joint to the farthest assigned vertex projected
    on the bone axis; an isolated bone uses its part's principal extent.
    """
    out = skel.copy()
    assign = part_assignment(W)
    for b in range(skel.num_bones):
        incident = skel.joints_of_bone(b)
        if len(incident) >= 2:
            P = np.stack([skel.joint_positions[j] for j in incident])
            d2 = ((P[:, None] - P[None]) ** 2).sum(-1)
            out.lengths[b] = max(float(np.sqrt(d2.max())), MIN_LENGTH)
        elif len(incident) == 1:
            jpos = skel.joint_positions[incident[0]]
            axis = skel.centers[b] - jpos
            n = np.linalg.norm(axis)
            axis = axis / n if n > 1e-12 else _canonical_axis(skel, b)
            idx = assign.sets[b]
            if len(idx) == 0:
                log.warning("bone_lengths: endpoint bone %d has no vertices", b)
                continue
            proj = (mesh.vertices[idx] - jpos) @ axis
            out.lengths[b] = max(float(proj.max()), MIN_LENGTH)
        else:
            idx = assign.sets[b]
            if len(idx) < 2:
                continue
            axis = _canonical_axis(skel, b)
            proj = mesh.vertices[idx] @ axis
            out.lengths[b] = max(float(proj.max() - proj.min()), MIN_LENGTH)
    return out


def deformed_bone_lengths(
    skel: Skeleton, mesh: Mesh, W: np.ndarray, fp: FrameParams, t_r: float = DEFAULT_T_R
) -> np.ndarray:
    """Per-frame bone lengths measured on the deformed mesh."""
    A, t = blend_transforms(np.asarray(W), fp)
    deformed = np.einsum("nij,nj->ni", A, mesh.vertices) + t
    dmesh = mesh.with_vertices(deformed)
    # deform joints and centers with the average of their bones' transforms
    dskel = skel.copy()
    for j in range(skel.num_joints):
        a, b = (int(x) for x in skel.joint_bones[j])
        pa = _apply_bone(fp, a, skel.joint_positions[j])
        pb = _apply_bone(fp, b, skel.joint_positions[j])
        dskel.joint_positions[j] = (pa + pb) / 2.0
    for b in range(skel.num_bones):
        dskel.centers[b] = _apply_bone(fp, b, skel.centers[b])
    sel = joint_positions(dskel, dmesh, W, t_r)
    return bone_lengths(sel, dmesh, W).lengths


def _apply_bone(fp: FrameParams, b: int, x: np.ndarray) -> np.ndarray:
    return fp.root.apply(fp.bone_transforms[b].apply(x))
