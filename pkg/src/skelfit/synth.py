"""Procedural articulated scenes with full ground truth.

Every quantity the pipeline estimates (skeleton, skinning, per-frame
poses, cameras, silhouettes, flow) is generated here analytically, so
tests can compare against known answers. Conventions match the pipeline:
y points down in model space, cameras sit on +z looking at the origin.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import SE3, Camera, Mesh, project_points, rotation_from_axis_angle
from .render import FlowField, rasterize, render_flow, write_flo
from .silhouette import write_pgm
from .skeleton import Skeleton, precision_from_axes, write_skel
from .skinning import FrameParams, forward_skin
from .lift import PartDescriptor, write_descriptors


def make_capsule(p0, p1, radius, n_around=16, n_len=14, n_cap=6) -> Mesh:
    """Capsule from p0 to p1: cylinder with hemispherical caps."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    axis = p1 - p0
    L = np.linalg.norm(axis)
    axis = axis / L if L > 0 else np.array([1.0, 0.0, 0.0])
    # orthonormal frame around the axis
    ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)

    rings = []
    # bottom cap (around p0), pole first
    for i in range(n_cap, 0, -1):
        phi = (np.pi / 2) * i / n_cap
        rings.append((p0 - axis * radius * np.sin(phi), radius * np.cos(phi)))
    for i in range(n_len + 1):
        rings.append((p0 + axis * (L * i / n_len), radius))
    for i in range(1, n_cap + 1):
        phi = (np.pi / 2) * i / n_cap
        rings.append((p1 + axis * radius * np.sin(phi), radius * np.cos(phi)))

    verts = [p0 - axis * radius]
    for center, r in rings:
        for k in range(n_around):
            ang = 2 * np.pi * k / n_around
            verts.append(center + r * (np.cos(ang) * e1 + np.sin(ang) * e2))
    verts.append(p1 + axis * radius)
    verts = np.array(verts)

    faces = []
    top = 0
    for k in range(n_around):
        faces.append((top, 1 + k, 1 + (k + 1) % n_around))
    nr = len(rings)
    for i in range(nr - 1):
        a0 = 1 + i * n_around
        a1 = 1 + (i + 1) * n_around
        for k in range(n_around):
            k1 = (k + 1) % n_around
            faces.append((a0 + k, a1 + k, a1 + k1))
            faces.append((a0 + k, a1 + k1, a0 + k1))
    bottom = len(verts) - 1
    a0 = 1 + (nr - 1) * n_around
    for k in range(n_around):
        faces.append((bottom, a0 + (k + 1) % n_around, a0 + k))
    return Mesh(verts, np.array(faces, dtype=np.int32))


def merge_meshes(meshes: list[Mesh]) -> Mesh:
    verts = []
    faces = []
    off = 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += m.num_vertices
    return Mesh(np.concatenate(verts), np.concatenate(faces))


def _segment_distances(points: np.ndarray, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    d = p1 - p0
    L2 = float(d @ d)
    if L2 < 1e-12:
        return np.linalg.norm(points - p0, axis=1)
    t = np.clip((points - p0) @ d / L2, 0.0, 1.0)
    nearest = p0 + t[:, None] * d
    return np.linalg.norm(points - nearest, axis=1)


def smooth_segment_weights(
    points: np.ndarray, segments: list[tuple[np.ndarray, np.ndarray]], sigma: float
) -> np.ndarray:
    """Nearest-capsule skinning with Gaussian falloff; rows sum to 1."""
    D = np.stack([_segment_distances(points, p0, p1) for p0, p1 in segments], axis=1)
    logw = -(D**2) / (2 * sigma**2)
    logw -= logw.max(axis=1, keepdims=True)
    W = np.exp(logw)
    W /= W.sum(axis=1, keepdims=True)
    return W


@dataclass
class JointMotion:
    pivot: np.ndarray  # hinge position in canonical space
    axis: np.ndarray  # rotation axis (unit)
    amplitude: float  # radians
    frequency: float = 1.0
    phase: float = 0.0

    def angle(self, f: int, total: int) -> float:
        t = f / max(total, 1)
        return self.amplitude * np.sin(2 * np.pi * self.frequency * t + self.phase)


@dataclass
class SynthScene:
    mesh: Mesh  # canonical
    skeleton: Skeleton
    weights: np.ndarray  # GT skinning (N, B)
    parent: list[int]  # parent bone per bone (-1 for root bone)
    motions: list[JointMotion | None]  # per bone, motion at its parent hinge
    descriptors: list[PartDescriptor]
    width: int = 160
    height: int = 120
    focal: float | None = None  # defaults to image width
    distance_scale: float = 1.0  # >1 weakens perspective
    camera_mode: str = "static"  # or "turntable"
    turntable_span: float = np.deg2rad(144.0)
    root_amplitude: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mask_noise: float = 0.0  # probability of flipping boundary pixels
    mask_erosion: int = 0
    seed: int = 0

    def camera(self, f: int, total: int) -> Camera:
        # distance_scale raises focal and distance together: same framing,
        # weaker perspective
        focal = self.focal if self.focal is not None else float(self.width) * self.distance_scale
        half = self.mesh.bbox_diagonal() / 2.0 + np.linalg.norm(self.root_amplitude)
        d = focal * half / (0.42 * min(self.width, self.height))
        if self.camera_mode == "turntable":
            span = self.turntable_span
            phi = -span / 2 + span * (f / max(total - 1, 1))
            R = rotation_from_axis_angle(np.array([0.0, phi, 0.0]))
        else:
            R = np.eye(3)
        return Camera(SE3(R, np.array([0.0, 0.0, d])), focal, self.width / 2, self.height / 2, self.width, self.height)

    def side_view_frame(self, total: int) -> int:
        """Frame whose turntable azimuth is closest to zero."""
        if self.camera_mode != "turntable":
            return 0
        span = self.turntable_span
        phis = [-span / 2 + span * (f / max(total - 1, 1)) for f in range(total)]
        return int(np.argmin(np.abs(phis)))

    def root_translation(self, f: int, total: int) -> np.ndarray:
        t = f / max(total, 1)
        return self.root_amplitude * np.sin(2 * np.pi * t)

    def frame_params(self, f: int, total: int) -> FrameParams:
        B = self.skeleton.num_bones
        world = [SE3.identity() for _ in range(B)]
        order = _topo_order(self.parent)
        for b in order:
            p = self.parent[b]
            local = SE3.identity()
            m = self.motions[b]
            if m is not None:
                R = rotation_from_axis_angle(m.axis * m.angle(f, total))
                local = SE3(R, m.pivot - R @ m.pivot)
            world[b] = world[p].compose(local) if p >= 0 else local
        root = SE3(np.eye(3), self.root_translation(f, total))
        return FrameParams(root, world, self.camera(f, total))

    def gt_mesh(self, f: int, total: int) -> Mesh:
        return forward_skin(self.mesh, self.weights, self.frame_params(f, total))

    def gt_joint_positions(self, f: int, total: int) -> np.ndarray:
        """Deformed GT joint positions (both incident bones agree)."""
        fp = self.frame_params(f, total)
        out = np.zeros((self.skeleton.num_joints, 3))
        for j in range(self.skeleton.num_joints):
            a = int(self.skeleton.joint_bones[j, 0])
            out[j] = fp.root.apply(fp.bone_transforms[a].apply(self.skeleton.joint_positions[j]))
        return out


def _topo_order(parent: list[int]) -> list[int]:
    order = []
    seen = set()

    def visit(b):
        if b in seen:
            return
        if parent[b] >= 0:
            visit(parent[b])
        seen.add(b)
        order.append(b)

    for b in range(len(parent)):
        visit(b)
    return order


def make_chain(
    num_bones: int = 3,
    segment_length: float = 1.0,
    radius: float = 0.22,
    amplitude: float = np.deg2rad(30.0),
    root_amplitude: float = 0.0,
    tessellation: tuple[int, int, int] = (16, 14, 6),
    seed: int = 0,
) -> SynthScene:
    """Collinear capsule chain along +x with z-axis hinges between segments."""
    if num_bones < 1:
        raise ValueError("num_bones must be >= 1")
    L, r = segment_length, radius
    x0 = -num_bones * L / 2.0  # center the chain on the origin
    segments = []
    meshes = []
    n_a, n_l, n_c = tessellation
    for b in range(num_bones):
        p0 = np.array([x0 + b * L, 0.0, 0.0])
        p1 = np.array([x0 + (b + 1) * L, 0.0, 0.0])
        segments.append((p0, p1))
        meshes.append(make_capsule(p0, p1, r, n_a, n_l, n_c))
    mesh = merge_meshes(meshes)
    W = smooth_segment_weights(mesh.vertices, segments, sigma=0.5 * r)

    centers = np.array([[(x0 + (b + 0.5) * L), 0.0, 0.0] for b in range(num_bones)])
    precisions = np.stack(
        [precision_from_axes(np.eye(3), np.array([L / 2, r, r])) for _ in range(num_bones)]
    )
    lengths = np.full(num_bones, L)
    joint_bones = np.array([[b, b + 1] for b in range(num_bones - 1)], dtype=np.int64).reshape(-1, 2)
    joint_positions = np.array(
        [[x0 + (b + 1) * L, 0.0, 0.0] for b in range(num_bones - 1)]
    ).reshape(-1, 3)
    skel = Skeleton(centers, precisions, lengths, joint_bones, joint_positions)
    skel.validate()

    parent = [b - 1 for b in range(num_bones)]
    motions: list[JointMotion | None] = [None]
    for b in range(1, num_bones):
        motions.append(
            JointMotion(
                pivot=joint_positions[b - 1],
                axis=np.array([0.0, 0.0, 1.0]),
                amplitude=amplitude,
                phase=2 * np.pi * (b - 1) / max(num_bones - 1, 1) + 0.7,
            )
        )
    descriptors = [
        PartDescriptor(b, L, r, np.array([1.0, 0.0])) for b in range(num_bones)
    ]
    return SynthScene(
        mesh,
        skel,
        W,
        parent,
        motions,
        descriptors,
        root_amplitude=np.array([root_amplitude, 0.6 * root_amplitude, 0.0]),
        seed=seed,
    )


def make_quadruped(
    torso_length: float = 2.4,
    torso_radius: float = 0.42,
    leg_length: float = 1.1,
    leg_radius: float = 0.16,
    leg_z_offset: float = 0.65,  # as a fraction of torso_radius
    amplitude: float = np.deg2rad(25.0),
    tessellation: tuple[int, int, int] = (12, 10, 5),
    seed: int = 0,
) -> SynthScene:
    """Torso, four legs, neck+head, tail: 8 bones, 7 joints.

    Legs come in symmetric pairs offset to z = +/- torso_radius; y points
    down so legs hang toward +y.
    """
    tl, tr, ll, lr = torso_length, torso_radius, leg_length, leg_radius
    n_a, n_l, n_c = tessellation
    segs: list[tuple[np.ndarray, np.ndarray]] = []
    meshes = []
    radii = []

    def add(p0, p1, r, around=n_a):
        segs.append((np.asarray(p0, float), np.asarray(p1, float)))
        meshes.append(make_capsule(p0, p1, r, around, n_l, n_c))
        radii.append(r)

    # bone 0: torso along x
    add([-tl / 2, 0, 0], [tl / 2, 0, 0], tr)
    hip_x, shoulder_x = -tl / 2 + 0.25 * tl, tl / 2 - 0.25 * tl
    zoff = tr * leg_z_offset
    # bones 1-4: legs (front pair then back pair), hanging toward +y
    add([shoulder_x, 0.2, +zoff], [shoulder_x, 0.2 + ll, +zoff], lr)
    add([shoulder_x, 0.2, -zoff], [shoulder_x, 0.2 + ll, -zoff], lr)
    add([hip_x, 0.2, +zoff], [hip_x, 0.2 + ll, +zoff], lr)
    add([hip_x, 0.2, -zoff], [hip_x, 0.2 + ll, -zoff], lr)
    # bone 5: neck, 6: head, 7: tail
    neck0 = np.array([tl / 2 - 0.1, -0.1, 0.0])
    neck1 = neck0 + np.array([0.45, -0.6, 0.0])
    add(neck0, neck1, 0.55 * tr)
    head1 = neck1 + np.array([0.55, -0.1, 0.0])
    add(neck1, head1, 0.5 * tr)
    tail0 = np.array([-tl / 2 + 0.05, -0.15, 0.0])
    tail1 = tail0 + np.array([-0.8, -0.25, 0.0])
    add(tail0, tail1, 0.4 * lr + 0.08)

    mesh = merge_meshes(meshes)
    W = smooth_segment_weights(mesh.vertices, segs, sigma=0.5 * lr + 0.04)

    centers = np.array([(p0 + p1) / 2.0 for p0, p1 in segs])
    lengths = np.array([np.linalg.norm(p1 - p0) for p0, p1 in segs])
    precisions = []
    for (p0, p1), r in zip(segs, radii):
        axis = p1 - p0
        axis = axis / np.linalg.norm(axis)
        ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = np.cross(axis, ref)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(axis, e1)
        V = np.stack([axis, e1, e2])
        precisions.append(precision_from_axes(V, np.array([lengths[len(precisions)] / 2, r, r])))
    precisions = np.stack(precisions)

    attach = {1: 0, 2: 0, 3: 0, 4: 0, 5: 0, 6: 5, 7: 0}
    joint_positions = np.array(
        [
            segs[1][0], segs[2][0], segs[3][0], segs[4][0],
            neck0, neck1, tail0,
        ]
    )
    joint_bones = np.array(
        [[0, 1], [0, 2], [0, 3], [0, 4], [0, 5], [5, 6], [0, 7]], dtype=np.int64
    )
    skel = Skeleton(centers, precisions, lengths, joint_bones, joint_positions)
    skel.validate()

    parent = [-1, 0, 0, 0, 0, 0, 5, 0]
    z = np.array([0.0, 0.0, 1.0])
    motions: list[JointMotion | None] = [None]
    for b, phase in zip(range(1, 8), (0.0, np.pi, np.pi, 0.0, 0.5, 1.2, 2.1)):
        pivots = {1: segs[1][0], 2: segs[2][0], 3: segs[3][0], 4: segs[4][0], 5: neck0, 6: neck1, 7: tail0}
        amp = amplitude if b <= 4 else 0.6 * amplitude
        motions.append(JointMotion(pivots[b], z, amp, phase=phase))
    # descriptors: leg pairs share identical features by construction
    kind = {0: 0.0, 1: 1.0, 2: 1.0, 3: 2.0, 4: 2.0, 5: 3.0, 6: 4.0, 7: 5.0}
    descriptors = [
        PartDescriptor(b, float(lengths[b]), float(radii[b]), np.array([kind[b], 1.0]))
        for b in range(8)
    ]
    return SynthScene(
        mesh, skel, W, parent, motions, descriptors,
        camera_mode="turntable", seed=seed,
    )


# ---------------------------------------------------------------------------
# Dataset emission


def render_dataset(scene: SynthScene, frames: int, out_dir) -> Path:
    """Write masks, flow, cameras, keypoints, GT skeleton and a manifest.

    Layout: mask_0000.pgm ... (frames), flow_0000.flo ... (frames-1),
    camera.csv, keypoints.csv, gt_skeleton.skel, descriptors.txt,
    manifest.txt.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(scene.seed)
    meshes = [scene.gt_mesh(f, frames) for f in range(frames)]
    cams = [scene.camera(f, frames) for f in range(frames)]
    rasters = [rasterize(m, c) for m, c in zip(meshes, cams)]

    from scipy import ndimage

    for f in range(frames):
        mask = rasters[f].silhouette
        if scene.mask_erosion > 0:
            mask = ndimage.binary_erosion(mask, iterations=scene.mask_erosion)
        if scene.mask_noise > 0:
            boundary = mask ^ ndimage.binary_erosion(mask)
            boundary |= ndimage.binary_dilation(mask) ^ mask
            flip = boundary & (rng.random(mask.shape) < scene.mask_noise)
            mask = mask ^ flip
        write_pgm(out / f"mask_{f:04d}.pgm", mask)
    for f in range(frames - 1):
        fl = render_flow(meshes[f], meshes[f + 1], cams[f], cams[f + 1], rasters[f])
        write_flo(out / f"flow_{f:04d}.flo", fl)

    with open(out / "camera.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "focal", "cx", "cy", "width", "height", *[f"r{i}" for i in range(9)], "tx", "ty", "tz"])
        for f, c in enumerate(cams):
            w.writerow([f, c.focal, c.cx, c.cy, c.width, c.height,
                        *c.extrinsic.rotation.reshape(9), *c.extrinsic.translation])
    with open(out / "keypoints.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "joint", "u", "v"])
        for f in range(frames):
            pts = scene.gt_joint_positions(f, frames)
            uv, _ = project_points(cams[f], pts)
            for j in range(len(pts)):
                w.writerow([f, j, uv[j, 0], uv[j, 1]])
    write_skel(out / "gt_skeleton.skel", scene.skeleton)
    write_descriptors(out / "descriptors.txt", scene.descriptors)
    manifest = [
        f"frames={frames}",
        f"width={scene.width}",
        f"height={scene.height}",
        "mask_pattern=mask_{:04d}.pgm",
        "flow_pattern=flow_{:04d}.flo",
        f"seed={scene.seed}",
    ]
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n")
    return out
