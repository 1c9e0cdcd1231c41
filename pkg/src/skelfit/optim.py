"""Dual-phase fitting driver.

Phase one builds a coarse model from the canonical frame (2D skeleton,
symmetric-part lift, ellipsoid-union mesh) and picks the best of K camera
azimuth hypotheses. Phase two alternates pose/shape updates with the
skeleton fixed against skeleton edits driven by the current mesh and the
observed flow, EM style. Pose gradients come from central finite
differences over the per-frame transform parameters; canonical vertices
follow a signed-distance pull on the observed silhouettes.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import refine
from .boneflow import bone_flow, surface_flow
from .errors import DataError
from .geom import SE3, Camera, Mesh, project_points, rotation_from_axis_angle, write_obj
from .lift import (
    PartDescriptor,
    coarse_mesh_from_ellipsoids,
    descriptors_from_ellipsoids,
    fit_part_ellipsoids,
    lift_to_3d,
    match_symmetric_parts,
    place_parts_3d,
    read_descriptors,
)
from .losses import LossLog, LossWeights, flow_loss, silhouette_loss
from .render import FlowField, rasterize, read_flo, render_flow, vertex_visibility
from .rigidity import rigidity_coefficients, dr_loss
from .silhouette import (
    build_skeleton_graph,
    canonical_frame,
    default_prune_len,
    read_mask,
    thin_silhouette,
)
from .skeleton import Skeleton, write_skel
from .skinning import FrameParams, blend_transforms, forward_skin, skinning_weights

log = logging.getLogger(__name__)


@dataclass
class Observations:
    masks: list[np.ndarray]
    flows: list[FlowField | None]
    descriptors: list[PartDescriptor] | None = None
    part_masks: list[list[np.ndarray]] | None = None

    @property
    def num_frames(self) -> int:
        return len(self.masks)

    @property
    def shape(self) -> tuple[int, int]:
        return self.masks[0].shape

    @staticmethod
    def load(directory) -> "Observations":
        d = Path(directory)
        manifest = d / "manifest.txt"
        mask_pattern, flow_pattern = "mask_{:04d}.pgm", "flow_{:04d}.flo"
        frames = None
        if manifest.exists():
            for ln in manifest.read_text().splitlines():
                if "=" not in ln:
                    continue
                k, v = ln.split("=", 1)
                k, v = k.strip(), v.strip()
                if k == "frames":
                    frames = int(v)
                elif k == "mask_pattern":
                    mask_pattern = v
                elif k == "flow_pattern":
                    flow_pattern = v
        if frames is None:
            frames = len(sorted(d.glob("mask_*")))
        if frames < 2:
            raise DataError(f"{d}: need at least 2 frames, found {frames}")
        masks = []
        for f in range(frames):
            p = d / mask_pattern.format(f)
            if not p.exists():
                raise DataError(f"missing mask {p}")
            masks.append(read_mask(p))
        flows: list[FlowField | None] = []
        for f in range(frames - 1):
            p = d / flow_pattern.format(f)
            flows.append(read_flo(p) if p.exists() else None)
        desc = None
        dpath = d / "descriptors.txt"
        if dpath.exists():
            desc = read_descriptors(dpath)
        return Observations(masks, flows, desc)


@dataclass
class ScheduleConfig:
    epochs: int = 8
    upsample_epoch: int = 4  # e1
    iters_per_epoch: int = 6
    coarse_iters: int = 30
    warmup_iters: int = 20
    camera_hypotheses: int = 16
    hypothesis_iters: int = 8
    t_o: float = refine.DEFAULT_T_O
    t_d: float = refine.DEFAULT_T_D
    t_r: float = refine.DEFAULT_T_R
    min_flow_speed: float = 0.3  # px; frames slower than this carry no direction
    grow_k: int = 2
    upsample_min_bones: int = 8
    upsample_max_rounds: int = 3
    step_rot: float = 1e-2  # radians
    step_trans_frac: float = 1e-2  # fraction of bbox diagonal
    pose_decay: float = 1e-3  # gauge regularizer on bone transforms
    vertex_step: float = 0.3
    smooth_gamma: float = 0.25
    focal: float | None = None  # None: image width
    match_tol: float = 0.15
    separation: float | None = None
    patience: int = 2
    seed: int = 0
    threads: int = 0  # 0: hardware count
    weights: LossWeights = field(default_factory=LossWeights)
    resample_hook: object = None  # callable Mesh -> Mesh, default no-op
    coarse_grid: int = 48
    coarse_subdivisions: int = 3

    def __post_init__(self):
        if not (0 < self.upsample_epoch < self.epochs) and self.epochs > 0:
            raise ValueError("need 0 < upsample_epoch < epochs")
        if self.camera_hypotheses < 1:
            raise ValueError("camera_hypotheses must be >= 1")

    def thread_count(self) -> int:
        return self.threads if self.threads > 0 else (os.cpu_count() or 1)


_CONFIG_SCALARS = {
    f.name: f.type
    for f in fields(ScheduleConfig)
    if f.name not in ("weights", "resample_hook")
}


def load_config(path, base: ScheduleConfig | None = None) -> ScheduleConfig:
    """key = value file; loss weights use the loss. prefix."""
    cfg = base or ScheduleConfig()
    overrides = {}
    wvals = {fl.name: getattr(cfg.weights, fl.name) for fl in fields(LossWeights)}
    for ln in Path(path).read_text().splitlines():
        ln = ln.split("#", 1)[0].strip()
        if not ln:
            continue
        if "=" not in ln:
            raise DataError(f"bad config line: {ln}")
        k, v = (s.strip() for s in ln.split("=", 1))
        if k.startswith("loss."):
            wvals[k[5:]] = float(v)
        elif k in _CONFIG_SCALARS:
            overrides[k] = _parse_scalar(k, v)
        else:
            raise DataError(f"unknown config key: {k}")
    overrides["weights"] = LossWeights(**wvals)
    return replace(cfg, **overrides)


def _parse_scalar(key: str, v: str):
    if key in ("focal", "separation"):
        return None if v.lower() == "none" else float(v)
    t = _CONFIG_SCALARS[key]
    if "int" in str(t):
        return int(v)
    if "bool" in str(t):
        return v.lower() in ("1", "true", "yes")
    return float(v)


def config_lines(cfg: ScheduleConfig) -> list[str]:
    out = []
    for name in sorted(_CONFIG_SCALARS):
        out.append(f"{name} = {getattr(cfg, name)}")
    for fl in fields(LossWeights):
        out.append(f"loss.{fl.name} = {getattr(cfg.weights, fl.name)}")
    return out


@dataclass
class ModelState:
    mesh: Mesh
    skeleton: Skeleton
    W: np.ndarray
    frames: list[FrameParams]
    canonical_index: int
    init_extents: dict[int, float]
    phase: int = 1
    epoch: int = 0
    seed: int = 0
    step_scales: list[float] = field(default_factory=list)

    def deformed(self, f: int) -> Mesh:
        return forward_skin(self.mesh, self.W, self.frames[f])

    def refit_weights(self) -> None:
        self.W = skinning_weights(self.mesh, self.skeleton)


# ---------------------------------------------------------------------------
# Coarse phase


def _clean_mask(mask: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n > 1:
        sizes = np.bincount(lab.ravel())
        sizes[0] = 0
        mask = lab == sizes.argmax()
    return ndimage.binary_fill_holes(mask)


def extract_graphs(masks):
    graphs = []
    for m in masks:
        clean = _clean_mask(m)
        skel = thin_silhouette(clean)
        graphs.append(build_skeleton_graph(skel, default_prune_len(clean)))
    return graphs


def _azimuth_camera(
    k: int, K: int, focal: float, width: int, height: int,
    model_pts: np.ndarray, observed: np.ndarray,
) -> Camera:
    """Hypothesis k: orbit the model's vertical axis, fit depth/offset to
    the observed silhouette bounding box."""
    phi = 2 * np.pi * k / K
    R = rotation_from_axis_angle(np.array([0.0, phi, 0.0]))
    pts = model_pts @ R.T
    span_x = max(pts[:, 0].max() - pts[:, 0].min(), 1e-6)
    span_y = max(pts[:, 1].max() - pts[:, 1].min(), 1e-6)
    vs, us = np.nonzero(observed)
    bw = max(us.max() - us.min() + 1, 1)
    bh = max(vs.max() - vs.min() + 1, 1)
    d = focal * max(span_x / bw, span_y / bh)
    uc, vc = us.mean() + 0.5, vs.mean() + 0.5
    cx, cy = width / 2, height / 2
    t = np.array([(uc - cx) * d / focal, (vc - cy) * d / focal, d])
    return Camera(SE3(R, t), focal, cx, cy, width, height)


def coarse_phase(obs: Observations, cfg: ScheduleConfig) -> ModelState:
    """Canonical-frame selection, 2D->3D lift, coarse mesh, camera choice."""
    graphs = extract_graphs(obs.masks)
    ci = canonical_frame(graphs)
    log.info("canonical frame: %d", ci)
    mask = _clean_mask(obs.masks[ci])
    graph = graphs[ci]
    ellipsoids = fit_part_ellipsoids(graph, mask)
    desc = obs.descriptors
    if desc is None or len(desc) != len(ellipsoids):
        desc = descriptors_from_ellipsoids(graph, ellipsoids)
    pairs = match_symmetric_parts(desc, graph, cfg.match_tol)
    log.info("symmetric part pairs: %s", pairs)
    skeleton = lift_to_3d(graph, ellipsoids, pairs, cfg.separation)
    placed = place_parts_3d(graph, ellipsoids, pairs, cfg.separation)
    bridges = [(int(a), int(b)) for a, b in skeleton.joint_bones]
    mesh = coarse_mesh_from_ellipsoids(
        placed, bridges, grid=cfg.coarse_grid,
        icosphere_subdivisions=cfg.coarse_subdivisions,
    )
    W = skinning_weights(mesh, skeleton)

    H, Wd = obs.shape
    focal = cfg.focal if cfg.focal is not None else float(Wd)
    K = cfg.camera_hypotheses
    best = None
    for k in range(K):
        cam = _azimuth_camera(k, K, focal, Wd, H, mesh.vertices, mask)
        fp = FrameParams(SE3.identity(), [SE3.identity()] * skeleton.num_bones, cam)
        fp, loss_k = _refine_root(
            mesh, W, fp, obs.masks[ci], cfg, iters=cfg.hypothesis_iters
        )
        if best is None or loss_k < best[0]:
            best = (loss_k, k, fp)
    loss_best, k_best, fp_best = best
    log.info("camera hypothesis %d/%d selected (silhouette %.5f)", k_best, K, loss_best)

    frames = [
        FrameParams(fp_best.root, list(fp_best.bone_transforms), fp_best.camera)
        for _ in range(obs.num_frames)
    ]
    state = ModelState(
        mesh, skeleton, W, frames, ci,
        {}, phase=1, seed=cfg.seed,
        step_scales=[1.0] * obs.num_frames,
    )
    state.init_extents = refine.endpoint_extents(skeleton, mesh, W)

    _refine_vertices(state, obs, cfg, frames_subset=[ci], iters=cfg.coarse_iters)
    state.refit_weights()
    return state


# ---------------------------------------------------------------------------
# Finite-difference pose optimization


def _signed_distance(mask: np.ndarray):
    """Signed pixel distance to the silhouette boundary (positive outside)
    and its gradient grids."""
    inside = ndimage.distance_transform_edt(mask)
    outside = ndimage.distance_transform_edt(~mask)
    D = outside - inside
    gy, gx = np.gradient(D)
    return D, gx, gy


def _bilinear(grid: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    H, W = grid.shape
    x = np.clip(u - 0.5, 0.0, W - 1.001)
    y = np.clip(v - 0.5, 0.0, H - 1.001)
    j0 = np.floor(x).astype(np.int64)
    i0 = np.floor(y).astype(np.int64)
    tx = x - j0
    ty = y - i0
    j1 = np.minimum(j0 + 1, W - 1)
    i1 = np.minimum(i0 + 1, H - 1)
    return (
        grid[i0, j0] * (1 - tx) * (1 - ty)
        + grid[i0, j1] * tx * (1 - ty)
        + grid[i1, j0] * (1 - tx) * ty
        + grid[i1, j1] * tx * ty
    )


class _FrameObjective:
    """Loss of one frame as a function of its pose parameters.

    The next frame's deformed vertices are snapshotted once so flow and
    rigidity terms stay cheap during probing.
    """

    def __init__(self, state: ModelState, obs: Observations, cfg: ScheduleConfig,
                 f: int, pose_only: bool = False):
        self.mesh = state.mesh
        self.W = state.W
        self.f = f
        self.cfg = cfg
        self.weights = cfg.weights
        self.mask = obs.masks[f]
        self.flow_obs = obs.flows[f] if f < len(obs.flows) else None
        self.pose_only = pose_only
        self.diag = max(state.mesh.bbox_diagonal(), 1e-9)
        if self.flow_obs is not None or self.weights.dynamic_rigidity > 0:
            nxt = min(f + 1, len(state.frames) - 1)
            self.next_mesh = state.deformed(nxt) if nxt != f else None
        else:
            self.next_mesh = None
        if self.weights.dynamic_rigidity > 0 and self.next_mesh is not None:
            edges = state.mesh.edges()
            self.R = rigidity_coefficients(state.W, edges)
        else:
            self.R = None

    def __call__(self, fp: FrameParams) -> float:
        deformed = forward_skin(self.mesh, self.W, fp)
        ro = rasterize(deformed, fp.camera)
        total = self.weights.silhouette * silhouette_loss(ro.silhouette, self.mask)
        if self.flow_obs is not None and self.next_mesh is not None and self.weights.flow > 0:
            rendered = render_flow(deformed, self.next_mesh, fp.camera, fp.camera, ro)
            total += self.weights.flow * flow_loss(rendered, self.flow_obs, self.weights.sigma)
        if self.R is not None and self.next_mesh is not None:
            total += (
                self.weights.dynamic_rigidity
                * dr_loss(deformed, self.next_mesh, self.R)
                / max(len(self.R.edges), 1)
            )
        if not self.pose_only and self.cfg.pose_decay > 0:
            reg = 0.0
            for T in fp.bone_transforms:
                reg += float(np.sum((T.rotation - np.eye(3)) ** 2))
                reg += float(T.translation @ T.translation) / self.diag**2
            total += self.cfg.pose_decay * reg / max(len(fp.bone_transforms), 1)
        return total


def _param_spec(state_or_mesh, skeleton: Skeleton | None, pose_only: bool):
    """(pivots, count): root pivot first, then one per bone when not
    pose_only. Pivoted axis-angle + translation, 6 scalars each."""
    pivots = [np.zeros(3)]
    if not pose_only and skeleton is not None:
        pivots.extend([skeleton.centers[b].copy() for b in range(skeleton.num_bones)])
    return pivots


def _apply_delta(fp: FrameParams, delta: np.ndarray, pivots, s_rot: float, s_trans: float) -> FrameParams:
    """Compose scaled increments (axis-angle about pivot, translation)."""

    def pivoted(T: SE3, d6: np.ndarray, pivot: np.ndarray) -> SE3:
        w = d6[:3] * s_rot
        t = d6[3:] * s_trans
        R = rotation_from_axis_angle(w)
        P = SE3(R, pivot - R @ pivot + t)
        return P.compose(T)

    root = pivoted(fp.root, delta[0:6], pivots[0])
    bones = list(fp.bone_transforms)
    for i in range(1, len(pivots)):
        bones[i - 1] = pivoted(bones[i - 1], delta[6 * i : 6 * i + 6], pivots[i])
    return FrameParams(root, bones, fp.camera)


def _descend_frame(
    objective, fp: FrameParams, pivots, s_rot, s_trans, step_scale: float,
    iters: int, fd_eps: float = 0.25,
):
    """Steepest descent with central differences and backtracking."""
    ndim = 6 * len(pivots)
    loss = objective(fp)
    for _ in range(iters):
        g = np.zeros(ndim)
        for d in range(ndim):
            e = np.zeros(ndim)
            e[d] = fd_eps
            lp = objective(_apply_delta(fp, e, pivots, s_rot, s_trans))
            lm = objective(_apply_delta(fp, -e, pivots, s_rot, s_trans))
            g[d] = (lp - lm) / (2 * fd_eps)
        gn = np.linalg.norm(g)
        if gn < 1e-12:
            break
        direction = -g / gn
        accepted = False
        for _ in range(11):
            trial = _apply_delta(fp, step_scale * direction, pivots, s_rot, s_trans)
            lt = objective(trial)
            if lt <= loss:
                fp, loss = trial, lt
                step_scale = min(step_scale * 1.3, 8.0)
                accepted = True
                break
            step_scale = max(step_scale / 2.0, 1e-6)
        if not accepted:
            log.warning("descent: 10 halvings without improvement, accepting")
            fp = _apply_delta(fp, step_scale * direction, pivots, s_rot, s_trans)
            loss = objective(fp)
            break
    return fp, loss, max(step_scale, 0.05)


def _refine_root(mesh, W, fp, mask, cfg, iters):
    """Root-only silhouette fit (used per camera hypothesis)."""
    obj_mask = mask

    def objective(p):
        deformed = forward_skin(mesh, W, p)
        return silhouette_loss(rasterize(deformed, p.camera).silhouette, obj_mask)

    diag = max(mesh.bbox_diagonal(), 1e-9)
    fp, loss, _ = _descend_frame(
        objective, fp, [np.zeros(3)], cfg.step_rot, cfg.step_trans_frac * diag,
        1.0, iters,
    )
    return fp, loss


def e_step(state: ModelState, obs: Observations, cfg: ScheduleConfig,
           sweeps: int | None = None, pose_only: bool = False) -> ModelState:
    """Update per-frame poses (and canonical vertices) with skeleton fixed."""
    if sweeps is None:
        sweeps = cfg.iters_per_epoch
    if sweeps <= 0:
        return state
    diag = max(state.mesh.bbox_diagonal(), 1e-9)
    s_trans = cfg.step_trans_frac * diag
    pivots = _param_spec(state.mesh, None if pose_only else state.skeleton, pose_only)

    def work(f):
        objective = _FrameObjective(state, obs, cfg, f, pose_only)
        fp, loss, scale = _descend_frame(
            objective, state.frames[f], pivots, cfg.step_rot, s_trans,
            state.step_scales[f], sweeps,
        )
        return f, fp, loss, scale

    n_threads = cfg.thread_count()
    results = []
    if n_threads > 1 and obs.num_frames > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as ex:
            results = list(ex.map(work, range(obs.num_frames)))
    else:
        results = [work(f) for f in range(obs.num_frames)]
    for f, fp, loss, scale in sorted(results, key=lambda r: r[0]):
        state.frames[f] = fp
        state.step_scales[f] = scale
    return state


def warmup(state: ModelState, obs: Observations, cfg: ScheduleConfig) -> ModelState:
    """Motion-only fitting with the mesh frozen; frames chain outward from
    the canonical frame so each starts at its neighbor's solution."""
    ci = state.canonical_index
    order = [ci]
    for k in range(1, obs.num_frames):
        if ci + k < obs.num_frames:
            order.append(ci + k)
        if ci - k >= 0:
            order.append(ci - k)
    diag = max(state.mesh.bbox_diagonal(), 1e-9)
    pivots = _param_spec(state.mesh, None, True)
    for f in order:
        src = f + 1 if f < ci else f - 1
        if f != ci and 0 <= src < obs.num_frames:
            prev = state.frames[src]
            state.frames[f] = FrameParams(prev.root, list(prev.bone_transforms), prev.camera)
        objective = _FrameObjective(state, obs, cfg, f, pose_only=True)
        fp, loss, scale = _descend_frame(
            objective, state.frames[f], pivots, cfg.step_rot,
            cfg.step_trans_frac * diag, 1.0, cfg.warmup_iters,
        )
        state.frames[f] = fp
        state.step_scales[f] = scale
    return state


# ---------------------------------------------------------------------------
# Canonical vertex refinement


def _refine_vertices(state: ModelState, obs: Observations, cfg: ScheduleConfig,
                     frames_subset=None, iters: int = 1) -> None:
    """Signed-distance pull toward the observed silhouettes plus smoothing
    and symmetry relaxation, applied to the canonical mesh."""
    if cfg.vertex_step <= 0 or iters <= 0:
        return
    frames_subset = list(frames_subset or range(obs.num_frames))
    fields_cache = {f: _signed_distance(_clean_mask(obs.masks[f])) for f in frames_subset}
    nbrs = state.mesh.vertex_neighbors()
    diag = max(state.mesh.bbox_diagonal(), 1e-9)
    clip = 0.02 * diag
    for _ in range(iters):
        pulls = np.zeros_like(state.mesh.vertices)
        counts = np.zeros(state.mesh.num_vertices)
        for f in frames_subset:
            fp = state.frames[f]
            A, t = blend_transforms(state.W, fp)
            deformed = np.einsum("nij,nj->ni", A, state.mesh.vertices) + t
            dmesh = state.mesh.with_vertices(deformed)
            ro = rasterize(dmesh, fp.camera)
            vis = vertex_visibility(dmesh, fp.camera, ro)
            uv, z = project_points(fp.camera, deformed)
            ok = z > 1e-9
            D, gx, gy = fields_cache[f]
            dvals = _bilinear(D, uv[ok][:, 0], uv[ok][:, 1])
            gxv = _bilinear(gx, uv[ok][:, 0], uv[ok][:, 1])
            gyv = _bilinear(gy, uv[ok][:, 0], uv[ok][:, 1])
            gnorm = np.hypot(gxv, gyv)
            gnorm = np.where(gnorm < 1e-6, 1.0, gnorm)
            # contour vertices: visible with an invisible neighbor
            contour = np.zeros(len(deformed), dtype=bool)
            visidx = np.nonzero(vis)[0]
            for i in visidx:
                if not vis[nbrs[i]].all():
                    contour[i] = True
            active = np.zeros(len(deformed), dtype=bool)
            active[ok] = dvals > 0  # outside pulls in
            active |= contour  # contour follows the signed field both ways
            act_ok = active & ok
            duv = np.zeros((len(deformed), 2))
            sel = act_ok[ok]
            duv[ok] = -np.stack([gxv / gnorm, gyv / gnorm], axis=1) * dvals[:, None]
            duv[~act_ok] = 0.0
            # lift pixel pull to a canonical-space displacement
            dcam = np.zeros((len(deformed), 3))
            dcam[:, 0] = duv[:, 0] * z / fp.camera.focal
            dcam[:, 1] = duv[:, 1] * z / fp.camera.focal
            dworld = dcam @ fp.camera.extrinsic.rotation  # R^T applied row-wise
            det = np.linalg.det(A)
            good = act_ok & (np.abs(det) > 1e-9)
            if good.any():
                dcanon = np.linalg.solve(A[good], dworld[good][..., None])[..., 0]
                pulls[good] += np.clip(dcanon, -clip, clip)
                counts[good] += 1
        avg = pulls / np.maximum(counts, 1)[:, None]
        V = state.mesh.vertices + cfg.vertex_step * avg
        # smoothing relaxation
        ringmean = np.stack([V[nb].mean(axis=0) if len(nb) else V[i] for i, nb in enumerate(nbrs)])
        V = V + cfg.smooth_gamma * (ringmean - V)
        # symmetry relaxation toward the mirrored nearest neighbor
        if cfg.weights.symmetry > 0:
            from scipy.spatial import cKDTree

            refl = V * np.array([1.0, 1.0, -1.0])
            _, idx = cKDTree(V).query(refl)
            target = V[idx] * np.array([1.0, 1.0, -1.0])
            V = V + min(cfg.weights.symmetry, 0.5) * 0.5 * (target - V)
        state.mesh = state.mesh.with_vertices(V)


# ---------------------------------------------------------------------------
# M-step


def _remap_frames(frames: list[FrameParams], lineage) -> list[FrameParams]:
    out = []
    for fp in frames:
        bones = [fp.bone_transforms[src] for src in lineage]
        out.append(FrameParams(fp.root, bones, fp.camera))
    return out


def _bone_flows(state: ModelState, obs: Observations) -> list:
    flows = []
    for f in range(obs.num_frames - 1):
        if obs.flows[f] is None:
            continue
        deformed = state.deformed(f)
        cam = state.frames[f].camera
        ro = rasterize(deformed, cam)
        vis = vertex_visibility(deformed, cam, ro)
        F_S, sampled = surface_flow(obs.flows[f], deformed, cam)
        flows.append(bone_flow(F_S, state.W, vis & sampled))
    return flows


def shift_grow(state: ModelState, obs: Observations, cfg: ScheduleConfig) -> ModelState:
    """Pre-upsample skeleton adaptation: shift centers, grow endpoints."""
    skel = refine.bone_shift(state.skeleton, state.mesh, state.W)
    skel, lineage = refine.grow_skeleton(
        skel, state.mesh, state.W, state.init_extents, cfg.grow_k, return_lineage=True
    )
    if len(lineage) != state.skeleton.num_bones:
        state.frames = _remap_frames(state.frames, lineage)
    state.skeleton = skel
    state.refit_weights()
    new_extents = refine.endpoint_extents(skel, state.mesh, state.W)
    for b, ext in new_extents.items():
        src = lineage[b] if b < len(lineage) else None
        if b not in state.init_extents or (src is not None and src != b):
            state.init_extents[b] = ext
    state.init_extents = {
        b: state.init_extents.get(b, new_extents.get(b, 0.0))
        for b in new_extents
    }
    return state


def apply_upsample(state: ModelState, cfg: ScheduleConfig) -> ModelState:
    """Upsample until the skeleton is fine enough for merge-driven
    granularity selection (repeated doubling, bounded rounds)."""
    rounds = 0
    while (
        state.skeleton.num_bones < cfg.upsample_min_bones
        and rounds < cfg.upsample_max_rounds
    ):
        skel, lineage = refine.upsample_skeleton(state.skeleton, return_lineage=True)
        state.frames = _remap_frames(state.frames, lineage)
        state.skeleton = skel
        rounds += 1
    if rounds == 0:  # already fine: one doubling per the schedule
        skel, lineage = refine.upsample_skeleton(state.skeleton, return_lineage=True)
        state.frames = _remap_frames(state.frames, lineage)
        state.skeleton = skel
    state.refit_weights()
    state.init_extents = refine.endpoint_extents(state.skeleton, state.mesh, state.W)
    log.info("upsampled skeleton to %d bones", state.skeleton.num_bones)
    return state


def _harmonize_precisions(skel: Skeleton) -> Skeleton:
    """Keep each bone's along-axis Gaussian radius at length/2.

    Merged precisions blend two narrow Gaussians, which would leave no
    vertices in the t_r straddle band between adjacent parts; matching the
    lift-time construction (major radius = half length) keeps the skinning
    transition width proportional to the part size.
    """
    out = skel.copy()
    for b in range(skel.num_bones):
        w, V = np.linalg.eigh(skel.precisions[b])
        k = int(np.argmin(w))  # smallest precision = major axis
        w = w.copy()
        w[k] = 1.0 / max(skel.lengths[b] / 2.0, 1e-9) ** 2
        out.precisions[b] = (V * w) @ V.T
    return out


def m_step(state: ModelState, obs: Observations, cfg: ScheduleConfig) -> ModelState:
    """Full skeleton refinement: shift, grow, merge, split, joints, lengths."""
    state = shift_grow(state, obs, cfg)

    flows = _bone_flows(state, obs)
    if flows:
        skel, lineage = refine.merge_bones(
            state.skeleton, flows, cfg.t_o, state.W,
            return_lineage=True, min_speed=cfg.min_flow_speed,
        )
        if skel.num_bones != state.skeleton.num_bones:
            log.info("merged %d bones", state.skeleton.num_bones - skel.num_bones)
            state.frames = _remap_frames(state.frames, lineage)
            state.skeleton = skel
            state.refit_weights()

    per_frame = np.stack(
        [
            refine.deformed_bone_lengths(state.skeleton, state.mesh, state.W, fp, cfg.t_r)
            for fp in state.frames
        ]
    )
    skel, lineage = refine.split_joints(state.skeleton, per_frame, cfg.t_d, return_lineage=True)
    if skel.num_bones != state.skeleton.num_bones:
        log.info("split added %d bones", skel.num_bones - state.skeleton.num_bones)
        state.frames = _remap_frames(state.frames, lineage)
        state.skeleton = skel
        state.refit_weights()

    state.skeleton = refine.joint_positions(state.skeleton, state.mesh, state.W, cfg.t_r)
    state.skeleton = refine.bone_lengths(state.skeleton, state.mesh, state.W)
    state.skeleton = _harmonize_precisions(state.skeleton)
    state.refit_weights()
    state.skeleton.validate()
    keep = refine.endpoint_extents(state.skeleton, state.mesh, state.W)
    state.init_extents = {
        b: state.init_extents.get(b, keep[b]) for b in keep
    }
    return state


# ---------------------------------------------------------------------------
# Full run


def run_s3o(obs: Observations, cfg: ScheduleConfig, out_dir=None):
    """Coarse phase, warm-up, then EM epochs with upsampling at e1.

    Stops early once the skeleton structure is unchanged for `patience`
    consecutive post-upsample epochs. Returns the final state; when out_dir
    is given, writes the artifact bundle there.
    """
    state = coarse_phase(obs, cfg)
    loss_log = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        loss_log = LossLog(Path(out_dir) / "loss_log.csv")
    if cfg.epochs > 0:
        state.phase = 2
        state = warmup(state, obs, cfg)
        unchanged = 0
        for e in range(1, cfg.epochs + 1):
            state.epoch = e
            state = e_step(state, obs, cfg)
            _refine_vertices(state, obs, cfg, iters=1)
            state.refit_weights()
            sig_before = state.skeleton.structure_signature()
            if e < cfg.upsample_epoch:
                state = shift_grow(state, obs, cfg)
            elif e == cfg.upsample_epoch:
                state = apply_upsample(state, cfg)
            else:
                state = m_step(state, obs, cfg)
            if cfg.resample_hook is not None:
                state.mesh = cfg.resample_hook(state.mesh)
                state.refit_weights()
            if loss_log is not None:
                total = _snapshot_loss(state, obs, cfg)
                loss_log.append(e, {"objective": total}, total)
            if e > cfg.upsample_epoch:
                if state.skeleton.structure_signature() == sig_before:
                    unchanged += 1
                else:
                    unchanged = 0
                if unchanged >= cfg.patience:
                    log.info("early stop at epoch %d (skeleton stable)", e)
                    break
        # final polish: refine motion against the converged skeleton and
        # refresh joints/lengths without structural edits
        state = e_step(state, obs, cfg)
        state.skeleton = refine.joint_positions(state.skeleton, state.mesh, state.W, cfg.t_r)
        state.skeleton = refine.bone_lengths(state.skeleton, state.mesh, state.W)
        state.skeleton = _harmonize_precisions(state.skeleton)
        state.refit_weights()
    if out_dir is not None:
        write_bundle(state, obs, cfg, out_dir)
    return state


def _snapshot_loss(state: ModelState, obs: Observations, cfg: ScheduleConfig) -> float:
    total = 0.0
    for f in range(obs.num_frames):
        ro = rasterize(state.deformed(f), state.frames[f].camera)
        total += silhouette_loss(ro.silhouette, obs.masks[f])
    return total / obs.num_frames


def write_bundle(state: ModelState, obs: Observations, cfg: ScheduleConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_obj(out / "mesh_canonical.obj", state.mesh)
    for f in range(obs.num_frames):
        write_obj(out / f"mesh_{f:04d}.obj", state.deformed(f))
    write_skel(out / "skeleton_final.skel", state.skeleton)
    with open(out / "params.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "kind", "index", *[f"r{i}" for i in range(9)],
                    "tx", "ty", "tz", "focal"])
        for f, fp in enumerate(state.frames):
            w.writerow([f, "root", 0, *fp.root.rotation.reshape(9), *fp.root.translation, ""])
            for b, T in enumerate(fp.bone_transforms):
                w.writerow([f, "bone", b, *T.rotation.reshape(9), *T.translation, ""])
            c = fp.camera
            w.writerow([f, "camera", 0, *c.extrinsic.rotation.reshape(9),
                        *c.extrinsic.translation, c.focal])
    (out / "config_effective.txt").write_text("\n".join(config_lines(cfg)) + "\n")
    H, W = obs.shape
    (out / "image_size.txt").write_text(f"{W} {H}\n")
    return out
