"""Deterministic z-buffer rasterization and synthetic optical flow.

Pixel (i, j) samples the scene at center (j + 0.5, i + 0.5); coverage ties
on shared edges follow a top-left rule so every pixel belongs to exactly
one of two abutting triangles. Nearest surface wins, with ties broken by
the lower face index. Back faces are rasterized too, so closed meshes
self-occlude correctly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .errors import DataError, DimensionMismatch, TopologyMismatch
from .geom import Camera, Mesh, project_points

FLO_MAGIC = 202021.25
FLOW_INVALID = 1e10
DEPTH_TIE = 1e-9


@dataclass
class RasterOutput:
    depth: np.ndarray  # (H, W) float64, +inf background
    face_index: np.ndarray  # (H, W) int32, -1 background
    bary: np.ndarray  # (H, W, 3) float64, perspective-corrected

    @property
    def silhouette(self) -> np.ndarray:
        return self.face_index >= 0


@dataclass
class FlowField:
    flow: np.ndarray  # (H, W, 2) float, (du, dv)
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.flow.shape[:2] != self.valid.shape:
            raise DimensionMismatch("flow/validity shape mismatch")

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


@njit(cache=True, nogil=True)
def _raster_kernel(uv, z, faces, H, W, depth, face_index, bary):
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        z0, z1, z2 = z[i0], z[i1], z[i2]
        if z0 <= 1e-9 or z1 <= 1e-9 or z2 <= 1e-9:
            continue  # no partial clipping at desk scale
        x0, y0 = uv[i0, 0], uv[i0, 1]
        x1, y1 = uv[i1, 0], uv[i1, 1]
        x2, y2 = uv[i2, 0], uv[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        sign = 1.0
        if area < 0.0:
            sign = -1.0
            area = -area
        minx = min(x0, min(x1, x2))
        maxx = max(x0, max(x1, x2))
        miny = min(y0, min(y1, y2))
        maxy = max(y0, max(y1, y2))
        jlo = max(int(np.ceil(minx - 0.5)), 0)
        jhi = min(int(np.floor(maxx - 0.5)), W - 1)
        ilo = max(int(np.ceil(miny - 0.5)), 0)
        ihi = min(int(np.floor(maxy - 0.5)), H - 1)
        if jlo > jhi or ilo > ihi:
            continue
        iz0, iz1, iz2 = 1.0 / z0, 1.0 / z1, 1.0 / z2
        for i in range(ilo, ihi + 1):
            py = i + 0.5
            for j in range(jlo, jhi + 1):
                px = j + 0.5
                w0 = sign * ((x2 - x1) * (py - y1) - (y2 - y1) * (px - x1))
                w1 = sign * ((x0 - x2) * (py - y2) - (y0 - y2) * (px - x2))
                w2 = sign * ((x1 - x0) * (py - y0) - (y1 - y0) * (px - x0))
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                # top-left fill rule on exact edge hits
                if w0 == 0.0 and not _topleft(sign * (x2 - x1), sign * (y2 - y1)):
                    continue
                if w1 == 0.0 and not _topleft(sign * (x0 - x2), sign * (y0 - y2)):
                    continue
                if w2 == 0.0 and not _topleft(sign * (x1 - x0), sign * (y1 - y0)):
                    continue
                b0 = w0 / area
                b1 = w1 / area
                b2 = w2 / area
                invz = b0 * iz0 + b1 * iz1 + b2 * iz2
                zp = 1.0 / invz
                if zp < depth[i, j] - DEPTH_TIE:
                    depth[i, j] = zp
                    face_index[i, j] = f
                    bary[i, j, 0] = b0 * iz0 * zp
                    bary[i, j, 1] = b1 * iz1 * zp
                    bary[i, j, 2] = b2 * iz2 * zp


@njit(cache=True, nogil=True)
def _topleft(dx, dy):
    # edge direction in the positive-area ordering, y pointing down
    return dy > 0.0 or (dy == 0.0 and dx < 0.0)


def rasterize(mesh: Mesh, cam: Camera) -> RasterOutput:
    """Render depth, face indices and perspective-correct barycentrics."""
    H, W = cam.height, cam.width
    depth = np.full((H, W), np.inf)
    face_index = np.full((H, W), -1, dtype=np.int32)
    bary = np.zeros((H, W, 3))
    if mesh.num_vertices and len(mesh.faces):
        uv, z = project_points(cam, mesh.vertices)
        uv = np.nan_to_num(uv, nan=0.0)
        _raster_kernel(
            np.ascontiguousarray(uv),
            np.ascontiguousarray(z),
            np.ascontiguousarray(mesh.faces.astype(np.int64)),
            H,
            W,
            depth,
            face_index,
            bary,
        )
    return RasterOutput(depth, face_index, bary)


def render_flow(
    mesh_t: Mesh, mesh_t1: Mesh, cam_t: Camera, cam_t1: Camera,
    raster_t: RasterOutput | None = None,
) -> FlowField:
    """Flow from frame t to t+1 for every pixel covered at t.

    The surface point under each pixel is carried to mesh_t1 by its
    barycentric coordinates and reprojected; flow = destination - source.
    """
    if mesh_t.num_vertices != mesh_t1.num_vertices or not np.array_equal(
        mesh_t.faces, mesh_t1.faces
    ):
        raise TopologyMismatch("flow needs identical topology at t and t+1")
    if raster_t is None:
        raster_t = rasterize(mesh_t, cam_t)
    H, W = raster_t.depth.shape
    flow = np.zeros((H, W, 2))
    valid = raster_t.face_index >= 0
    ii, jj = np.nonzero(valid)
    if len(ii):
        f = raster_t.face_index[ii, jj]
        b = raster_t.bary[ii, jj]
        tri = mesh_t1.vertices[mesh_t1.faces[f]]  # (K, 3, 3)
        pts = np.einsum("kc,kcd->kd", b, tri)
        uv, z = project_points(cam_t1, pts)
        ok = z > 1e-9
        src = np.stack([jj + 0.5, ii + 0.5], axis=1)
        flow[ii[ok], jj[ok]] = uv[ok] - src[ok]
        valid = valid.copy()
        valid[ii[~ok], jj[~ok]] = False
    return FlowField(flow, valid)


def vertex_visibility(
    mesh: Mesh, cam: Camera, raster: RasterOutput | None = None
) -> np.ndarray:
    """Boolean per-vertex visibility against the z-buffer.

    A vertex is visible when it projects inside the image and its depth is
    within a scene-scaled tolerance of the buffer around its pixel; the
    comparison uses a 3x3 neighborhood maximum so the buffer's pixel-center
    sampling does not misclassify vertices near depth gradients or the
    silhouette rim.
    """
    if raster is None:
        raster = rasterize(mesh, cam)
    uv, z = project_points(cam, mesh.vertices)
    vis = np.zeros(mesh.num_vertices, dtype=bool)
    delta = 1e-3 * max(mesh.bbox_diagonal(), 1e-12)
    in_front = z > 1e-9
    u = np.where(in_front, uv[:, 0], -1.0)
    v = np.where(in_front, uv[:, 1], -1.0)
    inside = in_front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    # The buffer samples pixel centers, not the vertex: bilinearly
    # interpolate the four surrounding depths on interior neighborhoods and
    # fall back to their maximum when any of them is background (rim).
    j0 = np.floor(u - 0.5).astype(np.int64)
    i0 = np.floor(v - 0.5).astype(np.int64)
    tx = (u - 0.5) - j0
    ty = (v - 0.5) - i0
    corners = []
    for di in (0, 1):
        for dj in (0, 1):
            ii = np.clip(i0 + di, 0, cam.height - 1)
            jj = np.clip(j0 + dj, 0, cam.width - 1)
            corners.append(raster.depth[ii, jj])
    d00, d01, d10, d11 = corners
    interp = (
        d00 * (1 - tx) * (1 - ty)
        + d01 * tx * (1 - ty)
        + d10 * (1 - tx) * ty
        + d11 * tx * ty
    )
    hardest = np.maximum(np.maximum(d00, d01), np.maximum(d10, d11))
    buf = np.where(np.isfinite(hardest), interp, hardest)
    vis[inside] = z[inside] <= buf[inside] + delta
    return vis


def render_part_masks(
    mesh: Mesh, W: np.ndarray, cam: Camera, raster: RasterOutput | None = None
) -> list[np.ndarray]:
    """Per-part silhouettes: each covered pixel goes to the part that
    dominates the skinning of its fragment's triangle."""
    if raster is None:
        raster = rasterize(mesh, cam)
    nparts = W.shape[1]
    covered = raster.face_index >= 0
    out = [np.zeros_like(covered) for _ in range(nparts)]
    ii, jj = np.nonzero(covered)
    if len(ii):
        f = raster.face_index[ii, jj]
        b = raster.bary[ii, jj]
        wtri = W[mesh.faces[f]]  # (K, 3, B)
        frag_w = np.einsum("kc,kcb->kb", b, wtri)
        part = frag_w.argmax(axis=1)
        for p in range(nparts):
            sel = part == p
            out[p][ii[sel], jj[sel]] = True
    return out


# ---------------------------------------------------------------------------
# Middlebury .flo


def write_flo(path, field: FlowField) -> None:
    H, W = field.shape
    data = field.flow.astype(np.float32).copy()
    data[~field.valid] = FLOW_INVALID
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", W, H))
        f.write(data.astype("<f4").tobytes())


def read_flo(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise DataError(f"{path}: truncated .flo file")
    magic = struct.unpack("<f", raw[:4])[0]
    if abs(magic - FLO_MAGIC) > 1e-3:
        raise DataError(f"{path}: bad .flo magic {magic}")
    W, H = struct.unpack("<ii", raw[4:12])
    expect = 12 + 8 * W * H
    if len(raw) != expect:
        raise DataError(f"{path}: expected {expect} bytes, found {len(raw)}")
    data = np.frombuffer(raw[12:], dtype="<f4").reshape(H, W, 2).astype(np.float64)
    valid = np.all(np.abs(data) < 1e9, axis=2) & np.all(np.isfinite(data), axis=2)
    return FlowField(data, valid)
