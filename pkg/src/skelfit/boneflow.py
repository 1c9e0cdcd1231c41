"""Warp observed 2D optical flow onto bones via visible surface vertices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .geom import Camera, Mesh, project_points
from .render import FlowField

UNSUPPORTED_FRACTION = 1e-6


@dataclass
class BoneFlow:
    vectors: np.ndarray  # (B, 2) per-bone (du, dv)
    support_mass: np.ndarray  # (B,) sum of visible skinning mass
    supported: np.ndarray  # (B,) bool

    def direction(self, b: int) -> np.ndarray:
        v = self.vectors[b]
        n = np.linalg.norm(v)
        return v / n if n > 0 else v


def surface_flow(flow: FlowField, mesh_t: Mesh, cam_t: Camera):
    """Sample the flow field at each projected vertex (bilinear).

    Returns (F_S (N, 2), supported (N,) bool). Vertices landing outside the
    image or on all-invalid neighborhoods get zero flow, unsupported.
    """
    H, W = flow.shape
    if (H, W) != (cam_t.height, cam_t.width):
        raise DimensionMismatch(
            f"flow {H}x{W} does not match camera image {cam_t.height}x{cam_t.width}"
        )
    uv, z = project_points(cam_t, mesh_t.vertices)
    N = mesh_t.num_vertices
    out = np.zeros((N, 2))
    supported = np.zeros(N, dtype=bool)
    in_front = z > 1e-9
    # grid values live at pixel centers
    gx = uv[:, 0] - 0.5
    gy = uv[:, 1] - 0.5
    ok = in_front & (uv[:, 0] >= 0) & (uv[:, 0] < W) & (uv[:, 1] >= 0) & (uv[:, 1] < H)
    idx = np.nonzero(ok)[0]
    if len(idx) == 0:
        return out, supported
    x = gx[idx]
    y = gy[idx]
    j0 = np.floor(x).astype(np.int64)
    i0 = np.floor(y).astype(np.int64)
    tx = x - j0
    ty = y - i0
    acc = np.zeros((len(idx), 2))
    wsum = np.zeros(len(idx))
    for di, dj, w in (
        (0, 0, (1 - tx) * (1 - ty)),
        (0, 1, tx * (1 - ty)),
        (1, 0, (1 - tx) * ty),
        (1, 1, tx * ty),
    ):
        ii = i0 + di
        jj = j0 + dj
        inside = (ii >= 0) & (ii < H) & (jj >= 0) & (jj < W)
        iic = np.clip(ii, 0, H - 1)
        jjc = np.clip(jj, 0, W - 1)
        w_eff = w * inside * flow.valid[iic, jjc]
        acc += w_eff[:, None] * flow.flow[iic, jjc]
        wsum += w_eff
    good = wsum > 1e-12
    acc[good] /= wsum[good, None]
    out[idx[good]] = acc[good]
    supported[idx[good]] = True
    return out, supported


def bone_flow(
    F_S: np.ndarray,
    W: np.ndarray,
    visibility: np.ndarray,
    normalize: bool = True,
) -> BoneFlow:
    """Aggregate visible per-vertex flow into per-bone motion.

    The raw sum over vertices of W[n,b] * F_S[n] * V[n] is optionally
    divided by the visible mass so magnitudes are scale-free; bones whose
    visible mass falls below 1e-6 of the total are flagged unsupported.
    """
    F_S = np.asarray(F_S, dtype=np.float64).reshape(-1, 2)
    W = np.asarray(W, dtype=np.float64)
    V = np.asarray(visibility, dtype=np.float64).reshape(-1)
    if not (len(F_S) == len(W) == len(V)):
        raise DimensionMismatch("F_S, W and visibility must share vertex count")
    WV = W * V[:, None]
    vectors = WV.T @ F_S
    mass = WV.sum(axis=0)
    eps = UNSUPPORTED_FRACTION * max(V.sum(), 1.0)
    supported = mass > eps
    if normalize:
        vectors = np.where(supported[:, None], vectors / np.maximum(mass, 1e-300)[:, None], 0.0)
    else:
        vectors = np.where(supported[:, None], vectors, 0.0)
    return BoneFlow(vectors, mass, supported)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))
