"""2D skeletonization of binary silhouettes and canonical-frame selection.

Masks are (H, W) bool arrays indexed [v, u] (row, column). Pixel positions
are reported as (u, v). Foreground uses 8-connectivity throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit
from scipy import ndimage

from .errors import DataError, DegenerateExtent, EmptyMask, MultipleComponents

EIGHT = np.ones((3, 3), dtype=bool)


def count_components(mask: np.ndarray) -> int:
    """8-connected foreground component count."""
    _, n = ndimage.label(mask, structure=EIGHT)
    return int(n)


@njit(cache=True)
def _neighbors(grid, v, u):
    """8-neighborhood in Zhang-Suen order p2..p9 (N, NE, E, SE, S, SW, W, NW)."""
    return (
        grid[v - 1, u],
        grid[v - 1, u + 1],
        grid[v, u + 1],
        grid[v + 1, u + 1],
        grid[v + 1, u],
        grid[v + 1, u - 1],
        grid[v, u - 1],
        grid[v - 1, u - 1],
    )


@njit(cache=True)
def _crossings_and_count(grid, v, u):
    p = _neighbors(grid, v, u)
    b = 0
    a = 0
    for k in range(8):
        b += p[k]
        if p[k] == 0 and p[(k + 1) % 8] == 1:
            a += 1
    return a, b


@njit(cache=True)
def _removable(grid, v, u, sub):
    """Zhang-Suen deletion test for sub-iteration 0 or 1."""
    p2, p3, p4, p5, p6, p7, p8, p9 = _neighbors(grid, v, u)
    a, b = _crossings_and_count(grid, v, u)
    if b < 2 or b > 6 or a != 1:
        return False
    if sub == 0:
        return p2 * p4 * p6 == 0 and p4 * p6 * p8 == 0
    return p2 * p4 * p8 == 0 and p2 * p6 * p8 == 0


@njit(cache=True)
def _collect_candidates(grid, sub):
    """Pixels passing the parallel deletion test for one sub-iteration."""
    H, W = grid.shape
    cand = np.empty((H * W, 2), dtype=np.int64)
    n = 0
    for v in range(1, H - 1):
        for u in range(1, W - 1):
            if grid[v, u] == 1 and _removable(grid, v, u, sub):
                cand[n, 0] = v
                cand[n, 1] = u
                n += 1
    return cand[:n]


@njit(cache=True)
def _delete_sequential(grid, cand, sub):
    """Scan-order deletion with a recheck against the mutating grid.

    Strictly weaker than the parallel pass but provably topology-safe;
    used only when the parallel pass would change the component count.
    """
    removed = 0
    for k in range(len(cand)):
        v, u = cand[k, 0], cand[k, 1]
        if _removable(grid, v, u, sub):
            grid[v, u] = 0
            removed += 1
    return removed


@njit(cache=True)
def _collapse_blocks(grid):
    """Remove pixels of residual 2x2 foreground blocks when topology-safe."""
    H, W = grid.shape
    changed = True
    while changed:
        changed = False
        for v in range(1, H - 1):
            for u in range(1, W - 1):
                if grid[v, u] != 1:
                    continue
                in_block = (
                    (grid[v, u + 1] and grid[v + 1, u] and grid[v + 1, u + 1])
                    or (grid[v, u - 1] and grid[v + 1, u - 1] and grid[v + 1, u])
                    or (grid[v - 1, u] and grid[v - 1, u + 1] and grid[v, u + 1])
                    or (grid[v - 1, u - 1] and grid[v - 1, u] and grid[v, u - 1])
                )
                if not in_block:
                    continue
                a, b = _crossings_and_count(grid, v, u)
                if a == 1 and 2 <= b <= 6:
                    grid[v, u] = 0
                    changed = True
    return grid


def thin_silhouette(
    mask: np.ndarray,
    fill_holes: bool = True,
    largest_component: bool = False,
) -> np.ndarray:
    """Thin a silhouette to a one-pixel-wide skeleton.

    The output is a subset of the input foreground with the same number of
    8-connected components and no 2x2 foreground block.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("no foreground pixels")
    ncomp = count_components(mask)
    if ncomp > 1:
        if not largest_component:
            raise MultipleComponents(f"{ncomp} foreground components")
        labels, _ = ndimage.label(mask, structure=EIGHT)
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        mask = labels == sizes.argmax()
    if fill_holes:
        mask = ndimage.binary_fill_holes(mask)
    # pad so the kernels never read out of bounds
    grid = np.zeros((mask.shape[0] + 2, mask.shape[1] + 2), dtype=np.uint8)
    grid[1:-1, 1:-1] = mask
    ncomp = count_components(grid > 0)
    while True:
        changed = False
        for sub in (0, 1):
            cand = _collect_candidates(grid, sub)
            if len(cand) == 0:
                continue
            # parallel deletion keeps erosion symmetric; fall back to the
            # sequential topology-safe pass if it would merge/split/kill a
            # component (tiny residues only)
            before = grid[cand[:, 0], cand[:, 1]].copy()
            grid[cand[:, 0], cand[:, 1]] = 0
            if count_components(grid > 0) != ncomp:
                grid[cand[:, 0], cand[:, 1]] = before
                changed |= _delete_sequential(grid, cand, sub) > 0
            else:
                changed = True
        if not changed:
            break
    grid = _collapse_blocks(grid)
    return grid[1:-1, 1:-1].astype(bool)


@dataclass
class Node2D:
    u: float
    v: float
    kind: str  # "endpoint" | "junction"


@dataclass
class Edge2D:
    a: int
    b: int
    trace: np.ndarray  # (K, 2) int (u, v), endpoints inclusive
    arc_length: float


@dataclass
class SkeletonGraph2D:
    nodes: list[Node2D]
    edges: list[Edge2D]

    def degrees(self) -> np.ndarray:
        d = np.zeros(len(self.nodes), dtype=int)
        for e in self.edges:
            d[e.a] += 1
            d[e.b] += 1
        return d

    def all_pixels(self) -> np.ndarray:
        """(K, 2) array of (u, v) over node positions and edge traces."""
        pts = [np.array([[n.u, n.v] for n in self.nodes], dtype=float).reshape(-1, 2)]
        for e in self.edges:
            pts.append(e.trace.astype(float))
        return np.concatenate(pts, axis=0)

    def extent_ratio(self) -> float:
        px = self.all_pixels()
        du = px[:, 0].max() - px[:, 0].min()
        dv = px[:, 1].max() - px[:, 1].min()
        if dv == 0:
            return np.inf
        return float(du / dv)

    def num_components(self) -> int:
        n = len(self.nodes)
        parent = list(range(n))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for e in self.edges:
            ra, rb = find(e.a), find(e.b)
            if ra != rb:
                parent[ra] = rb
        return len({find(i) for i in range(n)})

    def cycle_count(self) -> int:
        return len(self.edges) - len(self.nodes) + self.num_components()


_STEPS = [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)]


def _polyline_length(trace: np.ndarray) -> float:
    d = np.diff(trace.astype(float), axis=0)
    return float(np.hypot(d[:, 0], d[:, 1]).sum())


def _neighbor_count_grid(skel: np.ndarray) -> np.ndarray:
    """Foreground 8-neighbor count per skeleton pixel (0 off-skeleton)."""
    s = skel.astype(np.int32)
    counts = np.zeros_like(s)
    for dv, du in _STEPS:
        shifted = np.zeros_like(s)
        vs = slice(max(dv, 0), s.shape[0] + min(dv, 0))
        us = slice(max(du, 0), s.shape[1] + min(du, 0))
        vd = slice(max(-dv, 0), s.shape[0] + min(-dv, 0))
        ud = slice(max(-du, 0), s.shape[1] + min(-du, 0))
        shifted[vd, ud] = s[vs, us]
        counts += shifted
    counts[~skel] = 0
    return counts


def build_skeleton_graph(skel: np.ndarray, prune_len: float = 0.0) -> SkeletonGraph2D:
    """Turn a thinned raster into a node/edge graph.

    Degree-2 pixels become edge traces between endpoint/junction nodes;
    spur edges shorter than prune_len are removed, then junctions left with
    degree 2 are dissolved so the node-kind invariants hold.
    """
    skel = np.asarray(skel, dtype=bool)
    if not skel.any():
        raise EmptyMask("empty skeleton raster")
    counts = _neighbor_count_grid(skel)

    H, W = skel.shape
    node_id = -np.ones((H, W), dtype=np.int64)
    nodes: list[Node2D] = []
    # junction clusters: adjacent pixels of degree >= 3 collapse to one node
    junction_mask = skel & (counts >= 3)
    endpoint_mask = skel & (counts <= 1)  # isolated pixels count as endpoints
    labels, nclust = ndimage.label(junction_mask, structure=EIGHT)
    cluster_pixels: list[np.ndarray] = []
    for c in range(1, nclust + 1):
        vs, us = np.nonzero(labels == c)
        pix = np.stack([us, vs], axis=1)
        centroid = pix.mean(axis=0)
        best = int(np.argmin(((pix - centroid) ** 2).sum(axis=1)))
        nodes.append(Node2D(float(pix[best, 0]), float(pix[best, 1]), "junction"))
        cluster_pixels.append(pix)
        for u, v in pix:
            node_id[v, u] = c - 1
    for v, u in zip(*np.nonzero(endpoint_mask)):
        node_id[v, u] = len(nodes)
        nodes.append(Node2D(float(u), float(v), "endpoint"))

    edges: list[Edge2D] = []
    visited = np.zeros((H, W), dtype=bool)

    def trace_from(v0, u0, v1, u1):
        """Walk from node pixel (v0,u0) through connection pixel (v1,u1)."""
        trace = [(u0, v0)]
        length = 0.0
        pv, pu = v0, u0
        cv, cu = v1, u1
        while True:
            trace.append((cu, cv))
            length += np.hypot(cv - pv, cu - pu)
            if node_id[cv, cu] >= 0:
                return np.array(trace, dtype=np.int64), length, int(node_id[cv, cu])
            visited[cv, cu] = True
            nxt = None
            for dv, du in _STEPS:
                nv, nu = cv + dv, cu + du
                if not (0 <= nv < H and 0 <= nu < W) or not skel[nv, nu]:
                    continue
                if nv == pv and nu == pu:
                    continue
                if node_id[nv, nu] >= 0:
                    # prefer finishing at a node over continuing the path,
                    # but never step straight back into the start node pixel
                    if nv == v0 and nu == u0 and len(trace) == 2:
                        continue
                    nxt = (nv, nu)
                    break
                if not visited[nv, nu] and nxt is None:
                    nxt = (nv, nu)  # axial steps first in _STEPS order
            if nxt is None:
                # dead end against visited pixels (tight cluster); stop here
                return np.array(trace, dtype=np.int64), length, -1
            pv, pu = cv, cu
            cv, cu = nxt

    # start a walk into every connection pixel adjacent to a node pixel
    node_pixels = np.argwhere(node_id >= 0)
    direct_seen = set()
    for v0, u0 in node_pixels:
        for dv, du in _STEPS:
            v1, u1 = v0 + dv, u0 + du
            if not (0 <= v1 < H and 0 <= u1 < W) or not skel[v1, u1]:
                continue
            if node_id[v1, u1] >= 0:
                a, b = int(node_id[v0, u0]), int(node_id[v1, u1])
                if a < b and (a, b) not in direct_seen:
                    direct_seen.add((a, b))
                    tr = np.array([(u0, v0), (u1, v1)], dtype=np.int64)
                    edges.append(Edge2D(a, b, tr, float(np.hypot(dv, du))))
                continue
            if visited[v1, u1]:
                continue
            tr, length, end = trace_from(int(v0), int(u0), int(v1), int(u1))
            if end < 0:
                continue
            edges.append(Edge2D(int(node_id[v0, u0]), end, tr, length))

    # pure cycles have no node pixels; seed one node and walk the loop
    leftover = skel & ~visited & (node_id < 0) & (counts == 2)
    lab, ncyc = ndimage.label(leftover, structure=EIGHT)
    for c in range(1, ncyc + 1):
        vs, us = np.nonzero(lab == c)
        v0, u0 = int(vs[0]), int(us[0])
        nid = len(nodes)
        nodes.append(Node2D(float(u0), float(v0), "junction"))
        node_id[v0, u0] = nid
        for dv, du in _STEPS:
            v1, u1 = v0 + dv, u0 + du
            if 0 <= v1 < H and 0 <= u1 < W and skel[v1, u1] and not visited[v1, u1]:
                tr, length, end = trace_from(v0, u0, v1, u1)
                if end >= 0:
                    edges.append(Edge2D(nid, end, tr, length))
                break

    # self-loops: artifacts of junction clusters when short, genuine cycles
    # otherwise; split the latter so the no-self-loop invariant holds
    clean: list[Edge2D] = []
    for e in edges:
        if e.a != e.b:
            clean.append(e)
            continue
        if len(e.trace) < 6:
            continue
        mid = len(e.trace) // 2
        mu, mv = int(e.trace[mid, 0]), int(e.trace[mid, 1])
        mid_id = len(nodes)
        nodes.append(Node2D(float(mu), float(mv), "junction"))
        l1 = _polyline_length(e.trace[: mid + 1])
        l2 = _polyline_length(e.trace[mid:])
        clean.append(Edge2D(e.a, mid_id, e.trace[: mid + 1], l1))
        clean.append(Edge2D(mid_id, e.b, e.trace[mid:], l2))
    edges = clean

    graph = SkeletonGraph2D(nodes, edges)
    if prune_len > 0:
        graph = _prune(graph, prune_len)
    return graph


def _prune(graph: SkeletonGraph2D, prune_len: float) -> SkeletonGraph2D:
    nodes = list(graph.nodes)
    edges = list(graph.edges)
    changed = True
    while changed:
        changed = False
        deg = np.zeros(len(nodes), dtype=int)
        for e in edges:
            deg[e.a] += 1
            deg[e.b] += 1
        for e in list(edges):
            leaf_a = deg[e.a] == 1 and nodes[e.a].kind == "endpoint"
            leaf_b = deg[e.b] == 1 and nodes[e.b].kind == "endpoint"
            other_deg = deg[e.b] if leaf_a else deg[e.a]
            if (leaf_a or leaf_b) and e.arc_length < prune_len and other_deg >= 3:
                edges.remove(e)
                changed = True
                break
    # dissolve junctions whose degree fell to 2: merge their two edges
    changed = True
    while changed:
        changed = False
        deg = np.zeros(len(nodes), dtype=int)
        incident: list[list[Edge2D]] = [[] for _ in nodes]
        for e in edges:
            deg[e.a] += 1
            deg[e.b] += 1
            incident[e.a].append(e)
            incident[e.b].append(e)
        for i, n in enumerate(nodes):
            if n.kind == "junction" and deg[i] == 2:
                e1, e2 = incident[i]
                if e1 is e2:  # cycle through this node; reclassify instead
                    continue
                t1 = e1.trace if e1.b == i else e1.trace[::-1]
                t2 = e2.trace if e2.a == i else e2.trace[::-1]
                a = e1.a if e1.b == i else e1.b
                b = e2.b if e2.a == i else e2.a
                if a == i or b == i:
                    continue
                merged = Edge2D(
                    a, b,
                    np.concatenate([t1, t2[1:]], axis=0),
                    e1.arc_length + e2.arc_length,
                )
                edges.remove(e1)
                edges.remove(e2)
                edges.append(merged)
                changed = True
                break
        for i, n in enumerate(nodes):
            if n.kind == "junction" and deg[i] == 1:
                nodes[i] = Node2D(n.u, n.v, "endpoint")
    # drop orphan nodes, remap indices
    deg = np.zeros(len(nodes), dtype=int)
    for e in edges:
        deg[e.a] += 1
        deg[e.b] += 1
    keep = [i for i in range(len(nodes)) if deg[i] > 0 or len(edges) == 0]
    remap = {old: new for new, old in enumerate(keep)}
    nodes = [nodes[i] for i in keep]
    edges = [Edge2D(remap[e.a], remap[e.b], e.trace, e.arc_length) for e in edges]
    return SkeletonGraph2D(nodes, edges)


def default_prune_len(mask: np.ndarray) -> float:
    """3% of the silhouette bounding-box diagonal."""
    vs, us = np.nonzero(mask)
    if len(vs) == 0:
        raise EmptyMask("empty mask")
    dv = vs.max() - vs.min() + 1
    du = us.max() - us.min() + 1
    return 0.03 * float(np.hypot(du, dv))


def canonical_frame(graphs) -> int:
    """Index of the frame whose skeleton maximizes horizontal/vertical extent."""
    graphs = list(graphs)
    if not graphs:
        raise ValueError("no frames")
    ratios = [g.extent_ratio() for g in graphs]
    if all(np.isinf(r) for r in ratios):
        raise DegenerateExtent("vertical extent is zero in every frame")
    return int(np.argmax(ratios))


# ---------------------------------------------------------------------------
# File formats


def write_pgm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    data = (mask.astype(np.uint8) * 255).tobytes()
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data)


def read_mask(path) -> np.ndarray:
    """Read a mask from PGM (P5) or grayscale PNG; foreground = value >= 128."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return _read_pgm(path) >= 128
    if path.suffix.lower() == ".png":
        from PIL import Image

        img = np.asarray(Image.open(path).convert("L"))
        return img >= 128
    raise DataError(f"unsupported mask format: {path.suffix}")


def _read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM")
    fields: list[bytes] = []
    i = 2
    while len(fields) < 3:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        fields.append(data[i:j])
        i = j
    i += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval > 255:
        raise DataError("16-bit PGM not supported")
    pixels = np.frombuffer(data[i : i + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise DataError(f"{path}: truncated PGM payload")
    return pixels.reshape(h, w)


def write_graph_json(path, graph: SkeletonGraph2D) -> None:
    doc = {
        "nodes": [{"u": n.u, "v": n.v, "kind": n.kind} for n in graph.nodes],
        "edges": [
            {
                "a": e.a,
                "b": e.b,
                "arc_length": e.arc_length,
                "trace": e.trace.tolist(),
            }
            for e in graph.edges
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def read_graph_json(path) -> SkeletonGraph2D:
    doc = json.loads(Path(path).read_text())
    nodes = [Node2D(n["u"], n["v"], n["kind"]) for n in doc["nodes"]]
    edges = [
        Edge2D(e["a"], e["b"], np.array(e["trace"], dtype=np.int64), e["arc_length"])
        for e in doc["edges"]
    ]
    return SkeletonGraph2D(nodes, edges)
