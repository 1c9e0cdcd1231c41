"""Reconstruction losses and regularizers over rendered vs. observed frames.

All terms are normalized by pixel/vertex counts so weights stay
resolution-independent; pass normalize=False for raw sums.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, fields

import numpy as np

from .errors import DimensionMismatch, PartCountMismatch
from .geom import Mesh
from .render import FlowField

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    silhouette: float = 1.0
    flow: float = 0.5
    texture: float = 0.0
    part_silhouette: float = 0.2
    symmetry: float = 0.1
    laplacian: float = 0.5
    dynamic_rigidity: float = 0.05
    perceptual: float = 0.0
    consistency: float = 0.0
    sigma: float = 1.0  # flow confidence

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"negative weight {f.name}")


def silhouette_loss(rendered: np.ndarray, observed: np.ndarray, normalize: bool = True) -> float:
    rendered = np.asarray(rendered)
    observed = np.asarray(observed)
    if rendered.shape != observed.shape:
        raise DimensionMismatch(f"{rendered.shape} vs {observed.shape}")
    diff = (rendered.astype(np.float64) - observed.astype(np.float64)) ** 2
    total = float(diff.sum())
    return total / rendered.size if normalize else total


def flow_loss(
    rendered: FlowField, observed: FlowField, sigma: float = 1.0, normalize: bool = True
) -> float:
    if rendered.shape != observed.shape:
        raise DimensionMismatch(f"{rendered.shape} vs {observed.shape}")
    both = rendered.valid & observed.valid
    if not both.any():
        log.warning("flow loss: no jointly valid pixels")
        return 0.0
    d = rendered.flow[both] - observed.flow[both]
    sq = (d**2).sum(axis=1)
    return float(sigma * (sq.mean() if normalize else sq.sum()))


def texture_loss(
    rendered: np.ndarray, observed: np.ndarray, foreground: np.ndarray
) -> float:
    """Mean absolute per-channel difference over foreground pixels."""
    rendered = np.asarray(rendered, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if rendered.shape != observed.shape or rendered.shape[:2] != foreground.shape:
        raise DimensionMismatch("image/mask shapes differ")
    if not foreground.any():
        log.warning("texture loss: empty foreground")
        return 0.0
    return float(np.abs(rendered[foreground] - observed[foreground]).mean())


def part_silhouette_loss(
    rendered_parts: list[np.ndarray], observed_parts: list[np.ndarray], normalize: bool = True
) -> float:
    if len(rendered_parts) != len(observed_parts):
        raise PartCountMismatch(f"{len(rendered_parts)} vs {len(observed_parts)} parts")
    return float(
        sum(silhouette_loss(r, o, normalize) for r, o in zip(rendered_parts, observed_parts))
    )


def symmetry_loss(mesh: Mesh, normalize: bool = True) -> float:
    """Squared distance from each z>0 vertex's reflection to its nearest
    vertex, averaged; zero for a z=0 mirror-symmetric mesh."""
    V = mesh.vertices
    side = V[:, 2] > 0
    if not side.any():
        return 0.0
    reflected = V[side] * np.array([1.0, 1.0, -1.0])
    from scipy.spatial import cKDTree

    d, _ = cKDTree(V).query(reflected)
    total = float((d**2).sum())
    return total / side.sum() if normalize else total


def laplacian_loss(mesh: Mesh, neighbors: list[np.ndarray] | None = None) -> float:
    """Mean squared distance from each vertex to its 1-ring average."""
    if neighbors is None:
        neighbors = mesh.vertex_neighbors()
    V = mesh.vertices
    total = 0.0
    n_used = 0
    isolated = 0
    for i, nb in enumerate(neighbors):
        if len(nb) == 0:
            isolated += 1
            continue
        d = V[i] - V[nb].mean(axis=0)
        total += float(d @ d)
        n_used += 1
    if isolated:
        log.warning("laplacian loss: %d isolated vertices excluded", isolated)
    return total / n_used if n_used else 0.0


def total_loss(terms: dict, weights: LossWeights, phase_two: bool = False):
    """Weighted sum of the provided raw term values plus a breakdown.

    Missing terms count as zero; phase two drops the part-silhouette term.
    The flow term is expected pre-multiplied by sigma (flow_loss does it).
    """
    breakdown = {}
    for f in fields(weights):
        if f.name == "sigma":
            continue
        raw = float(terms.get(f.name, 0.0))
        if f.name == "part_silhouette" and phase_two:
            raw = 0.0
        breakdown[f.name] = getattr(weights, f.name) * raw
    return float(sum(breakdown.values())), breakdown


class LossLog:
    """Appends per-iteration loss breakdowns to a CSV file."""

    def __init__(self, path):
        self.path = path
        self._names: list[str] | None = None

    def append(self, iteration: int, breakdown: dict, total: float) -> None:
        names = sorted(breakdown)
        new = self._names is None
        if new:
            self._names = names
        with open(self.path, "a", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(["iteration", *names, "total"])
            w.writerow([iteration, *[f"{breakdown[n]:.9g}" for n in names], f"{total:.9g}"])
