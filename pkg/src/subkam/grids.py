"""Uniform spatial grids on the model spaces."""

from __future__ import annotations

import numpy as np

from .geometry import ModelSpace


class SpatialGrid:
    """Uniform grid k/n per axis on the chart [0,1)^dim; nodes indexed in
    C order via ravel_multi_index."""

    def __init__(self, space: ModelSpace, resolution: int):
        if resolution < 2:
            raise ValueError("grid resolution must be >= 2")
        self.space = space
        self.n = int(resolution)
        self.h = 1.0 / self.n
        self.shape = (self.n,) * space.dim
        self.count = self.n ** space.dim
        axes = [np.arange(self.n) * self.h] * space.dim
        mesh = np.meshgrid(*axes, indexing="ij")
        self.nodes = np.stack([m.ravel() for m in mesh], axis=-1)

    def __repr__(self):
        return f"SpatialGrid({self.space.kind}, n={self.n}, count={self.count})"

    def coords(self, idx):
        return self.nodes[np.asarray(idx, dtype=int)]

    def index_of(self, points, atol=1e-9):
        """Node indices of canonical points lying (near-)exactly on the grid."""
        pts = self.space.canonicalize(points)
        cells = np.round(pts / self.h).astype(int)
        if np.max(np.abs(pts - cells * self.h)) > atol:
            raise ValueError("point not on the grid")
        cells = np.mod(cells, self.n)
        return np.ravel_multi_index(np.moveaxis(cells, -1, 0), self.shape)

    def nearest_index(self, points):
        pts = self.space.canonicalize(points)
        cells = np.mod(np.round(pts / self.h).astype(int), self.n)
        return np.ravel_multi_index(np.moveaxis(cells, -1, 0), self.shape)

    def multi_index(self, idx):
        return np.stack(np.unravel_index(np.asarray(idx, dtype=int), self.shape), axis=-1)

    def cell_distance(self, i, j):
        """Chebyshev distance in grid cells with per-axis wraparound."""
        a = self.multi_index(i)
        b = self.multi_index(j)
        d = np.abs(a - b)
        d = np.minimum(d, self.n - d)
        return d.max(axis=-1)
