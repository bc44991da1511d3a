"""Block-based spatial partitioning for O(1) local Gaussian queries.

The normalized volume [-1, 1]^3 is split into a uniform G^3 cell grid and
each primitive is bucketed by its center.  Buckets are stored in a compact
sparse layout (flat index array plus per-cell offsets) so that querying a
neighborhood reads contiguous ranges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GaussianField


def cell_index(mu, grid_resolution):
    """Cell coordinates floor((mu + 1) * G / 2), clamped to [0, G - 1].

    Clamping absorbs mu = +1 (which lands exactly on the off-grid index G)
    and small position drift outside [-1, 1].
    """
    g = int(grid_resolution)
    mu = np.asarray(mu, dtype=np.float64)
    idx = np.floor((mu + 1.0) * (g / 2.0)).astype(np.int64)
    return np.clip(idx, 0, g - 1)


@dataclass
class PartitionGrid:
    """Uniform cell grid mapping cell -> primitive indices (CSR layout)."""

    grid_resolution: int
    block_radius: int
    count: int  # number of primitives indexed
    cell_starts: np.ndarray  # (G^3 + 1,) int64 offsets into cell_indices
    cell_indices: np.ndarray  # (N,) primitive ids sorted by flat cell

    def bucket(self, i, j, k):
        g = self.grid_resolution
        flat = (i * g + j) * g + k
        return self.cell_indices[self.cell_starts[flat] : self.cell_starts[flat + 1]]


def build(field, grid_resolution, block_radius=5):
    """Bucket every primitive of ``field`` into a G^3 partition grid.

    ``field`` may be a GaussianField or a raw (N, 3) position array.
    Deterministic: ties inside a bucket keep ascending primitive order.
    """
    positions = field.positions if isinstance(field, GaussianField) else np.asarray(field)
    g = int(grid_resolution)
    cells = cell_index(positions, g)
    flat = (cells[:, 0] * g + cells[:, 1]) * g + cells[:, 2]
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=g**3)
    starts = np.zeros(g**3 + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    return PartitionGrid(
        grid_resolution=g,
        block_radius=int(block_radius),
        count=positions.shape[0],
        cell_starts=starts,
        cell_indices=order.astype(np.int64),
    )


def query_local(grid: PartitionGrid, x, radius=None):
    """Primitive indices in the cell neighborhood of x (Chebyshev radius r).

    The neighborhood is truncated at grid boundaries; the result is sorted
    and duplicate-free.  Points outside [-1, 1]^3 are clamped for indexing
    only.  An empty result is valid.
    """
    g = grid.grid_resolution
    r = grid.block_radius if radius is None else int(radius)
    c = cell_index(np.asarray(x, dtype=np.float64), g)
    i0, j0, k0 = int(c[0]), int(c[1]), int(c[2])
    ilo, ihi = max(i0 - r, 0), min(i0 + r, g - 1)
    jlo, jhi = max(j0 - r, 0), min(j0 + r, g - 1)
    klo, khi = max(k0 - r, 0), min(k0 + r, g - 1)
    chunks = []
    for i in range(ilo, ihi + 1):
        for j in range(jlo, jhi + 1):
            base = (i * g + j) * g
            lo = grid.cell_starts[base + klo]
            hi = grid.cell_starts[base + khi + 1]
            if hi > lo:
                chunks.append(grid.cell_indices[lo:hi])
    if not chunks:
        return np.empty(0, dtype=np.int64)
    out = np.concatenate(chunks)
    out.sort()
    return out
