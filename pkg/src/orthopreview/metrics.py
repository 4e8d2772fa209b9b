"""Nearest-neighbour queries and the Hausdorff / Chamfer point-set metrics."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


class SpatialIndex:
    """KD-tree over a fixed point set.

    Distances are recomputed from the returned indices so that they agree
    bit-for-bit with an exhaustive scan that picks the same neighbour.
    """

    def __init__(self, points, leaf_size=16):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("cannot index an empty point set")
        self.leaf_size = leaf_size
        self._tree = cKDTree(self.points, leafsize=leaf_size)

    def query(self, queries):
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        _, idx = self._tree.query(q, k=1)
        idx = np.asarray(idx, dtype=np.int64)
        diff = q - self.points[idx]
        return np.sqrt(np.einsum("ij,ij->i", diff, diff)), idx


def _as_points(a, name):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0:
        raise ValueError(f"point set {name} is empty")
    return a


def directed_distances(a, b, index_b=None):
    """Distance from every point of ``a`` to its nearest point in ``b``."""
    index_b = index_b or SpatialIndex(b)
    return index_b.query(a)[0]


def hausdorff_distance(a, b) -> float:
    a, b = _as_points(a, "A"), _as_points(b, "B")
    return float(max(directed_distances(a, b).max(), directed_distances(b, a).max()))


def chamfer_distance(a, b, root=False) -> float:
    """Mean squared nearest distance A->B plus B->A (mm^2).

    With ``root`` the per-point distances are averaged without squaring,
    giving a value in mm.
    """
    a, b = _as_points(a, "A"), _as_points(b, "B")
    dab = directed_distances(a, b)
    dba = directed_distances(b, a)
    if root:
        return float(dab.mean() + dba.mean())
    return float(np.mean(dab * dab) + np.mean(dba * dba))
