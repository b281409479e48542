"""Conforming triangulations of axis-aligned rectangles.

Every rectangle block is cut along its lower-left to upper-right diagonal.
Red (midpoint) refinement of such a mesh reproduces the same pattern, so a
refined mesh is again a structured grid of the same kind.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

Rect = Tuple[float, float, float, float]  # (x0, x1, y0, y1)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable triangle mesh with face connectivity.

    Faces are stored with the vertex order of the owner cell (counterclockwise),
    so ``normals`` point from owner to neighbor, or outward on the boundary.
    ``cell_faces[c, i]`` is the face opposite local vertex ``i``.
    """

    vertices: np.ndarray
    cells: np.ndarray
    faces: np.ndarray
    face_owner: np.ndarray
    face_neighbor: np.ndarray
    normals: np.ndarray
    boundary: np.ndarray
    cell_faces: np.ndarray
    rect: Rect
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def internal_faces(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary)

    @property
    def area(self) -> float:
        x0, x1, y0, y1 = self.rect
        return (x1 - x0) * (y1 - y0)

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.cells]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def face_lengths(self) -> np.ndarray:
        d = self.vertices[self.faces[:, 1]] - self.vertices[self.faces[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def diameters(self) -> np.ndarray:
        """Longest edge of every cell."""
        return self.face_lengths()[self.cell_faces].max(axis=1)

    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.faces[self.boundary])

    def locator(self) -> "PointLocator":
        if "locator" not in self._cache:
            self._cache["locator"] = PointLocator(self)
        return self._cache["locator"]


def _validate_rect(rect) -> Rect:
    x0, x1, y0, y1 = (float(v) for v in rect)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"rectangle {rect!r} must have positive width and height")
    return x0, x1, y0, y1


def _from_cells(vertices: np.ndarray, cells: np.ndarray, rect: Rect) -> Mesh:
    n_cells = len(cells)
    # local edge i joins local vertices i+1 -> i+2 (counterclockwise)
    a = cells[:, [1, 2, 0]]
    b = cells[:, [2, 0, 1]]
    lo = np.minimum(a, b).ravel()
    hi = np.maximum(a, b).ravel()
    key = lo.astype(np.int64) * len(vertices) + hi
    uniq, first, inverse = np.unique(key, return_index=True, return_inverse=True)
    n_faces = len(uniq)

    cell_of = np.repeat(np.arange(n_cells), 3)
    owner = cell_of[first]
    counts = np.bincount(inverse, minlength=n_faces)
    if counts.max() > 2:
        raise ValueError("non-manifold mesh: an edge is shared by more than two cells")

    neighbor = np.full(n_faces, -1, dtype=np.int64)
    slots = np.arange(3 * n_cells)
    second = slots[slots != first[inverse]]
    neighbor[inverse[second]] = cell_of[second]

    faces = np.stack([a.ravel()[first], b.ravel()[first]], axis=1)
    d = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    length = np.hypot(d[:, 0], d[:, 1])
    normals = np.stack([d[:, 1], -d[:, 0]], axis=1) / length[:, None]

    return Mesh(
        vertices=vertices,
        cells=cells,
        faces=faces,
        face_owner=owner,
        face_neighbor=neighbor,
        normals=normals,
        boundary=neighbor < 0,
        cell_faces=inverse.reshape(n_cells, 3),
        rect=rect,
    )


def build_rectangle_mesh(nx: int, ny: int, rect=(0.0, 1.0, 0.0, 1.0)) -> Mesh:
    """Structured ``nx`` x ``ny`` grid of rectangle blocks, two triangles per block."""
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise ValueError(f"cell counts must be positive integers, got nx={nx}, ny={ny}")
    nx, ny = int(nx), int(ny)
    rect = _validate_rect(rect)
    x0, x1, y0, y1 = rect
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.stack([X.ravel(), Y.ravel()], axis=1)

    j, i = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    v00 = (j * (nx + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    lower = np.stack([v00, v10, v11], axis=1)
    upper = np.stack([v00, v11, v01], axis=1)
    cells = np.stack([lower, upper], axis=1).reshape(-1, 3)
    return _from_cells(vertices, cells.astype(np.int64), rect)


def uniform_refine(mesh: Mesh) -> Mesh:
    """Split every triangle into four congruent children through edge midpoints."""
    nv = mesh.n_vertices
    mid = 0.5 * (mesh.vertices[mesh.faces[:, 0]] + mesh.vertices[mesh.faces[:, 1]])
    vertices = np.concatenate([mesh.vertices, mid])
    a, b, c = mesh.cells.T
    ma, mb, mc = (nv + mesh.cell_faces).T  # midpoints opposite a, b, c
    children = np.stack(
        [
            np.stack([a, mc, mb], axis=1),
            np.stack([mc, b, ma], axis=1),
            np.stack([mb, ma, c], axis=1),
            np.stack([ma, mb, mc], axis=1),
        ],
        axis=1,
    ).reshape(-1, 3)
    return _from_cells(vertices, children, mesh.rect)


def refine(mesh: Mesh, levels: int) -> Mesh:
    for _ in range(int(levels)):
        mesh = uniform_refine(mesh)
    return mesh


class PointLocator:
    """Bucket-grid point location for arbitrary query points."""

    def __init__(self, mesh: Mesh, per_axis: int | None = None):
        self.mesh = mesh
        x0, x1, y0, y1 = mesh.rect
        n = per_axis or max(1, int(np.sqrt(mesh.n_cells / 2)))
        self.n = n
        self.origin = np.array([x0, y0])
        self.size = np.array([(x1 - x0) / n, (y1 - y0) / n])
        p = mesh.vertices[mesh.cells]
        lo = np.floor((p.min(axis=1) - self.origin) / self.size - 1e-9).astype(int)
        hi = np.floor((p.max(axis=1) - self.origin) / self.size + 1e-9).astype(int)
        lo = np.clip(lo, 0, n - 1)
        hi = np.clip(hi, 0, n - 1)
        buckets = [[] for _ in range(n * n)]
        for c in range(mesh.n_cells):
            for bx in range(lo[c, 0], hi[c, 0] + 1):
                for by in range(lo[c, 1], hi[c, 1] + 1):
                    buckets[by * n + bx].append(c)
        width = max(len(b) for b in buckets)
        table = np.full((n * n, width), -1, dtype=np.int64)
        for k, b in enumerate(buckets):
            table[k, : len(b)] = b
        self.table = table

        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        self.p0 = p[:, 0]
        self.inv = np.stack(
            [np.stack([e2[:, 1], -e2[:, 0]], 1), np.stack([-e1[:, 1], e1[:, 0]], 1)], 1
        ) / det[:, None, None]

    def locate(self, points, tol: float = 1e-10):
        """Return (cell index, reference coordinates) for each point.

        Points outside the mesh get cell index -1.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        b = np.floor((pts - self.origin) / self.size).astype(int)
        b = np.clip(b, 0, self.n - 1)
        cand = self.table[b[:, 1] * self.n + b[:, 0]]  # (N, K)
        safe = np.where(cand < 0, 0, cand)
        rel = pts[:, None, :] - self.p0[safe]
        ref = np.einsum("nkab,nkb->nka", self.inv[safe], rel)
        lam0 = 1.0 - ref[..., 0] - ref[..., 1]
        inside = (ref[..., 0] >= -tol) & (ref[..., 1] >= -tol) & (lam0 >= -tol) & (cand >= 0)
        hit = inside.any(axis=1)
        k = np.argmax(inside, axis=1)
        rows = np.arange(len(pts))
        cells = np.where(hit, cand[rows, k], -1)
        return cells, ref[rows, k]
