"""Icosphere construction: icosahedron, midpoint subdivision, adjacency and
the per-face sample patterns used to pack extra resolution into channels.

Face ordering is hierarchical: the four children of face ``f`` at level ``m``
are faces ``4f .. 4f+3`` at level ``m + 1``. Pooling and unpooling rely on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

MAX_LEVEL = 8


@dataclass(frozen=True, eq=False)
class SphericalMesh:
    level: int
    vertices: np.ndarray      # (V, 3) float64, unit norm
    faces: np.ndarray         # (F, 3) int64, counterclockwise seen from outside
    face_centers: np.ndarray  # (F, 3) float64, unit norm
    adjacency: np.ndarray     # (F, 3) int64, slot k shares edge (v_k, v_{k+1})
    parent: np.ndarray | None = None  # (F,) index into the level - 1 mesh
    # slot of face f inside the adjacency row of its k-th neighbour
    reverse_slot: np.ndarray = field(default=None, repr=False)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_edges(self) -> int:
        return 3 * len(self.faces) // 2

    @property
    def children(self) -> np.ndarray:
        """(F, 4) child indices into the level + 1 mesh."""
        return np.arange(4 * self.num_faces, dtype=np.int64).reshape(-1, 4)


def _normalize(p: np.ndarray) -> np.ndarray:
    return p / np.linalg.norm(p, axis=-1, keepdims=True)


def _face_adjacency(faces: np.ndarray, num_vertices: int) -> tuple[np.ndarray, np.ndarray]:
    # Directed edge (a, b) of one face is matched by (b, a) of its neighbour;
    # keys are exact integers so no floating point enters the topology.
    nf = len(faces)
    start = faces.reshape(-1)
    end = np.roll(faces, -1, axis=1).reshape(-1)
    keys = start * num_vertices + end
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    twin_keys = end * num_vertices + start
    pos = np.searchsorted(sorted_keys, twin_keys)
    if np.any(pos >= len(keys)) or np.any(sorted_keys[np.minimum(pos, len(keys) - 1)] != twin_keys):
        raise ValueError("mesh is not closed or not consistently oriented")
    twin = order[pos]  # directed-edge index of the twin half-edge
    adjacency = (twin // 3).reshape(nf, 3)
    reverse_slot = (twin % 3).reshape(nf, 3)
    return adjacency.astype(np.int64), reverse_slot.astype(np.int64)


def _assemble(level: int, vertices: np.ndarray, faces: np.ndarray,
              parent: np.ndarray | None) -> SphericalMesh:
    adjacency, reverse_slot = _face_adjacency(faces, len(vertices))
    centers = _normalize(vertices[faces].mean(axis=1))
    for arr in (vertices, faces, centers, adjacency, reverse_slot):
        arr.setflags(write=False)
    if parent is not None:
        parent.setflags(write=False)
    return SphericalMesh(level, vertices, faces, centers, adjacency, parent, reverse_slot)


def build_icosahedron() -> SphericalMesh:
    """Level-0 mesh: the regular icosahedron inscribed in the unit sphere."""
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    vertices = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    vertices = _normalize(vertices)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    tri = vertices[faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", normals, tri.sum(axis=1)) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return _assemble(0, vertices, faces, None)


def subdivide(mesh: SphericalMesh) -> SphericalMesh:
    """Split every face (a, b, c) into four, midpoints pushed to the sphere.

    Children keep the corner sets (a, ab, ac), (b, ab, bc), (c, bc, ac),
    (bc, ab, ac) in that slot order. The last two corners of children 1..3 are
    swapped so every child stays counterclockwise.
    """
    if mesh.level + 1 > MAX_LEVEL:
        raise ValueError(f"mesh level {mesh.level + 1} exceeds the maximum of {MAX_LEVEL}")
    nv = mesh.num_vertices
    a, b, c = mesh.faces[:, 0], mesh.faces[:, 1], mesh.faces[:, 2]
    pairs = np.stack([np.stack([a, b], 1), np.stack([b, c], 1), np.stack([a, c], 1)], 1)
    pairs = np.sort(pairs, axis=2)
    keys = pairs[..., 0] * nv + pairs[..., 1]            # (F, 3) -> ab, bc, ac
    unique_keys, inverse = np.unique(keys.reshape(-1), return_inverse=True)
    mid_index = (nv + inverse).reshape(-1, 3)
    lo, hi = unique_keys // nv, unique_keys % nv
    midpoints = _normalize(mesh.vertices[lo] + mesh.vertices[hi])
    vertices = np.concatenate([mesh.vertices, midpoints])

    ab, bc, ac = mid_index[:, 0], mid_index[:, 1], mid_index[:, 2]
    children = np.stack([
        np.stack([a, ab, ac], 1),
        np.stack([b, bc, ab], 1),
        np.stack([c, ac, bc], 1),
        np.stack([bc, ac, ab], 1),
    ], 1)
    faces = children.reshape(-1, 3)
    parent = np.repeat(np.arange(mesh.num_faces, dtype=np.int64), 4)
    return _assemble(mesh.level + 1, vertices, faces, parent)


@lru_cache(maxsize=None)
def icosphere(level: int) -> SphericalMesh:
    """Cached mesh at ``level``; meshes are immutable and safe to share."""
    if not 0 <= level <= MAX_LEVEL:
        raise ValueError(f"mesh level must be in [0, {MAX_LEVEL}], got {level}")
    if level == 0:
        return build_icosahedron()
    return subdivide(icosphere(level - 1))


def hierarchy(level: int) -> list[SphericalMesh]:
    """Meshes for levels 0..level, index i holding level i."""
    return [icosphere(i) for i in range(level + 1)]


@dataclass(frozen=True, eq=False)
class SamplePattern:
    tr: int
    offsets: np.ndarray  # (F, 4**tr, 3) unit directions, depth-first child order

    @property
    def samples_per_face(self) -> int:
        return self.offsets.shape[1]


def _split_triangles(tri: np.ndarray) -> np.ndarray:
    # tri: (..., 3, 3) corner positions -> (..., 4, 3, 3); same corner order as subdivide
    a, b, c = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    ab = _normalize(a + b)
    bc = _normalize(b + c)
    ac = _normalize(a + c)
    return np.stack([
        np.stack([a, ab, ac], -2),
        np.stack([b, bc, ab], -2),
        np.stack([c, ac, bc], -2),
        np.stack([bc, ac, ab], -2),
    ], -3)


def sample_pattern(mesh: SphericalMesh, tr: int) -> SamplePattern:
    if tr < 0:
        raise ValueError(f"tr must be non-negative, got {tr}")
    tri = mesh.vertices[mesh.faces]                 # (F, 3, 3)
    for _ in range(tr):
        tri = _split_triangles(tri)                 # (F, 4, ..., 4, 3, 3)
    tri = tri.reshape(mesh.num_faces, 4 ** tr, 3, 3)
    offsets = _normalize(tri.mean(axis=2))
    offsets.setflags(write=False)
    return SamplePattern(tr, offsets)


def surface_area_ratio(mesh: SphericalMesh) -> float:
    """Total planar triangle area over the area of the unit sphere."""
    tri = mesh.vertices[mesh.faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return float(0.5 * np.linalg.norm(cross, axis=1).sum() / (4.0 * math.pi))


def write_ascii_ply(mesh: SphericalMesh, path) -> None:
    """Debug dump of vertices and faces for external viewers."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {mesh.num_vertices}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        fh.write(f"element face {mesh.num_faces}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]!r} {v[1]!r} {v[2]!r}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")
