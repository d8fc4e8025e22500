"""Equirectangular panoramas, mesh tensors and the resampling between them.

Pixel (row i, col j) covers u in [j, j+1), v in [i, i+1); its center sits at
(j + 0.5, i + 0.5). Row 0 is v = 0, which is the z = -1 direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import SamplePattern, SphericalMesh, sample_pattern

# image rows (H) of the equirectangular raster matching a spherical resolution
RESOLUTION_TABLE = {4: 32, 5: 64, 6: 128, 7: 256, 8: 512}


def table_image_size(sr: int) -> tuple[int, int] | None:
    """(height, width) listed for spherical resolution ``sr``, if any."""
    h = RESOLUTION_TABLE.get(sr)
    return None if h is None else (h, 2 * h)


def table_sr(height: int, width: int) -> int | None:
    for sr, h in RESOLUTION_TABLE.items():
        if (height, width) == (h, 2 * h):
            return sr
    return None


@dataclass
class Panorama:
    data: np.ndarray                    # (H, W, C)
    valid_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3):
            raise ValueError(f"panorama data must be (H, W, 1|3), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("panorama contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class MeshTensor:
    data: np.ndarray  # (batch, 20 * 4**level, channels)
    level: int
    tr: int = 0

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"mesh tensor data must be 3-D, got shape {self.data.shape}")
        if self.data.shape[1] != 20 * 4 ** self.level:
            raise ValueError(
                f"{self.data.shape[1]} faces do not match level {self.level} "
                f"({20 * 4 ** self.level} faces)")

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def samples(self) -> int:
        return 4 ** self.tr


@dataclass
class PointCloud:
    points: np.ndarray                 # (N, 3)
    colors: np.ndarray | None = None   # (N, 3) in [0, 1]

    def __len__(self):
        return len(self.points)


def sphere_to_pixel(p, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    u = (1.0 + np.arctan2(y, x) / np.pi) * width / 2.0
    v = (0.5 + np.arctan2(z, np.hypot(x, y)) / np.pi) * height
    return u, v


def pixel_to_sphere(u, v, width: int, height: int) -> np.ndarray:
    lon = (2.0 * np.asarray(u, dtype=np.float64) / width - 1.0) * np.pi
    lat = (np.asarray(v, dtype=np.float64) / height - 0.5) * np.pi
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], -1)


def pixel_center_directions(width: int, height: int) -> np.ndarray:
    """(H, W, 3) unit directions through every pixel center."""
    u = np.arange(width) + 0.5
    v = np.arange(height) + 0.5
    uu, vv = np.meshgrid(u, v)
    return pixel_to_sphere(uu, vv, width, height)


def sample_image(image: np.ndarray, u, v, mode: str = "bilinear") -> np.ndarray:
    """Sample ``image`` (H, W, C) at continuous (u, v); wraps in u, clamps in v."""
    h, w = image.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if mode == "nearest":
        col = np.floor(u).astype(np.int64) % w
        row = np.clip(np.floor(v).astype(np.int64), 0, h - 1)
        return image[row, col]
    if mode != "bilinear":
        raise ValueError(f"unknown sampling mode {mode!r}")
    x = u - 0.5
    y = np.clip(v - 0.5, 0.0, h - 1.0)
    x0 = np.floor(x)
    y0 = np.minimum(np.floor(y), h - 2) if h > 1 else np.zeros_like(y)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    c0 = x0.astype(np.int64) % w
    c1 = (c0 + 1) % w
    r0 = y0.astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    top = image[r0, c0] * (1.0 - fx) + image[r0, c1] * fx
    bottom = image[r1, c0] * (1.0 - fx) + image[r1, c1] * fx
    return top * (1.0 - fy) + bottom * fy


def image_to_mesh(img: Panorama, mesh: SphericalMesh, pattern: SamplePattern,
                  mode: str = "bilinear", channels: int | None = None) -> MeshTensor:
    """Sample the panorama at every face sample; channels are sample-major."""
    if channels is not None and channels != img.channels:
        raise ValueError(f"expected a {channels}-channel image, got {img.channels} channels")
    if pattern.offsets.shape[0] != mesh.num_faces:
        raise ValueError("sample pattern was built on a different mesh")
    u, v = sphere_to_pixel(pattern.offsets, img.width, img.height)
    values = sample_image(img.data, u, v, mode)           # (F, S, C)
    data = values.reshape(1, mesh.num_faces, -1)
    return MeshTensor(data, mesh.level, pattern.tr)


def nearest_faces(mesh: SphericalMesh, directions: np.ndarray) -> np.ndarray:
    tree = cKDTree(mesh.face_centers)
    _, idx = tree.query(directions.reshape(-1, 3))
    return idx.reshape(directions.shape[:-1])


def mesh_to_image(t: MeshTensor, mesh: SphericalMesh, width: int, height: int,
                  pattern: SamplePattern | None = None) -> Panorama:
    """Assign every pixel the value of its nearest face (and nearest sample)."""
    if t.batch != 1:
        raise ValueError(f"mesh_to_image needs batch 1, got {t.batch}")
    if t.level != mesh.level:
        raise ValueError(f"tensor level {t.level} does not match mesh level {mesh.level}")
    s = t.samples
    if t.channels % s:
        raise ValueError(f"{t.channels} channels cannot hold {s} samples per face")
    c = t.channels // s
    dirs = pixel_center_directions(width, height).reshape(-1, 3)
    face = nearest_faces(mesh, dirs)
    if s == 1:
        slot = np.zeros_like(face)
    else:
        if pattern is None or pattern.tr != t.tr:
            pattern = sample_pattern(mesh, t.tr)
        cand = pattern.offsets[face]                         # (P, S, 3)
        slot = np.argmax(np.einsum("psk,pk->ps", cand, dirs), axis=1)
    values = t.data[0].reshape(mesh.num_faces, s, c)[face, slot]
    return Panorama(values.reshape(height, width, c))


def depth_to_pointcloud_mesh(depth: MeshTensor, mesh: SphericalMesh, pattern: SamplePattern,
                             rgb: MeshTensor | None = None) -> PointCloud:
    if depth.channels != pattern.samples_per_face:
        raise ValueError(f"depth has {depth.channels} channels, pattern has "
                         f"{pattern.samples_per_face} samples per face")
    d = depth.data[0].reshape(-1)
    dirs = pattern.offsets.reshape(-1, 3)
    keep = d > 0
    points = dirs[keep] * d[keep, None]
    colors = None
    if rgb is not None:
        colors = rgb.data[0].reshape(-1, 3)[keep]
    return PointCloud(points, colors)


def depth_to_pointcloud_equirect(depth: Panorama, rgb: Panorama | None = None,
                                 pixel_centers: bool = False) -> PointCloud:
    """Per valid pixel, direction times depth.

    Pixel (row i, col j) is placed at (u, v) = (j, i), so pixel (W/2, H/2)
    looks along +x; ``pixel_centers`` shifts to (j + 0.5, i + 0.5) instead.
    """
    if depth.channels != 1:
        raise ValueError(f"depth panorama must have one channel, got {depth.channels}")
    d = depth.data[..., 0]
    keep = d > 0
    if depth.valid_mask is not None:
        keep &= depth.valid_mask
    off = 0.5 if pixel_centers else 0.0
    uu, vv = np.meshgrid(np.arange(depth.width) + off, np.arange(depth.height) + off)
    dirs = pixel_to_sphere(uu, vv, depth.width, depth.height)
    points = dirs[keep] * d[keep][:, None]
    colors = None if rgb is None else rgb.data[keep]
    return PointCloud(points, colors)
