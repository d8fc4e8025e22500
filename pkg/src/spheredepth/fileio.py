"""Readers and writers for PFM, PPM, PLY and the binary mesh-tensor format.

PFM and PPM arrays are returned in display order (first array row = top line
of the picture); PFM stores rows bottom-up on disk, so rows are flipped on
both read and write.
"""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from .panorama import MeshTensor, Panorama, PointCloud

MESH_MAGIC = b"SPHMESHT".ljust(16, b"\0")
MESH_VERSION = 1
_MESH_HEADER = struct.Struct("<5I")


class FormatError(ValueError):
    """Base class for file format problems; carries path and byte offset."""

    def __init__(self, message: str, path=None, offset: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if offset is not None:
                where += f" @ byte {offset}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.offset = offset


class MagicMismatchError(FormatError):
    pass


class MalformedHeaderError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


def _read_token(buf: bytes, pos: int, path) -> tuple[bytes, int]:
    m = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)").match(buf, pos)
    if m is None:
        raise MalformedHeaderError("unexpected end of header", path, pos)
    return m.group(1), m.end()


def read_pfm(path) -> Panorama:
    buf = Path(path).read_bytes()
    tok, pos = _read_token(buf, 0, path)
    if tok == b"PF":
        channels = 3
    elif tok == b"Pf":
        channels = 1
    else:
        raise MagicMismatchError(f"not a PFM file (magic {tok[:8]!r})", path, 0)
    try:
        w_tok, pos = _read_token(buf, pos, path)
        h_tok, pos = _read_token(buf, pos, path)
        s_tok, pos = _read_token(buf, pos, path)
        width, height, scale = int(w_tok), int(h_tok), float(s_tok)
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise MalformedHeaderError(f"bad PFM header field: {exc}", path, pos) from None
    if width <= 0 or height <= 0 or scale == 0.0:
        raise MalformedHeaderError(f"bad PFM dimensions/scale {width}x{height} {scale}", path, pos)
    pos += 1  # single whitespace byte ends the header
    dtype = "<f4" if scale < 0 else ">f4"
    need = width * height * channels * 4
    if len(buf) - pos < need:
        raise TruncatedPayloadError(f"payload has {len(buf) - pos} bytes, expected {need}",
                                    path, pos)
    data = np.frombuffer(buf, dtype=dtype, count=width * height * channels, offset=pos)
    data = data.reshape(height, width, channels)[::-1].astype(np.float32)
    return Panorama(data)


def write_pfm(path, image: Panorama | np.ndarray) -> None:
    data = image.data if isinstance(image, Panorama) else np.asarray(image)
    if data.ndim == 2:
        data = data[:, :, None]
    height, width, channels = data.shape
    if channels not in (1, 3):
        raise ValueError(f"PFM holds 1 or 3 channels, got {channels}")
    magic = "Pf" if channels == 1 else "PF"
    header = f"{magic}\n{width} {height}\n-1.0\n".encode("ascii")
    payload = np.ascontiguousarray(data[::-1], dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_ppm(path) -> Panorama:
    buf = Path(path).read_bytes()
    tok, pos = _read_token(buf, 0, path)
    if tok != b"P6":
        raise MagicMismatchError(f"not a binary PPM file (magic {tok[:8]!r})", path, 0)
    try:
        fields = []
        for _ in range(3):
            t, pos = _read_token(buf, pos, path)
            fields.append(int(t))
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise MalformedHeaderError(f"bad PPM header field: {exc}", path, pos) from None
    width, height, maxval = fields
    if width <= 0 or height <= 0 or maxval != 255:
        raise MalformedHeaderError(f"unsupported PPM header {width}x{height} maxval {maxval}",
                                   path, pos)
    pos += 1
    need = width * height * 3
    if len(buf) - pos < need:
        raise TruncatedPayloadError(f"payload has {len(buf) - pos} bytes, expected {need}",
                                    path, pos)
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return Panorama(data.reshape(height, width, 3).astype(np.float32) / 255.0)


def write_ppm(path, image: Panorama | np.ndarray) -> None:
    data = image.data if isinstance(image, Panorama) else np.asarray(image)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) image, got {data.shape}")
    height, width, _ = data.shape
    q = np.clip(np.rint(np.asarray(data, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{width} {height}\n255\n".encode("ascii") + q.tobytes())


def read_panorama(path) -> Panorama:
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        return read_pfm(path)
    if suffix == ".ppm":
        return read_ppm(path)
    raise FormatError(f"unsupported image extension {suffix!r} (use .pfm or .ppm)", path)


def write_panorama(path, image: Panorama) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        write_pfm(path, image)
    elif suffix == ".ppm":
        write_ppm(path, image)
    else:
        raise FormatError(f"unsupported image extension {suffix!r} (use .pfm or .ppm)", path)


def write_mesh_tensor(path, t: MeshTensor) -> None:
    batch, _, channels = t.data.shape
    header = MESH_MAGIC + _MESH_HEADER.pack(MESH_VERSION, t.level, t.tr, batch, channels)
    payload = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_mesh_tensor(path) -> MeshTensor:
    buf = Path(path).read_bytes()
    if buf[:16] != MESH_MAGIC:
        raise MagicMismatchError("not a mesh tensor file", path, 0)
    if len(buf) < 16 + _MESH_HEADER.size:
        raise MalformedHeaderError("header is shorter than 36 bytes", path, len(buf))
    version, level, tr, batch, channels = _MESH_HEADER.unpack_from(buf, 16)
    if version != MESH_VERSION:
        raise MalformedHeaderError(f"unsupported version {version}", path, 16)
    if level > 8 or batch == 0 or channels == 0:
        raise MalformedHeaderError(
            f"bad header fields level={level} batch={batch} channels={channels}", path, 20)
    pos = 16 + _MESH_HEADER.size
    count = batch * 20 * 4 ** level * channels
    if len(buf) - pos < 4 * count:
        raise TruncatedPayloadError(f"payload has {len(buf) - pos} bytes, expected {4 * count}",
                                    path, pos)
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos)
    return MeshTensor(data.reshape(batch, 20 * 4 ** level, channels).astype(np.float32),
                      level, tr)


def write_ply(path, cloud: PointCloud) -> None:
    """Binary little-endian PLY; 12 bytes per point, 15 with colors."""
    n = len(cloud.points)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    props = ["property float x", "property float y", "property float z"]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        props += ["property uchar red", "property uchar green", "property uchar blue"]
    rec = np.empty(n, dtype=fields)
    rec["x"], rec["y"], rec["z"] = cloud.points.T
    if cloud.colors is not None:
        rgb = np.clip(np.rint(np.asarray(cloud.colors) * 255.0), 0, 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = rgb.T
    header = "\n".join(["ply", "format binary_little_endian 1.0", f"element vertex {n}",
                        *props, "end_header"]) + "\n"
    Path(path).write_bytes(header.encode("ascii") + rec.tobytes())


def read_ply(path) -> PointCloud:
    """Reader for the files written by ``write_ply``."""
    buf = Path(path).read_bytes()
    end = buf.find(b"end_header\n")
    if not buf.startswith(b"ply\n") or end < 0:
        raise MagicMismatchError("not a PLY file", path, 0)
    lines = buf[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise MalformedHeaderError("only binary_little_endian 1.0 is supported", path)
    n = None
    names = []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[:1] == ["property"]:
            names.append((parts[2], "<f4" if parts[1] == "float" else "u1"))
    if n is None:
        raise MalformedHeaderError("missing vertex element", path)
    pos = end + len(b"end_header\n")
    dtype = np.dtype(names)
    if len(buf) - pos < n * dtype.itemsize:
        raise TruncatedPayloadError("vertex payload is truncated", path, pos)
    rec = np.frombuffer(buf, dtype=dtype, count=n, offset=pos)
    points = np.stack([rec["x"], rec["y"], rec["z"]], 1)
    colors = None
    if "red" in dtype.names:
        colors = np.stack([rec["red"], rec["green"], rec["blue"]], 1) / 255.0
    return PointCloud(points, colors)
