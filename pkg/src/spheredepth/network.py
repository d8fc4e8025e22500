"""A UNet over icosphere meshes, plus checkpoint I/O.

``LAYERS`` is the layer table: (name, kind, sources, output width). Input
widths are never listed; they are derived from the sources' output widths.
Pools and unpools carry no parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .mesh import SphericalMesh, hierarchy

NUM_POOLS = 5

LAYERS: list[tuple[str, str, tuple[str, ...], int | None]] = [
    ("convb_00", "convb", ("pano",), 64),
    ("convb_01", "convb", ("convb_00",), 64),
    ("pool_0", "pool", ("convb_01",), None),
    ("convb_10", "convb", ("pool_0",), 64),
    ("convb_11", "convb", ("convb_10",), 128),
    ("pool_1", "pool", ("convb_11",), None),
    ("convb_20", "convb", ("pool_1",), 128),
    ("convb_21", "convb", ("convb_20",), 128),
    ("convb_22", "convb", ("convb_21",), 256),
    ("pool_2", "pool", ("convb_22",), None),
    ("convb_30", "convb", ("pool_2",), 256),
    ("convb_31", "convb", ("convb_30",), 256),
    ("convb_32", "convb", ("convb_31",), 512),
    ("pool_3", "pool", ("convb_32",), None),
    ("convb_40", "convb", ("pool_3",), 512),
    ("convb_41", "convb", ("convb_40",), 512),
    ("convb_42", "convb", ("convb_41",), 512),
    ("pool_4", "pool", ("convb_42",), None),
    ("convb_50", "convb", ("pool_4",), 512),
    ("convb_51", "convb", ("convb_50",), 512),
    ("convb_52", "convb", ("convb_51",), 512),
    ("unpool_4", "unpool", ("convb_52",), None),
    ("dconv_4", "dconv", ("unpool_4",), 512),
    ("unpool_3", "unpool", ("dconv_4",), None),
    ("dconv_3", "dconv", ("unpool_3", "convb_31"), 256),
    ("output_3", "output", ("dconv_3",), None),
    ("unpool_2", "unpool", ("dconv_3",), None),
    ("dconv_2", "dconv", ("unpool_2", "convb_21"), 128),
    ("output_2", "output", ("dconv_2",), None),
    ("unpool_1", "unpool", ("dconv_2",), None),
    ("dconv_1", "dconv", ("unpool_1", "convb_11"), 64),
    ("output_1", "output", ("dconv_1",), None),
    ("unpool_0", "unpool", ("dconv_1",), None),
    ("dconv_0", "dconv", ("unpool_0", "convb_01"), 32),
    ("output_0", "output", ("dconv_0",), None),
]
LAYER_NAMES = {name for name, *_ in LAYERS}
OUTPUTS = ("output_0", "output_1", "output_2", "output_3")
SKIP_SOURCES = ("convb_01", "convb_11", "convb_21", "convb_31")

_CONV_BN_PARAMS = ("weight", "bias", "gamma", "beta")
_BUFFERS = ("running_mean", "running_var")


@dataclass(frozen=True)
class NetworkConfig:
    mr: int
    tr: int
    in_channels: int = 3
    width_divisor: int = 1

    def __post_init__(self):
        if self.mr < NUM_POOLS:
            raise ValueError(f"the network pools {NUM_POOLS} times, so MR must be >= "
                             f"{NUM_POOLS}; got {self.mr}")
        if self.tr < 0:
            raise ValueError(f"TR must be non-negative, got {self.tr}")
        if self.in_channels < 1 or self.width_divisor < 1:
            raise ValueError("in_channels and width_divisor must be positive")

    @property
    def samples(self) -> int:
        return 4 ** self.tr

    @property
    def input_channels(self) -> int:
        return self.in_channels * self.samples

    def width(self, nominal: int) -> int:
        return max(1, nominal // self.width_divisor)


@dataclass
class NetworkParams:
    config: NetworkConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.config,
                             {k: v.astype(dtype) for k, v in self.params.items()},
                             {k: v.astype(dtype) for k, v in self.buffers.items()})

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config,
                             {k: v.copy() for k, v in self.params.items()},
                             {k: v.copy() for k, v in self.buffers.items()})

    @property
    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def layer_plan(config: NetworkConfig) -> dict[str, dict]:
    """Per layer: kind, sources, input/output widths and the MR it runs at."""
    plan = {"pano": {"out": config.input_channels, "level": config.mr}}
    for name, kind, sources, nominal in LAYERS:
        c_in = sum(plan[s]["out"] for s in sources)
        level = plan[sources[0]]["level"]
        if kind == "pool":
            out, level = c_in, level - 1
        elif kind == "unpool":
            out, level = c_in, level + 1
        elif kind == "output":
            out = config.samples
        else:
            out = config.width(nominal)
        if any(plan[s]["level"] != level for s in sources[1:]):
            raise AssertionError(f"{name}: skip source at a different resolution")
        plan[name] = {"kind": kind, "sources": sources, "in": c_in, "out": out, "level": level}
    del plan["pano"]
    return plan


def parameter_shapes(config: NetworkConfig) -> dict[str, tuple[str, tuple[int, ...], int]]:
    """name -> (role, shape, fan_in); role is 'param', 'buffer' or 'norm'."""
    shapes = {}

    def conv_bn(prefix, c_in, c_out):
        shapes[f"{prefix}.weight"] = ("param", (4, c_out, c_in), 4 * c_in)
        shapes[f"{prefix}.bias"] = ("param", (c_out,), 4 * c_in)
        shapes[f"{prefix}.gamma"] = ("norm", (c_out,), 0)
        shapes[f"{prefix}.beta"] = ("norm", (c_out,), 0)
        shapes[f"{prefix}.running_mean"] = ("buffer", (c_out,), 0)
        shapes[f"{prefix}.running_var"] = ("buffer", (c_out,), 0)

    for name, spec in layer_plan(config).items():
        c_in, c_out = spec["in"], spec["out"]
        if spec["kind"] == "convb":
            conv_bn(f"{name}.conv1", c_in, c_out)
            conv_bn(f"{name}.conv2", c_out, c_out)
            conv_bn(f"{name}.conv3", c_out, c_out)
            if c_in != c_out:
                shapes[f"{name}.proj.weight"] = ("param", (1, c_out, c_in), c_in)
        elif spec["kind"] == "dconv":
            conv_bn(name, c_in, c_out)
        elif spec["kind"] == "output":
            shapes[f"{name}.weight"] = ("param", (4, c_out, c_in), 4 * c_in)
            shapes[f"{name}.bias"] = ("param", (c_out,), 4 * c_in)
    return shapes


def build_network(mr: int, tr: int, in_channels: int = 3, seed: int = 0,
                  width_divisor: int = 1) -> NetworkParams:
    """Weights and biases ~ U(-b, b), b = sqrt(1 / fan_in); norms start at identity."""
    config = NetworkConfig(mr, tr, in_channels, width_divisor)
    rng = np.random.default_rng(seed)
    net = NetworkParams(config)
    for name, (role, shape, fan_in) in parameter_shapes(config).items():
        if role == "param":
            bound = np.sqrt(1.0 / fan_in)
            net.params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif role == "norm":
            fill = 1.0 if name.endswith(".gamma") else 0.0
            net.params[name] = np.full(shape, fill, np.float32)
        else:
            fill = 1.0 if name.endswith(".running_var") else 0.0
            net.buffers[name] = np.full(shape, fill, np.float32)
    return net


def trace(net: NetworkParams, x: np.ndarray, tape: Tape | None = None,
          training: bool = False, meshes: list[SphericalMesh] | None = None):
    """Run the layer table. Returns (outputs, param_vars).

    ``outputs`` holds the four log-depth heads as Vars, finest first
    (MR m, m-1, m-2, m-3). ``param_vars`` maps parameter names to the Vars
    that receive gradients after ``tape.backward``.
    """
    cfg = net.config
    if x.ndim != 3 or x.shape[1:] != (20 * 4 ** cfg.mr, cfg.input_channels):
        raise ValueError(f"network expects input (B, {20 * 4 ** cfg.mr}, {cfg.input_channels}),"
                         f" got {x.shape}")
    meshes = meshes or hierarchy(cfg.mr)
    pv = {k: Var(v, k) for k, v in net.params.items()}
    acts = {"pano": Var(x, "pano")}
    for name, spec in layer_plan(cfg).items():
        kind = spec["kind"]
        mesh = meshes[spec["level"]]
        src = [acts[s] for s in spec["sources"]]
        h = src[0] if len(src) == 1 else ad.concat_channels(tape, *src)
        if kind == "convb":
            out = ad.conv_block(tape, h, pv, name, mesh, net.buffers, training)
        elif kind == "dconv":
            out = ad.conv_bn_relu(tape, h, pv, name, mesh, net.buffers, training)
        elif kind == "pool":
            out = ad.mesh_pool(tape, h)
        elif kind == "unpool":
            out = ad.mesh_unpool(tape, h)
        else:
            out = ad.mesh_conv(tape, h, pv[f"{name}.weight"], pv[f"{name}.bias"], mesh)
        out.name = name
        acts[name] = out
    return [acts[o] for o in OUTPUTS], pv


def forward(net: NetworkParams, x: np.ndarray, training: bool = False,
            meshes: list[SphericalMesh] | None = None) -> list[np.ndarray]:
    """Inference pass; four log-depth arrays, finest scale first."""
    outputs, _ = trace(net, x, None, training, meshes)
    return [o.value for o in outputs]


# --- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"SPHDCKPT"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<5I")  # version, mr, tr, in_channels, entry count


class CheckpointError(ValueError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def _entries(net: NetworkParams):
    yield from sorted(net.params.items())
    yield from sorted(net.buffers.items())


def checkpoint_size(net: NetworkParams) -> int:
    size = len(CKPT_MAGIC) + _CKPT_HEADER.size
    for name, arr in _entries(net):
        size += 4 + len(name.encode("utf-8")) + 4 + 4 * arr.ndim + 4 * arr.size
    return size


def save_checkpoint(net: NetworkParams, path) -> None:
    cfg = net.config
    entries = list(_entries(net))
    chunks = [CKPT_MAGIC, _CKPT_HEADER.pack(CKPT_VERSION, cfg.mr, cfg.tr, cfg.in_channels,
                                            len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def _known_entry(name: str) -> str | None:
    """'param', 'buffer' or None for names the layer table does not produce."""
    layer, _, rest = name.partition(".")
    if layer not in LAYER_NAMES:
        return None
    kind = next(k for n, k, *_ in LAYERS if n == layer)
    parts = rest.split(".")
    if kind == "convb":
        if parts == ["proj", "weight"]:
            return "param"
        if len(parts) != 2 or parts[0] not in ("conv1", "conv2", "conv3"):
            return None
        leaf = parts[1]
    elif kind in ("dconv", "output") and len(parts) == 1:
        leaf = parts[0]
    else:
        return None
    if kind == "output":
        return "param" if leaf in ("weight", "bias") else None
    if leaf in _CONV_BN_PARAMS:
        return "param"
    return "buffer" if leaf in _BUFFERS else None


def load_checkpoint(path, mr: int | None = None, tr: int | None = None) -> NetworkParams:
    buf = Path(path).read_bytes()
    if buf[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    pos = len(CKPT_MAGIC)
    if len(buf) < pos + _CKPT_HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    version, ck_mr, ck_tr, in_ch, count = _CKPT_HEADER.unpack_from(buf, pos)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if (mr is not None and mr != ck_mr) or (tr is not None and tr != ck_tr):
        raise ConfigMismatchError(f"{path}: checkpoint has MR={ck_mr}, TR={ck_tr}; "
                                  f"requested MR={mr}, TR={tr}")
    pos += _CKPT_HEADER.size
    params, buffers = {}, {}

    def take(n):
        nonlocal pos
        if len(buf) < pos + n:
            raise CheckpointError(f"{path}: truncated payload at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        arr = np.frombuffer(take(4 * int(np.prod(shape, dtype=np.int64))), dtype="<f4")
        arr = arr.reshape(shape).astype(np.float32)
        kind = _known_entry(name)
        if kind is None:
            raise CheckpointError(f"{path}: unknown layer entry {name!r}")
        (params if kind == "param" else buffers)[name] = arr
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    first = params.get("convb_00.conv1.weight")
    if first is None:
        raise CheckpointError(f"{path}: missing convb_00 weights")
    divisor = max(1, 64 // first.shape[1])
    config = NetworkConfig(ck_mr, ck_tr, in_ch, divisor)
    for name, (_, shape, _) in parameter_shapes(config).items():
        got = params.get(name, buffers.get(name))
        if got is None or got.shape != shape:
            raise CheckpointError(f"{path}: entry {name!r} missing or mis-shaped")
    return NetworkParams(config, params, buffers)
