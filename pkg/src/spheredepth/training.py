"""Losses, Adam, an analytic box-room generator and the training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tape
from .mesh import hierarchy, sample_pattern
from .network import NetworkParams, trace
from .panorama import Panorama, image_to_mesh, pixel_center_directions, table_image_size

LOSS_KINDS = ("log", "abs", "huber")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "log"
    huber_c: float = 1.0
    scale_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    depth_range: tuple[float, float] = (0.1, 10.0)

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if any(w < 0 for w in self.scale_weights) or not any(self.scale_weights):
            raise ValueError("scale weights must be non-negative and not all zero")
        lo, hi = self.depth_range
        if not 0 < lo < hi:
            raise ValueError(f"depth range must satisfy 0 < min < max, got {self.depth_range}")
        if self.huber_c <= 0:
            raise ValueError("huber_c must be positive")


def valid_mask(gt: np.ndarray, depth_range: tuple[float, float]) -> np.ndarray:
    lo, hi = depth_range
    return np.isfinite(gt) & (gt >= lo) & (gt <= hi)


def _elementwise(pred: np.ndarray, gt: np.ndarray, cfg: LossConfig):
    """Per-sample error and its derivative with respect to the log-depth head."""
    if cfg.kind == "log":
        diff = pred - np.log(gt)
        return np.abs(diff), np.sign(diff)
    depth = np.exp(pred)
    diff = depth - gt
    if cfg.kind == "abs":
        return np.abs(diff), np.sign(diff) * depth
    c = cfg.huber_c
    small = np.abs(diff) < c
    err = np.where(small, np.abs(diff), (diff ** 2 + c ** 2) / (2 * c))
    derr = np.where(small, np.sign(diff), diff / c)
    return err, derr * depth


def masked_loss(preds, gts, cfg: LossConfig = LossConfig()):
    """Multi-scale loss over valid samples.

    ``preds`` are log-depth arrays, ``gts`` metric depth arrays, both finest
    scale first. Each scale is averaged over its own valid samples and then
    weighted. Returns (loss, list of gradients with respect to ``preds``).
    """
    if len(preds) != len(gts) or len(preds) > len(cfg.scale_weights):
        raise ValueError(f"got {len(preds)} predictions, {len(gts)} targets and "
                         f"{len(cfg.scale_weights)} scale weights")
    total = 0.0
    grads = []
    for pred, gt, weight in zip(preds, gts, cfg.scale_weights):
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != target shape {gt.shape}")
        mask = valid_mask(gt, cfg.depth_range)
        n = int(mask.sum())
        grad = np.zeros_like(pred)
        if n and weight:
            safe_gt = np.where(mask, gt, 1.0)
            err, derr = _elementwise(pred, safe_gt, cfg)
            total += weight * float(err[mask].sum()) / n
            grad[mask] = (weight / n) * derr[mask]
        grads.append(grad)
    return total, grads


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 4e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """In-place Adam update with bias correction."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


# --- synthetic scenes ----------------------------------------------------------

DEFAULT_COLORS = np.array([
    [204, 51, 51], [51, 153, 51], [51, 51, 204],
    [230, 204, 51], [204, 102, 204], [51, 204, 204],
], dtype=np.float64) / 255.0   # walls +x, -x, +y, -y, +z (ceiling), -z (floor)


@dataclass(frozen=True)
class SyntheticScene:
    """Axis-aligned box room centred on the camera."""
    half_extents: tuple[float, float, float] = (2.5, 1.8, 1.3)
    colors: np.ndarray = field(default_factory=lambda: DEFAULT_COLORS.copy(), compare=False)

    def __post_init__(self):
        if any(not 0.5 <= e <= 8.0 for e in self.half_extents):
            raise ValueError(f"half extents must lie in [0.5, 8] m, got {self.half_extents}")
        if np.shape(self.colors) != (6, 3):
            raise ValueError("a scene needs one RGB color per wall (6, 3)")

    def jittered(self, rng: np.random.Generator, amount: float) -> "SyntheticScene":
        scale = 1.0 + rng.uniform(-amount, amount, size=3)
        ext = np.clip(np.asarray(self.half_extents) * scale, 0.5, 8.0)
        return replace(self, half_extents=tuple(float(e) for e in ext))


def ray_box_distance(dirs: np.ndarray, half_extents) -> tuple[np.ndarray, np.ndarray]:
    """Distance from the origin to the box along unit ``dirs`` and the wall hit."""
    ext = np.asarray(half_extents, dtype=np.float64)
    with np.errstate(divide="ignore"):
        per_axis = np.where(dirs != 0, ext / np.abs(dirs), np.inf)   # (..., 3)
    axis = np.argmin(per_axis, axis=-1)
    dist = np.take_along_axis(per_axis, axis[..., None], -1)[..., 0]
    sign = np.take_along_axis(dirs, axis[..., None], -1)[..., 0] < 0
    return dist, 2 * axis + sign


def render_scene(scene: SyntheticScene, width: int, height: int) -> tuple[Panorama, Panorama]:
    """Equirectangular (rgb, depth) of the room seen from its centre."""
    dirs = pixel_center_directions(width, height)
    depth, wall = ray_box_distance(dirs, scene.half_extents)
    rgb = np.asarray(scene.colors)[wall]
    return Panorama(rgb.astype(np.float32)), Panorama(depth[..., None].astype(np.float32))


# --- training loop -------------------------------------------------------------

class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    lr: float = 4e-4
    batch_size: int = 1
    seed: int = 0
    jitter: float = 0.0
    loss: LossConfig = LossConfig()
    image_height: int | None = None   # defaults to the table row for MR + TR


def prepare_sample(net: NetworkParams, scene: SyntheticScene, height: int):
    """Render a scene and resample it: (input array, per-scale GT arrays)."""
    cfg = net.config
    meshes = hierarchy(cfg.mr)
    rgb, depth = render_scene(scene, 2 * height, height)
    mesh = meshes[cfg.mr]
    x = image_to_mesh(rgb, mesh, sample_pattern(mesh, cfg.tr), "bilinear").data
    gts = []
    for level in range(cfg.mr, cfg.mr - 4, -1):
        coarse = meshes[level]
        gts.append(image_to_mesh(depth, coarse, sample_pattern(coarse, cfg.tr), "nearest").data)
    return x.astype(np.float32), gts


def _first_nonfinite(tape: Tape) -> str | None:
    for out, _, _ in tape.records:
        if out.name and not np.all(np.isfinite(out.value)):
            return out.name
    return None


def train_step(net: NetworkParams, state: AdamState, x: np.ndarray, gts, cfg: TrainConfig,
               lr: float | None = None) -> float:
    tape = Tape()
    outputs, pv = trace(net, x, tape, training=True)
    loss, seeds = masked_loss([o.value for o in outputs], gts, cfg.loss)
    if not math.isfinite(loss):
        layer = _first_nonfinite(tape) or "loss"
        raise NonFiniteLossError(f"non-finite loss {loss}; first non-finite layer: {layer}")
    tape.backward({o: s.astype(o.value.dtype) for o, s in zip(outputs, seeds)})
    grads = {}
    for name, var in pv.items():
        g = np.zeros_like(var.value) if var.grad is None else var.grad
        if not np.all(np.isfinite(g)):
            raise NonFiniteLossError(f"non-finite gradient in {name}")
        grads[name] = g
    adam_step(net.params, grads, state, cfg.lr if lr is None else lr)
    return loss


def train(net: NetworkParams, scenes, cfg: TrainConfig = TrainConfig(),
          state: AdamState | None = None, log=None):
    """Optimise ``net`` in place. Returns (net, per-step loss history).

    Each step draws ``batch_size`` scenes (seeded), applies extent jitter,
    renders, resamples, and takes one Adam step on the multi-scale loss.
    """
    if cfg.steps < 1:
        raise ValueError("steps must be >= 1")
    scenes = list(scenes)
    if not scenes:
        raise ValueError("need at least one scene")
    mc = net.config
    height = cfg.image_height or table_image_size(mc.mr + mc.tr)[0]
    rng = np.random.default_rng(cfg.seed)
    state = state or AdamState()
    cache = {}
    history = []
    for step in range(cfg.steps):
        xs, gts = [], []
        for _ in range(cfg.batch_size):
            k = int(rng.integers(len(scenes)))
            if cfg.jitter > 0:
                x, g = prepare_sample(net, scenes[k].jittered(rng, cfg.jitter), height)
            else:
                if k not in cache:
                    cache[k] = prepare_sample(net, scenes[k], height)
                x, g = cache[k]
            xs.append(x)
            gts.append(g)
        x = np.concatenate(xs)
        gt = [np.concatenate([g[s] for g in gts]) for s in range(4)]
        loss = train_step(net, state, x, gt, cfg)
        history.append(loss)
        if log is not None:
            log(step, loss)
    return net, history


def write_history(path, history) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("step,loss\n")
        for i, loss in enumerate(history):
            fh.write(f"{i},{loss!r}\n")
