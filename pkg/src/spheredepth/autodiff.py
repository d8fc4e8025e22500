"""A minimal reverse-mode tape over the kernels in :mod:`spheredepth.ops`.

Each recorded op stores its inputs, its output and a closure mapping the
output gradient to input gradients. ``Tape.backward`` replays the records in
exact reverse order and sums gradients wherever a value fans out.

Passing ``tape=None`` to any op runs it without recording (inference).
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence

import numpy as np

from . import ops
from .mesh import SphericalMesh


class Var:
    __slots__ = ("value", "grad", "name")

    def __init__(self, value: np.ndarray, name: str | None = None):
        self.value = value
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Var{label} shape={self.value.shape}>"


class Tape:
    def __init__(self):
        self.records: list[tuple[Var, tuple[Var, ...], Callable]] = []

    def __len__(self):
        return len(self.records)

    def record(self, output: Var, inputs: Sequence[Var], vjp: Callable) -> Var:
        self.records.append((output, tuple(inputs), vjp))
        return output

    def backward(self, seeds: Mapping[Var, np.ndarray] | Var, grad: np.ndarray | None = None):
        if isinstance(seeds, Var):
            seeds = {seeds: np.ones_like(seeds.value) if grad is None else grad}
        for var, g in seeds.items():
            _accumulate(var, g)
        for output, inputs, vjp in reversed(self.records):
            if output.grad is None:
                continue
            for var, g in zip(inputs, vjp(output.grad)):
                if g is not None:
                    _accumulate(var, g)


def _accumulate(var: Var, g: np.ndarray):
    var.grad = g if var.grad is None else var.grad + g


def _run(tape, output_value, inputs, vjp, name=None) -> Var:
    out = Var(output_value, name)
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out


def mesh_conv(tape: Tape | None, x: Var, weight: Var, bias: Var | None,
              mesh: SphericalMesh) -> Var:
    y = ops.mesh_conv(x.value, weight.value, None if bias is None else bias.value, mesh)

    def vjp(g):
        gx, gw, gb = ops.mesh_conv_backward(g, x.value, weight.value, mesh)
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _run(tape, y, inputs, vjp)


def mesh_pool(tape: Tape | None, x: Var) -> Var:
    y, argmax = ops.mesh_pool(x.value)
    return _run(tape, y, (x,), lambda g: (ops.mesh_pool_backward(g, argmax),))


def mesh_unpool(tape: Tape | None, x: Var) -> Var:
    return _run(tape, ops.mesh_unpool(x.value), (x,),
                lambda g: (ops.mesh_unpool_backward(g),))


def relu(tape: Tape | None, x: Var) -> Var:
    return _run(tape, ops.relu(x.value), (x,), lambda g: (ops.relu_backward(g, x.value),))


def add(tape: Tape | None, a: Var, b: Var) -> Var:
    return _run(tape, a.value + b.value, (a, b), lambda g: (g, g))


def concat_channels(tape: Tape | None, *xs: Var) -> Var:
    sizes = [x.value.shape[-1] for x in xs]
    return _run(tape, ops.concat_channels(*(x.value for x in xs)), xs,
                lambda g: ops.split_backward(g, sizes))


def batch_norm(tape: Tape | None, x: Var, gamma: Var, beta: Var,
               running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None,
               training: bool = True) -> Var:
    y, cache = ops.batch_norm(x.value, gamma.value, beta.value, running_mean, running_var,
                              training=training)
    return _run(tape, y, (x, gamma, beta),
                lambda g: ops.batch_norm_backward(g, gamma.value, cache))


def conv_bn_relu(tape, x: Var, p: Mapping[str, Var], prefix: str, mesh: SphericalMesh,
                 buffers: Mapping[str, np.ndarray] | None, training: bool,
                 activation: bool = True) -> Var:
    """mesh_conv -> batch_norm [-> relu] using parameters ``{prefix}.weight`` etc."""
    h = mesh_conv(tape, x, p[f"{prefix}.weight"], p[f"{prefix}.bias"], mesh)
    rm = rv = None
    if buffers is not None:
        rm, rv = buffers[f"{prefix}.running_mean"], buffers[f"{prefix}.running_var"]
    h = batch_norm(tape, h, p[f"{prefix}.gamma"], p[f"{prefix}.beta"], rm, rv, training)
    return relu(tape, h) if activation else h


def conv_block(tape, x: Var, p: Mapping[str, Var], prefix: str, mesh: SphericalMesh,
               buffers: Mapping[str, np.ndarray] | None = None, training: bool = True) -> Var:
    """Three conv+norm layers with a residual from the block input to the last one.

    A pointwise projection replaces the identity shortcut when the channel
    count changes (parameters ``{prefix}.proj.weight``).
    """
    h = conv_bn_relu(tape, x, p, f"{prefix}.conv1", mesh, buffers, training)
    h = conv_bn_relu(tape, h, p, f"{prefix}.conv2", mesh, buffers, training)
    h = conv_bn_relu(tape, h, p, f"{prefix}.conv3", mesh, buffers, training, activation=False)
    shortcut = x
    if f"{prefix}.proj.weight" in p:
        shortcut = mesh_conv(tape, x, p[f"{prefix}.proj.weight"], None, mesh)
    return relu(tape, add(tape, h, shortcut))
