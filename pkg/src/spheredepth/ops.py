"""Forward and adjoint kernels for per-face feature arrays of shape (B, F, C).

Everything here is a plain function on numpy arrays. Gradient bookkeeping
lives in :mod:`spheredepth.autodiff`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import SphericalMesh

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_faces(x: np.ndarray, mesh: SphericalMesh):
    if x.ndim != 3:
        raise ValueError(f"expected a (batch, faces, channels) array, got shape {x.shape}")
    if x.shape[1] != mesh.num_faces:
        raise ValueError(f"input has {x.shape[1]} faces but the level-{mesh.level} mesh "
                         f"has {mesh.num_faces}")


@dataclass
class ConvParams:
    """Slot weights stacked as ``weight[k]`` (out, in); k = 0 is the face itself."""
    weight: np.ndarray  # (K, out, in), K = 4 or 1 (pointwise)
    bias: np.ndarray    # (out,)

    @property
    def w0(self):
        return self.weight[0]

    @property
    def w1(self):
        return self.weight[1]

    @property
    def w2(self):
        return self.weight[2]

    @property
    def w3(self):
        return self.weight[3]


def gather_neighbors(x: np.ndarray, mesh: SphericalMesh) -> np.ndarray:
    """(B, F, C) -> (B, F, 4, C): the face followed by its three edge neighbours."""
    return np.concatenate([x[:, :, None, :], x[:, mesh.adjacency, :]], axis=2)


def scatter_neighbors(grad_gathered: np.ndarray, mesh: SphericalMesh) -> np.ndarray:
    """Adjoint of :func:`gather_neighbors`, written as a gather over the
    transposed adjacency so that no face loop or atomic add is needed."""
    back = grad_gathered[:, mesh.adjacency, 1 + mesh.reverse_slot, :]  # (B, F, 3, C)
    return grad_gathered[:, :, 0, :] + back.sum(axis=2)


def mesh_conv(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
              mesh: SphericalMesh) -> np.ndarray:
    _check_faces(x, mesh)
    k, c_out, c_in = weight.shape
    if x.shape[2] != c_in:
        raise ValueError(f"input has {x.shape[2]} channels, weight expects {c_in}")
    b, f, _ = x.shape
    cols = gather_neighbors(x, mesh) if k == 4 else x[:, :, None, :]
    w = weight.transpose(0, 2, 1).reshape(k * c_in, c_out)
    out = cols.reshape(b * f, k * c_in) @ w
    if bias is not None:
        out += bias
    return out.reshape(b, f, c_out)


def mesh_conv_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray,
                       mesh: SphericalMesh):
    """Returns (grad_x, grad_weight, grad_bias)."""
    k, c_out, c_in = weight.shape
    b, f, _ = x.shape
    cols = gather_neighbors(x, mesh) if k == 4 else x[:, :, None, :]
    g = grad_out.reshape(b * f, c_out)
    grad_w = (cols.reshape(b * f, k * c_in).T @ g).reshape(k, c_in, c_out).transpose(0, 2, 1)
    grad_bias = g.sum(axis=0)
    w = weight.transpose(0, 2, 1).reshape(k * c_in, c_out)
    grad_cols = (g @ w.T).reshape(b, f, k, c_in)
    grad_x = scatter_neighbors(grad_cols, mesh) if k == 4 else grad_cols[:, :, 0, :]
    return grad_x, np.ascontiguousarray(grad_w), grad_bias


def mesh_pool(x: np.ndarray, mesh_fine: SphericalMesh | None = None):
    """Channelwise max over the four children; ties go to the lowest slot."""
    if mesh_fine is not None:
        _check_faces(x, mesh_fine)
        if mesh_fine.level < 1:
            raise ValueError("cannot pool a level-0 mesh tensor")
    b, f, c = x.shape
    if f % 4 or f < 80:
        raise ValueError(f"cannot pool {f} faces")
    grouped = x.reshape(b, f // 4, 4, c)
    argmax = grouped.argmax(axis=2)
    out = np.take_along_axis(grouped, argmax[:, :, None, :], axis=2)[:, :, 0, :]
    return out, argmax


def mesh_pool_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    b, fc, c = grad_out.shape
    grad = np.zeros((b, fc, 4, c), dtype=grad_out.dtype)
    np.put_along_axis(grad, argmax[:, :, None, :], grad_out[:, :, None, :], axis=2)
    return grad.reshape(b, 4 * fc, c)


def mesh_unpool(x: np.ndarray, max_level: int | None = None) -> np.ndarray:
    """Every child copies its parent."""
    if max_level is not None and x.shape[1] * 4 > 20 * 4 ** max_level:
        raise ValueError(f"unpooling {x.shape[1]} faces exceeds the built level {max_level}")
    return np.repeat(x, 4, axis=1)


def mesh_unpool_backward(grad_out: np.ndarray) -> np.ndarray:
    b, f, c = grad_out.shape
    return grad_out.reshape(b, f // 4, 4, c).sum(axis=2)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def concat_channels(*xs: np.ndarray) -> np.ndarray:
    shapes = {x.shape[:2] for x in xs}
    if len(shapes) != 1:
        raise ValueError(f"cannot concatenate tensors with shapes {[x.shape for x in xs]}")
    return np.concatenate(xs, axis=-1)


def split_backward(grad_out: np.ndarray, sizes) -> list[np.ndarray]:
    return np.split(grad_out, np.cumsum(sizes)[:-1], axis=-1)


def batch_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None,
               training: bool = True, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
    """Normalise each channel over batch and faces jointly.

    In training mode the running statistics (if given) are updated in place.
    Returns (y, cache) where cache feeds :func:`batch_norm_backward`.
    """
    if x.shape[-1] != gamma.shape[0]:
        raise ValueError(f"input has {x.shape[-1]} channels, norm has {gamma.shape[0]}")
    if training:
        mean = x.mean(axis=(0, 1))
        var = x.var(axis=(0, 1))
        if running_mean is not None:
            n = x.shape[0] * x.shape[1]
            unbiased = var * n / max(n - 1, 1)
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    y = xhat * gamma + beta
    return y, (xhat, inv_std, training)


def batch_norm_backward(grad_out: np.ndarray, gamma: np.ndarray, cache):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    xhat, inv_std, training = cache
    grad_gamma = (grad_out * xhat).sum(axis=(0, 1))
    grad_beta = grad_out.sum(axis=(0, 1))
    dxhat = grad_out * gamma
    if not training:
        return dxhat * inv_std, grad_gamma, grad_beta
    n = grad_out.shape[0] * grad_out.shape[1]
    grad_x = inv_std / n * (n * dxhat - dxhat.sum(axis=(0, 1))
                            - xhat * (dxhat * xhat).sum(axis=(0, 1)))
    return grad_x, grad_gamma, grad_beta
