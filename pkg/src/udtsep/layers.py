"""Layer primitives: conv1d, transposed conv1d, batch norm, dropout, softplus.

Every layer has a functional form operating on :class:`Tensor` arguments
(used for gradient checks) and a small stateful class holding parameters.
Inputs are laid out as ``(batch, channels, time)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import SeededRng, Tensor, make_node

__all__ = [
    "softplus",
    "conv1d",
    "conv_transpose1d",
    "batch_norm",
    "dropout",
    "Conv1d",
    "TransposedConv1d",
    "BatchNorm1d",
    "Dropout",
]


def softplus(x: Tensor) -> Tensor:
    """Elementwise ``log(1 + exp(x))``, stable for large ``|x|``."""
    xd = x.data
    # same as logaddexp(0, x) but several times faster
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))

    def _bw(g):
        # sigmoid(x) == exp(x - softplus(x)) without overflow
        return (g * np.exp(xd - out),)

    return make_node(out, (x,), _bw, "softplus")


def _im2col(xp: np.ndarray, k: int, t_out: int) -> np.ndarray:
    """(B, C, Tp) -> (B, C*k, t_out) with row index ``c*k + j``."""
    b, c, _ = xp.shape
    win = sliding_window_view(xp, k, axis=2)[:, :, :t_out, :]  # (B, C, t_out, k)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(b, c * k, t_out)


def _col2im(cols: np.ndarray, channels: int, k: int, length: int) -> np.ndarray:
    """Overlap-add inverse of :func:`_im2col`: (B, C*k, L) -> (B, C, L + k - 1)."""
    b = cols.shape[0]
    cols = cols.reshape(b, channels, k, length)
    out = np.zeros((b, channels, length + k - 1), dtype=cols.dtype)
    for j in range(k):
        out[:, :, j:j + length] += cols[:, :, j, :]
    return out


def _check_input(x: Tensor, channels: int, name: str) -> None:
    if x.ndim != 3:
        raise ValueError(f"{name}: expected (batch, channels, time), got shape {x.shape}")
    if x.shape[1] != channels:
        raise ValueError(f"{name}: expected {channels} input channels, got {x.shape[1]}")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding and stride 1.

    weight is ``(out_channels, in_channels, k)``; output time length is
    ``T + 2*padding - k + 1``.
    """
    c_out, c_in, k = weight.shape
    _check_input(x, c_in, "conv1d")
    b, _, t = x.shape
    t_out = t + 2 * padding - k + 1
    if t_out < 1:
        raise ValueError(f"conv1d: input length {t} too short for kernel {k}, padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, t_out)
    w2 = weight.data.reshape(c_out, c_in * k)
    out = np.matmul(w2, cols)
    if bias is not None:
        out = out + bias.data[None, :, None]

    def _bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g)
            gx = _col2im(dcols, c_in, k, t_out)[:, :, padding:padding + t]
        if weight.requires_grad:
            gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2), dtype=np.float64).astype(bias.dtype)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, _bw, "conv1d")


def conv_transpose1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv1d` (stride 1).

    weight is ``(in_channels, out_channels, k)``; output time length is
    ``T + k - 1 - 2*padding``. With zero biases and the same weight array,
    ``<conv1d(u, w), v> == <conv_transpose1d(v, w), u>``.
    """
    c_in, c_out, k = weight.shape
    _check_input(x, c_in, "conv_transpose1d")
    b, _, t = x.shape
    t_full = t + k - 1
    t_out = t_full - 2 * padding
    if t_out < 1:
        raise ValueError(f"conv_transpose1d: padding {padding} too large for length {t}")

    w2 = weight.data.reshape(c_in, c_out * k)
    ycols = np.matmul(w2.T, x.data)  # (B, c_out*k, t)
    out = _col2im(ycols, c_out, k, t)[:, :, padding:padding + t_out]
    if bias is not None:
        out = out + bias.data[None, :, None]

    def _bw(g):
        gx = gw = gb = None
        gfull = np.zeros((b, c_out, t_full), dtype=g.dtype)
        gfull[:, :, padding:padding + t_out] = g
        gcols = _im2col(gfull, k, t)  # (B, c_out*k, t)
        if x.requires_grad:
            gx = np.matmul(w2, gcols)
        if weight.requires_grad:
            gw = np.matmul(x.data, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2), dtype=np.float64).astype(bias.dtype)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, _bw, "conv_transpose1d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    eps: float = 1e-5,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-channel normalization over batch and time.

    In training mode the batch statistics are used; otherwise the supplied
    running statistics. Returns the output together with the (biased) mean
    and variance that were used for normalization.
    """
    _check_input(x, gamma.shape[0], "batch_norm")
    # statistics and reductions are accumulated in float64 and the output is
    # cast back; float32 cancellation otherwise dominates small gradients
    dt = np.result_type(x.dtype, gamma.dtype, beta.dtype)
    xd = x.data.astype(np.float64)
    gd = gamma.data.astype(np.float64)[None, :, None]
    if training:
        n = xd.shape[0] * xd.shape[2]
        if n < 2:
            raise ValueError("batch_norm: training mode needs batch*time >= 2")
        mean = xd.mean(axis=(0, 2))
        centered = xd - mean[None, :, None]
        var = (centered * centered).mean(axis=(0, 2))
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm: inference mode needs running statistics")
        mean = np.asarray(running_mean, dtype=np.float64)
        var = np.asarray(running_var, dtype=np.float64)
        centered = xd - mean[None, :, None]
    inv_std = (1.0 / np.sqrt(var + eps))[None, :, None]
    xhat = centered * inv_std
    out = (gd * xhat + beta.data.astype(np.float64)[None, :, None]).astype(dt)

    def _bw(g):
        g = g.astype(np.float64)
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if training:
                s1 = dxhat.sum(axis=(0, 2), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
                gx = (inv_std / n) * (n * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv_std
            gx = gx.astype(x.dtype)
        ggamma = (g * xhat).sum(axis=(0, 2)).astype(gamma.dtype) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2)).astype(beta.dtype) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return make_node(out, (x, gamma, beta), _bw, "batch_norm"), mean, var


def dropout(x: Tensor, p: float, rng: SeededRng | None, training: bool = True, mask: np.ndarray | None = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    A precomputed ``mask`` (already scaled) may be given instead of ``rng``.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("dropout in training mode needs an rng or a mask")
        keep = rng.random(x.shape) >= p
        mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# stateful layers ------------------------------------------------------------

class Conv1d:
    def __init__(self, in_channels: int, out_channels: int, kernel_width: int = 5,
                 padding: int | None = None, rng: SeededRng | None = None, dtype=np.float32):
        if kernel_width % 2 != 1:
            raise ValueError("kernel_width must be odd")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_width = kernel_width
        self.padding = (kernel_width - 1) // 2 if padding is None else padding
        bound = np.sqrt(1.0 / (in_channels * kernel_width))
        rng = rng or SeededRng(0)
        w = rng.uniform((out_channels, in_channels, kernel_width), -bound, bound)
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.padding)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class TransposedConv1d:
    def __init__(self, in_channels: int, out_channels: int, kernel_width: int = 5,
                 padding: int | None = None, rng: SeededRng | None = None, dtype=np.float32):
        if kernel_width % 2 != 1:
            raise ValueError("kernel_width must be odd")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_width = kernel_width
        self.padding = (kernel_width - 1) // 2 if padding is None else padding
        bound = np.sqrt(1.0 / (in_channels * kernel_width))
        rng = rng or SeededRng(0)
        w = rng.uniform((in_channels, out_channels, kernel_width), -bound, bound)
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose1d(x, self.weight, self.bias, self.padding)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class BatchNorm1d:
    """Batch normalization with running statistics (momentum 0.1).

    The running variance is updated with the unbiased batch variance.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.training = True

    def __call__(self, x: Tensor, update_stats: bool = True) -> Tensor:
        out, mean, var = batch_norm(x, self.gamma, self.beta, self.running_mean,
                                    self.running_var, self.training, self.eps)
        if self.training and update_stats:
            n = x.shape[0] * x.shape[2]
            m = self.momentum
            unbiased = var * (n / (n - 1))
            dt = self.running_mean.dtype
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(dt)
            self.running_var = np.maximum((1 - m) * self.running_var + m * unbiased, 0.0).astype(dt)
        return out

    def parameters(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class Dropout:
    def __init__(self, p: float = 0.3):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.training = True

    def __call__(self, x: Tensor, rng: SeededRng | None) -> Tensor:
        return dropout(x, self.p, rng, self.training)
