"""Layer primitives and losses built on :mod:`nmrmos.nn.tensor`."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, absolute, log_softmax, mean, tensor

__all__ = ["conv1d", "conv_output_length", "linear", "l1_loss", "cross_entropy"]


def conv_output_length(length: int, kernel: int, stride: int) -> int:
    return (length - kernel) // stride + 1


def _tap_matrix(w: np.ndarray) -> np.ndarray:
    """[O, C, K] -> [K*C, O], rows ordered tap-major."""
    o, c, k = w.shape
    return np.ascontiguousarray(w.transpose(2, 1, 0).reshape(k * c, o))


def _conv_forward_cl(x: np.ndarray, w: np.ndarray, stride: int, t_out: int) -> np.ndarray:
    """Channels-last strided correlation: x [B, T, C], w [O, C, K] -> [B, t_out, O]."""
    b, _, c = x.shape
    o, _, k = w.shape
    wall = _tap_matrix(w)
    out = np.empty((b, t_out, o), dtype=np.result_type(x, w))
    if k % stride == 0:
        # Fold each stride-block of samples into the channel axis; the conv then
        # becomes k/stride shifted dense matmuls with contraction stride*C.
        q, width = k // stride, stride * c
        xr = x[:, : (t_out + q - 1) * stride, :].reshape(b, t_out + q - 1, width)
        for i in range(b):
            acc = xr[i, :t_out] @ wall[:width]
            for m in range(1, q):
                acc += xr[i, m:m + t_out] @ wall[m * width:(m + 1) * width]
            out[i] = acc
    else:
        span = stride * (t_out - 1) + 1
        for i in range(b):
            acc = x[i, 0:span:stride] @ wall[:c]
            for tap in range(1, k):
                acc += x[i, tap:tap + span:stride] @ wall[tap * c:(tap + 1) * c]
            out[i] = acc
    return out


def _conv_backward_cl(g: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int, need_x: bool = True):
    b, _, c = x.shape
    o, _, k = w.shape
    t_out = g.shape[1]
    wall = _tap_matrix(w)
    gx = np.zeros_like(x) if need_x else None
    gwall = np.zeros_like(wall)
    if k % stride == 0:
        q, width = k // stride, stride * c
        blocks = t_out + q - 1
        xr = x[:, : blocks * stride, :].reshape(b, blocks, width)
        gxr = gx[:, : blocks * stride, :].reshape(b, blocks, width) if need_x else None
        for i in range(b):
            gi = g[i]
            a = gi @ wall.T if need_x else None
            for m in range(q):
                cols = slice(m * width, (m + 1) * width)
                if need_x:
                    gxr[i, m:m + t_out] += a[:, cols]
                gwall[cols] += xr[i, m:m + t_out].T @ gi
    else:
        span = stride * (t_out - 1) + 1
        for i in range(b):
            gi = g[i]
            a = gi @ wall.T if need_x else None
            for tap in range(k):
                cols = slice(tap * c, (tap + 1) * c)
                if need_x:
                    gx[i, tap:tap + span:stride] += a[:, cols]
                gwall[cols] += x[i, tap:tap + span:stride].T @ gi
    gw = np.ascontiguousarray(gwall.reshape(k, c, o).transpose(2, 1, 0))
    return gx, gw


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           channels_last: bool = False) -> Tensor:
    """Strided 1-D cross-correlation (no padding).

    ``x`` is ``[C_in, T]`` or ``[B, C_in, T]`` (``[.., T, C_in]`` when
    ``channels_last``); ``weight`` is ``[C_out, C_in, K]``. Output length is
    ``(T - K) // stride + 1``.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if weight.ndim != 3:
        raise ValueError(f"conv weight must be [C_out, C_in, K], got shape {weight.shape}")
    if x.ndim not in (2, 3):
        raise ValueError(f"conv input must be 2-D or 3-D, got shape {x.shape}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if not channels_last:
        xd = np.ascontiguousarray(xd.transpose(0, 2, 1))
    c_in = xd.shape[2]
    if c_in != weight.shape[1]:
        raise ValueError(f"conv channel mismatch: input {x.shape} vs weight {weight.shape}")
    t = xd.shape[1]
    k = weight.shape[2]
    if t < k:
        raise ValueError(f"conv input length {t} shorter than kernel {k} (input {x.shape}, weight {weight.shape})")
    t_out = conv_output_length(t, k, stride)
    wd = weight.data
    out = _conv_forward_cl(xd, wd, stride, t_out)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"conv bias shape {bias.shape} does not match weight {weight.shape}")
        out += bias.data
    if not channels_last:
        out = out.transpose(0, 2, 1)
    if squeeze:
        out = out[0]
    out = np.ascontiguousarray(out)

    def backward(g):
        g = g[None] if squeeze else g
        if not channels_last:
            g = g.transpose(0, 2, 1)
        g = np.ascontiguousarray(g)
        gx = gw = gb = None
        if x.requires_grad or weight.requires_grad:
            gx, gw = _conv_backward_cl(g, xd, wd, stride, need_x=x.requires_grad)
            if gx is not None:
                if not channels_last:
                    gx = gx.transpose(0, 2, 1)
                if squeeze:
                    gx = gx[0]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 1))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(out, parents, backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as ``[in, out]``."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error."""
    target = tensor(target, pred)
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    return mean(absolute(pred - target))


def cross_entropy(logits: Tensor, onehot) -> Tensor:
    """Mean over rows of ``-sum_k y_k log softmax(logits)_k``."""
    onehot = tensor(onehot, logits)
    if logits.shape != onehot.shape:
        raise ValueError(f"cross_entropy shape mismatch: {logits.shape} vs {onehot.shape}")
    nll = -(log_softmax(logits, axis=-1) * onehot).sum(axis=-1)
    return mean(nll)
