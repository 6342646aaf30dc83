"""Differentiable layer ops with hand-written backward rules."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import DTYPE, Tensor, make_result, needs_grad


class DimensionError(ValueError):
    """Operand shapes are incompatible; the message names the axis."""


def _check_rank(x: Tensor, rank: int, what: str) -> None:
    if x.ndim != rank:
        raise DimensionError(f"{what}: expected rank {rank}, got shape {x.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return make_result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, alpha: Tensor) -> Tensor:
    """Multiply every element of ``x`` by the scalar tensor ``alpha``."""
    if alpha.data.size != 1:
        raise DimensionError(f"scale: alpha must hold one value, got shape {alpha.shape}")
    a = alpha.data.reshape(())

    def backward(g):
        return g * a, np.asarray(np.sum(g * x.data)).reshape(alpha.shape)

    return make_result(x.data * a, (x, alpha), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([t.data for t in xs], axis=axis), xs, backward)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return make_result(x.data[idx], (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (N, D), weight (O, D), bias (O,)."""
    _check_rank(x, 2, "linear input")
    _check_rank(weight, 2, "linear weight")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input axis 1 has size {x.shape[1]} but weight axis 1 has size {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias axis 0 must be {weight.shape[0]}, got shape {bias.shape}")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        gx = g @ weight.data if needs_grad(x) else None
        gw = g.T @ x.data if needs_grad(weight) else None
        gb = g.sum(axis=0) if needs_grad(bias) else None
        return gx, gw, gb

    return make_result(out, (x, weight, bias), backward)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xh: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Padded NHWC input -> (N*Ho*Wo, kh*kw*C) patch matrix, columns ordered (i, j, c)."""
    n, _, _, c = xh.shape
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    shifted = [xh[:, i : i + hs : stride, j : j + ws : stride, :] for i in range(kh) for j in range(kw)]
    return np.concatenate(shifted, axis=3).reshape(n * ho * wo, kh * kw * c)


def _weight_matrix(w: np.ndarray) -> np.ndarray:
    """(F, C, kh, kw) -> (F, kh*kw*C), matching the _im2col column order."""
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _nhwc_pad(x: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    return np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (top, bottom), (left, right), (0, 0)))


def _conv_input_grad(g: np.ndarray, w: np.ndarray, in_hw: tuple[int, int], stride: int, padding: int) -> np.ndarray:
    """Gradient w.r.t. the conv input: a stride-1 correlation of the dilated,
    padded output gradient with the spatially flipped, channel-swapped kernel."""
    n, f, ho, wo = g.shape
    _, c, kh, kw = w.shape
    h, wd = in_hw
    if stride > 1:
        gd = np.zeros((n, f, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=DTYPE)
        gd[:, :, ::stride, ::stride] = g
    else:
        gd = g
    extra_h = (h + 2 * padding - kh) % stride
    extra_w = (wd + 2 * padding - kw) % stride
    ph, pw = kh - 1 - padding, kw - 1 - padding
    # padding > k-1 would need cropping instead
    if ph < 0 or pw < 0:
        raise DimensionError(f"conv2d: padding {padding} larger than kernel-1 is unsupported")
    gp = _nhwc_pad(gd, ph, ph + extra_h, pw, pw + extra_w)
    wf = _weight_matrix(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    cols = _im2col(gp, kh, kw, 1, h, wd)
    return (cols @ wf.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over NCHW input via im2col and one matmul."""
    _check_rank(x, 4, "conv2d input")
    _check_rank(weight, 4, "conv2d weight")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise DimensionError(f"conv2d: padding must be >= 0, got {padding}")
    if wc != c:
        raise DimensionError(f"conv2d: channel axis (1) of input is {c} but weight expects {wc}")
    if kh > h + 2 * padding:
        raise DimensionError(f"conv2d: kernel height {kh} exceeds padded height axis (2) {h + 2 * padding}")
    if kw > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel width {kw} exceeds padded width axis (3) {w + 2 * padding}")
    if bias.shape != (f,):
        raise DimensionError(f"conv2d: bias axis 0 must be {f}, got shape {bias.shape}")

    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xh = _nhwc_pad(x.data, padding, padding, padding, padding)
    cols = _im2col(xh, kh, kw, stride, ho, wo)
    wmat = _weight_matrix(weight.data)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = np.ascontiguousarray((gmat.T @ cols).reshape(f, kh, kw, wc).transpose(0, 3, 1, 2)) if needs_grad(weight) else None
        gb = gmat.sum(axis=0) if needs_grad(bias) else None
        gx = _conv_input_grad(g, weight.data, (h, w), stride, padding) if needs_grad(x) else None
        return gx, gw, gb

    return make_result(np.ascontiguousarray(out), (x, weight, bias), backward)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; spatial dims must be divisible by ``size``."""
    _check_rank(x, 4, "max_pool2d input")
    n, c, h, w = x.shape
    if h % size:
        raise DimensionError(f"max_pool2d: height axis (2) size {h} not divisible by {size}")
    if w % size:
        raise DimensionError(f"max_pool2d: width axis (3) size {w} not divisible by {size}")
    blocks = x.data.reshape(n, c, h // size, size, w // size, size)
    out = blocks.max(axis=(3, 5))
    # first maximum in each window takes the gradient
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // size, w // size, size * size)
    arg = flat.argmax(axis=-1)

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, c, h // size, w // size, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return make_result(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    _check_rank(x, 4, "global_avg_pool input")
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return make_result(x.data.mean(axis=(2, 3)), (x,), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    _check_rank(x, 4, "upsample input")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood of ``targets`` under softmax(logits).

    Returns the scalar loss tensor and the (N, C) probability array.
    """
    _check_rank(logits, 2, "softmax_cross_entropy logits")
    n, c = logits.shape
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: targets must have shape ({n},), got {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= c):
        raise IndexError(f"softmax_cross_entropy: target index out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    probs = np.exp(logp)
    loss = -logp[np.arange(n), t].mean()

    def backward(g):
        d = probs.copy()
        d[np.arange(n), t] -= 1.0
        return (d * (g / n),)

    return make_result(np.asarray(loss), (logits,), backward), probs


def mean_of(losses: Sequence[Tensor]) -> Tensor:
    """Arithmetic mean of scalar tensors."""
    k = len(losses)
    total = float(sum(l.data for l in losses)) / k
    return make_result(np.asarray(total), losses, lambda g: tuple(g / k for _ in range(k)))
