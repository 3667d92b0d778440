"""Neural building blocks: conv2d, max pooling, dense layers, activations,
and the non-local attention block.

Convolution is lowered to im2col followed by a single matrix multiply, which
keeps it fast at 48x48 and easy to gradient-check. All layers register fused
backward rules through :func:`facemtl.tensor.from_op`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    accumulate,
    from_op,
    matmul,
    relu,
    reshape,
    sigmoid,
    softmax,
    transpose,
)

__all__ = [
    "Conv2dParams",
    "DenseParams",
    "NonLocalParams",
    "conv2d",
    "maxpool2d",
    "dense",
    "activation",
    "non_local",
]


@dataclass
class Conv2dParams:
    weights: Tensor  # (out_ch, in_ch, kh, kw)
    bias: Tensor     # (out_ch,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        oc, ic, kh, kw = self.weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv kernel extents must be odd, got {kh}x{kw}")
        if oc < 1 or self.bias.shape != (oc,):
            raise ShapeError(f"conv bias shape {self.bias.shape} does not match out_ch {oc}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("conv stride must be >= 1 and padding >= 0")


@dataclass
class DenseParams:
    weights: Tensor  # (out_dim, in_dim)
    bias: Tensor     # (out_dim,)

    def __post_init__(self):
        out_dim, in_dim = self.weights.shape
        if out_dim < 1 or in_dim < 1 or self.bias.shape != (out_dim,):
            raise ShapeError(f"dense shapes inconsistent: W {self.weights.shape}, b {self.bias.shape}")


@dataclass
class NonLocalParams:
    """Embedded-Gaussian attention over all spatial positions.

    theta/phi embed the query/key pairwise function, g is the unary value
    map, and w_z projects back to the input channel count for the residual
    connection. Softmax over positions provides the normalization. w_z is
    zero-initialized so a fresh block is the identity.
    """

    theta: Tensor  # (embed_ch, in_ch)
    phi: Tensor    # (embed_ch, in_ch)
    g: Tensor      # (embed_ch, in_ch)
    w_z: Tensor    # (in_ch, embed_ch)

    def __post_init__(self):
        embed_ch, in_ch = self.theta.shape
        if in_ch % 2 != 0 or embed_ch != in_ch // 2:
            raise ShapeError(f"non-local embed_ch must be in_ch/2, got {embed_ch} for in_ch {in_ch}")
        for name, t, want in (
            ("phi", self.phi, (embed_ch, in_ch)),
            ("g", self.g, (embed_ch, in_ch)),
            ("w_z", self.w_z, (in_ch, embed_ch)),
        ):
            if t.shape != want:
                raise ShapeError(f"non-local {name} shape {t.shape}, expected {want}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # xp: padded (N, C, Hp, Wp) -> (N, C*kh*kw, oh*ow), contiguous copy.
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, oh, ow, kh, kw),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    return np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, oh * ow)


def _col2im(dcols: np.ndarray, xshape, kh, kw, stride, pad, oh, ow) -> np.ndarray:
    n, c, h, w = xshape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += d6[:, :, i, j]
    if pad == 0:
        return dxp
    return dxp[:, :, pad : pad + h, pad : pad + w]


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """2-d convolution on NCHW input; output H' = (H + 2*pad - kh)/stride + 1."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = p.weights.shape
    if c != ic:
        raise ShapeError(f"conv2d: input has {c} channels but weights expect {ic}")
    num_h = h + 2 * p.padding - kh
    num_w = w + 2 * p.padding - kw
    if num_h < 0 or num_w < 0 or num_h % p.stride or num_w % p.stride:
        raise ShapeError(
            f"conv2d: non-integer output extent for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {p.stride}, padding {p.padding}"
        )
    oh, ow = num_h // p.stride + 1, num_w // p.stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (p.padding, p.padding), (p.padding, p.padding)))
    cols = _im2col(xp, kh, kw, p.stride, oh, ow)          # (N, K, P)
    w2 = p.weights.data.reshape(oc, ic * kh * kw)         # (OC, K)
    out = (w2 @ cols).reshape(n, oc, oh, ow) + p.bias.data.reshape(1, oc, 1, 1)

    def _bw(g):
        gflat = g.reshape(n, oc, oh * ow)
        accumulate(p.bias, g.sum(axis=(0, 2, 3)))
        accumulate(
            p.weights,
            np.einsum("nop,nkp->ok", gflat, cols, optimize=True).reshape(p.weights.shape),
        )
        if x.requires_grad:
            dcols = np.swapaxes(w2, 0, 1) @ gflat          # (N, K, P)
            accumulate(x, _col2im(dcols, x.shape, kh, kw, p.stride, p.padding, oh, ow))

    return from_op(out, (x, p.weights, p.bias), _bw)


def maxpool2d(x: Tensor, k: int) -> Tensor:
    """k x k max pooling; gradient flows to the argmax cell of each window
    (first occurrence on ties)."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool2d: extents {h}x{w} not divisible by {k}")
    oh, ow = h // k, w // k
    windows = x.data.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def _bw(g):
        dwin = np.zeros_like(windows)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        accumulate(x, dx)

    return from_op(np.ascontiguousarray(out), (x,), _bw)


def dense(x: Tensor, p: DenseParams) -> Tensor:
    """Affine map y = W x + b applied over the last axis of x."""
    out_dim, in_dim = p.weights.shape
    if x.shape[-1] != in_dim:
        raise ShapeError(f"dense: input last extent {x.shape[-1]} != in_dim {in_dim}")
    if x.ndim == 1:
        return reshape(dense(reshape(x, 1, in_dim), p), out_dim)
    return matmul(x, transpose(p.weights)) + p.bias


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "softmax": softmax}


def activation(x: Tensor, kind: str) -> Tensor:
    if kind not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return _ACTIVATIONS[kind](x)


def non_local(x: Tensor, p: NonLocalParams) -> Tensor:
    """Attention response at each position as a softmax-weighted sum of the
    value embedding over all positions, added back residually.

    For flattened positions i, j: attn(i, j) = softmax_j(theta(x_i) . phi(x_j)),
    y_i = sum_j attn(i, j) * g(x_j), output = x + w_z y.
    """
    if x.ndim != 4:
        raise ShapeError(f"non_local expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != p.theta.shape[1]:
        raise ShapeError(f"non_local: input has {c} channels but params expect {p.theta.shape[1]}")

    xf = reshape(x, n, c, h * w)                     # (N, C, P)
    tx = matmul(p.theta, xf)                         # (N, E, P)
    px = matmul(p.phi, xf)                           # (N, E, P)
    gx = matmul(p.g, xf)                             # (N, E, P)
    scores = matmul(transpose(tx, 0, 2, 1), px)      # (N, P, P); row i = queries at i
    attn = softmax(scores, axis=-1)                  # rows sum to 1
    y = matmul(attn, transpose(gx, 0, 2, 1))         # (N, P, E)
    z = matmul(p.w_z, transpose(y, 0, 2, 1))         # (N, C, P)
    return x + reshape(z, n, c, h, w)
