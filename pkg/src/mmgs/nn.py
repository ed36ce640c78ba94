"""Small learnable building blocks shared by the refinement networks:
linear/MLP stacks, the stride-1 conv encoder, frequency positional
encoding, and a bilinear feature sampler differentiable in both the
feature map and the sample positions."""

from __future__ import annotations

import numpy as np

from . import diffgrad as dg
from .diffgrad import Tensor, parameter


class Linear:
    def __init__(self, rng, in_dim, out_dim, name, zero_init=False):
        if zero_init:
            w = np.zeros((in_dim, out_dim), dtype=np.float32)
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / in_dim), (in_dim, out_dim)).astype(
                np.float32
            )
        self.weight = parameter(w, f"{name}.weight")
        self.bias = parameter(np.zeros(out_dim, dtype=np.float32), f"{name}.bias")

    def __call__(self, x):
        return dg.matmul(x, _cast(self.weight, x)) + _cast(self.bias, x).reshape(1, -1)

    def parameters(self):
        return [self.weight, self.bias]


class Mlp:
    """ReLU MLP. hidden_dims may be empty; the last layer is linear."""

    def __init__(self, rng, in_dim, hidden_dims, out_dim, name, zero_init_last=False):
        dims = [in_dim] + list(hidden_dims) + [out_dim]
        self.layers = []
        for i in range(len(dims) - 1):
            last = i == len(dims) - 2
            self.layers.append(
                Linear(rng, dims[i], dims[i + 1], f"{name}.fc{i}",
                       zero_init=zero_init_last and last)
            )

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = dg.relu(x)
        return x

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


def _cast(param, like):
    """Match a float32 parameter to the dtype of the activations (float64
    during gradient verification) without leaving the graph."""
    if param.data.dtype == like.data.dtype:
        return param
    out = Tensor._from_op(param.data.astype(like.data.dtype), (param,), None)
    if out.requires_grad:
        out._backward_fn = lambda g: (g.astype(param.data.dtype),)
    return out


def positional_encoding(x, octaves=4):
    """[x, sin(pi 2^o x), cos(pi 2^o x)] for o in 0..octaves-1."""
    parts = [x]
    for o in range(octaves):
        scaled = x * (np.pi * (2.0**o))
        parts.append(dg.sin(scaled))
        parts.append(dg.cos(scaled))
    return dg.concatenate(parts, axis=1)


def _im2col(padded, k):
    """(Hp,Wp,C) -> contiguous (Ho*Wo, K*K*C) patch matrix."""
    ho, wo = padded.shape[0] - k + 1, padded.shape[1] - k + 1
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))
    # (ho, wo, c, k, k) -> (ho, wo, k, k, c) flattened row-major
    return (
        np.ascontiguousarray(windows.transpose(0, 1, 3, 4, 2)).reshape(
            ho * wo, -1
        ),
        ho,
        wo,
    )


def conv2d(x, weight, bias, padding="same"):
    """2D convolution over an (H,W,Cin) Tensor with (K,K,Cin,Cout) weights.

    stride 1; "same" zero padding or "valid". Differentiable w.r.t. all
    operands. Internally a single im2col GEMM.
    """
    k = weight.shape[0]
    pad = k // 2 if padding == "same" else 0
    xd, wd = x.data, weight.data
    h, w_in, cin = xd.shape
    cout = wd.shape[3]
    if pad:
        padded = np.zeros((h + 2 * pad, w_in + 2 * pad, cin), dtype=xd.dtype)
        padded[pad:-pad, pad:-pad] = xd
    else:
        padded = xd
    cols, ho, wo = _im2col(padded, k)
    wmat = wd.reshape(k * k * cin, cout)
    out = (cols @ wmat + bias.data).reshape(ho, wo, cout)

    def _backward(g):
        g2 = np.ascontiguousarray(g).reshape(ho * wo, cout)
        gw = (cols.T @ g2).reshape(k, k, cin, cout)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wmat.T).reshape(ho, wo, k, k, cin)
        gx_pad = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                gx_pad[i : i + ho, j : j + wo, :] += gcols[:, :, i, j, :]
        gx = gx_pad[pad : pad + h, pad : pad + w_in] if pad else gx_pad
        return gx, gw.astype(wd.dtype), gb.astype(bias.data.dtype)

    return Tensor._from_op(out.astype(xd.dtype), (x, weight, bias), _backward)


class ConvEncoder:
    """Three stride-1 3x3 conv layers (in->16->32->out), ReLU after the
    first two, spatial resolution preserved."""

    def __init__(self, rng, in_channels=3, out_channels=32, name="encoder"):
        widths = [in_channels, 16, 32, out_channels]
        self.weights = []
        self.biases = []
        for i in range(3):
            fan_in = 9 * widths[i]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (3, 3, widths[i], widths[i + 1]))
            self.weights.append(parameter(w.astype(np.float32), f"{name}.conv{i}.weight"))
            self.biases.append(
                parameter(np.zeros(widths[i + 1], np.float32), f"{name}.conv{i}.bias")
            )
        self.out_channels = out_channels

    def __call__(self, image):
        x = image
        for i in range(3):
            x = conv2d(x, _cast(self.weights[i], x), _cast(self.biases[i], x))
            if i < 2:
                x = dg.relu(x)
        return x

    def parameters(self):
        return [*self.weights, *self.biases]


_window_factor_cache = {}


def _window_factors(kernel2d):
    key = kernel2d.tobytes()
    if key not in _window_factor_cache:
        _window_factor_cache[key] = np.linalg.svd(kernel2d)
    return _window_factor_cache[key]


def window_filter(x, kernel2d):
    """Depthwise valid-mode correlation of an (H,W,C) Tensor with a fixed
    (K,K) kernel (no channel mixing); used by SSIM. Separable kernels
    (rank one, like a Gaussian window) run as two 1-D passes."""
    xd = x.data
    k = kernel2d.shape[0]
    ho, wo = xd.shape[0] - k + 1, xd.shape[1] - k + 1
    u, s, vt = _window_factors(kernel2d)
    if s[1] < 1e-12 * s[0]:  # separable
        ky = (u[:, 0] * np.sqrt(s[0])).astype(xd.dtype)
        kx = (vt[0] * np.sqrt(s[0])).astype(xd.dtype)

        def _corr(arr):
            tmp = np.zeros((ho, arr.shape[1], arr.shape[2]), dtype=arr.dtype)
            for i in range(k):
                tmp += ky[i] * arr[i : i + ho]
            out = np.zeros((ho, wo, arr.shape[2]), dtype=arr.dtype)
            for j in range(k):
                out += kx[j] * tmp[:, j : j + wo]
            return out

        out = _corr(xd)

        def _backward(g):
            gx = np.zeros_like(xd)
            tmp = np.zeros((ho, xd.shape[1], xd.shape[2]), dtype=xd.dtype)
            for j in range(k):
                tmp[:, j : j + wo] += kx[j] * g
            for i in range(k):
                gx[i : i + ho] += ky[i] * tmp
            return (gx,)

        return Tensor._from_op(out, (x,), _backward)

    kern = kernel2d.astype(xd.dtype)
    out = np.zeros((ho, wo, xd.shape[2]), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            out += kern[i, j] * xd[i : i + ho, j : j + wo]

    def _backward(g):
        gx = np.zeros_like(xd)
        for i in range(k):
            for j in range(k):
                gx[i : i + ho, j : j + wo, :] += kern[i, j] * g
        return (gx,)

    return Tensor._from_op(out, (x,), _backward)


def reflect_pad(x, pad):
    """Reflect-pad the two leading spatial axes of an (H,W,C) Tensor."""
    h, w = x.shape[0], x.shape[1]
    if h <= pad or w <= pad:
        raise ValueError(f"image {h}x{w} too small for reflect pad {pad}")
    iy = np.concatenate([np.arange(pad, 0, -1), np.arange(h), h - 2 - np.arange(pad)])
    ix = np.concatenate([np.arange(pad, 0, -1), np.arange(w), w - 2 - np.arange(pad)])
    return x[iy][:, ix]


def bilinear_sample(feature_map, positions, valid=None):
    """Sample an (H,W,C) feature map at continuous pixel positions (G,2)
    given as (x, y). Out-of-bounds or invalid rows produce zeros. The
    result is differentiable w.r.t. the feature map and the positions."""
    fm, pos = feature_map.data, positions.data
    h, w, c = fm.shape
    g = pos.shape[0]
    x, y = pos[:, 0], pos[:, 1]
    ok = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    if valid is not None:
        ok = ok & np.asarray(valid, dtype=bool)
    xs = np.clip(x, 0, w - 1)
    ys = np.clip(y, 0, h - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    w00 = (1 - fx) * (1 - fy) * ok
    w10 = fx * (1 - fy) * ok
    w01 = (1 - fx) * fy * ok
    w11 = fx * fy * ok
    c00, c10 = fm[y0, x0], fm[y0, x1]
    c01, c11 = fm[y1, x0], fm[y1, x1]
    out = (
        w00[:, None] * c00 + w10[:, None] * c10
        + w01[:, None] * c01 + w11[:, None] * c11
    )

    def _backward(grad):
        lin = np.concatenate([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1])
        rows = np.concatenate(
            [grad * w00[:, None], grad * w10[:, None],
             grad * w01[:, None], grad * w11[:, None]]
        )
        gfm = np.empty((h * w, c), dtype=fm.dtype)
        for ch in range(c):  # bincount scatter: much faster than ufunc.at
            gfm[:, ch] = np.bincount(lin, weights=rows[:, ch], minlength=h * w)
        dx = ((c10 - c00) * (1 - fy)[:, None] + (c11 - c01) * fy[:, None]) * ok[:, None]
        dy = ((c01 - c00) * (1 - fx)[:, None] + (c11 - c10) * fx[:, None]) * ok[:, None]
        gpos = np.stack(
            [(grad * dx).sum(axis=1), (grad * dy).sum(axis=1)], axis=1
        )
        return gfm.reshape(h, w, c), gpos.astype(pos.dtype)

    return Tensor._from_op(out.astype(fm.dtype), (feature_map, positions), _backward)
