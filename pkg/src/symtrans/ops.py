"""3D convolutions (dense, grouped, depthwise, transposed) and linear layers.

Convolutions are computed by direct loops over kernel offsets, vectorized over
voxels with strided views, so the accumulation order is fixed and results are
deterministic. Volumes are channel-first (C, D, H, W); tokens are (N, dim).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add_rowvec, make_op, matmul, transpose2d


@dataclass
class Conv3dParams:
    """Weight (out_ch, in_ch/groups, k, k, k), bias (out_ch,), and geometry."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0
    groups: int = 1


@dataclass
class LinearParams:
    weight: Tensor  # (out_dim, in_dim)
    bias: Tensor  # (out_dim,)


def conv3d_output_extent(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def _validate_conv(x: Tensor, p: Conv3dParams):
    if x.ndim != 4:
        raise ValueError(f"conv3d expects (C, D, H, W), got {x.shape}")
    out_ch, in_per_group, k = p.weight.shape[0], p.weight.shape[1], p.weight.shape[2]
    cin = x.shape[0]
    if cin % p.groups or out_ch % p.groups:
        raise ValueError(
            f"conv3d: channels ({cin} in, {out_ch} out) not divisible by groups {p.groups}"
        )
    if in_per_group != cin // p.groups:
        raise ValueError(
            f"conv3d: weight in-channel extent {in_per_group} != {cin}//{p.groups}"
        )
    if p.bias.shape != (out_ch,):
        raise ValueError(f"conv3d: bias shape {p.bias.shape} != ({out_ch},)")
    spatial = x.shape[1:]
    for e in spatial:
        if e + 2 * p.padding < k:
            raise ValueError(
                f"conv3d: spatial extent {e} (+2*{p.padding} pad) below kernel {k}"
            )
    out_spatial = tuple(conv3d_output_extent(e, k, p.stride, p.padding) for e in spatial)
    if min(out_spatial) < 1:
        raise ValueError(f"conv3d: output extents {out_spatial} collapse below 1")
    return out_ch, k, out_spatial


def conv3d(x: Tensor, p: Conv3dParams) -> Tensor:
    """Grouped 3-D convolution; output group g sees only input group g."""
    out_ch, k, (do, ho, wo) = _validate_conv(x, p)
    cin = x.shape[0]
    st, pad, groups = p.stride, p.padding, p.groups
    cig = cin // groups
    cog = out_ch // groups
    w, b = p.weight.data, p.bias.data

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    depthwise = groups == cin and cig == 1 and cog == 1

    out = np.empty((out_ch, do, ho, wo), dtype=x.dtype)
    out[:] = b[:, None, None, None]
    for a in range(k):
        for bb in range(k):
            for c in range(k):
                view = xp[
                    :,
                    a : a + st * do : st,
                    bb : bb + st * ho : st,
                    c : c + st * wo : st,
                ]
                if depthwise:
                    out += w[:, 0, a, bb, c][:, None, None, None] * view
                elif groups == 1:
                    out += np.einsum("oi,idhw->odhw", w[:, :, a, bb, c], view)
                else:
                    for g in range(groups):
                        out[g * cog : (g + 1) * cog] += np.einsum(
                            "oi,idhw->odhw",
                            w[g * cog : (g + 1) * cog, :, a, bb, c],
                            view[g * cig : (g + 1) * cig],
                        )

    def rule(gy):
        dw = np.zeros_like(w)
        dxp = np.zeros_like(xp)
        db = gy.sum(axis=(1, 2, 3))
        for a in range(k):
            for bb in range(k):
                for c in range(k):
                    sl = (
                        slice(None),
                        slice(a, a + st * do, st),
                        slice(bb, bb + st * ho, st),
                        slice(c, c + st * wo, st),
                    )
                    view = xp[sl]
                    if depthwise:
                        dw[:, 0, a, bb, c] = (gy * view).sum(axis=(1, 2, 3))
                        dxp[sl] += w[:, 0, a, bb, c][:, None, None, None] * gy
                    elif groups == 1:
                        dw[:, :, a, bb, c] = np.einsum("odhw,idhw->oi", gy, view)
                        dxp[sl] += np.einsum("oi,odhw->idhw", w[:, :, a, bb, c], gy)
                    else:
                        for g in range(groups):
                            go = slice(g * cog, (g + 1) * cog)
                            gi = slice(g * cig, (g + 1) * cig)
                            dw[go, :, a, bb, c] = np.einsum(
                                "odhw,idhw->oi", gy[go], view[gi]
                            )
                            dxp[gi, sl[1], sl[2], sl[3]] += np.einsum(
                                "oi,odhw->idhw", w[go, :, a, bb, c], gy[go]
                            )
        if pad:
            dx = dxp[:, pad:-pad, pad:-pad, pad:-pad]
        else:
            dx = dxp
        return dx.copy(), dw, db

    return make_op((x, p.weight, p.bias), out, rule)


def depthwise_conv3d(x: Tensor, weight: Tensor, bias: Tensor, kernel: int,
                     stride: int = 1) -> Tensor:
    """Per-channel conv (groups == channels) with same-size padding at stride 1."""
    if kernel % 2 == 0:
        raise ValueError(f"depthwise kernel must be odd, got {kernel}")
    p = Conv3dParams(weight, bias, stride=stride, padding=kernel // 2,
                     groups=x.shape[0])
    return conv3d(x, p)


def grouped_conv3d(x: Tensor, weight: Tensor, bias: Tensor, groups: int,
                   kernel: int = 1, stride: int = 1) -> Tensor:
    p = Conv3dParams(weight, bias, stride=stride, padding=kernel // 2, groups=groups)
    return conv3d(x, p)


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Transposed conv with kernel 2, stride 2: exact 2x spatial upsampling.

    weight is (in_ch, out_ch, 2, 2, 2); every input voxel paints one 2x2x2
    output block, so blocks never overlap and the op is a pure linear remap.
    """
    if x.ndim != 4:
        raise ValueError(f"conv_transpose3d expects (C, D, H, W), got {x.shape}")
    cin, d, h, wd = x.shape
    if weight.shape[0] != cin or weight.shape[2:] != (2, 2, 2):
        raise ValueError(
            f"conv_transpose3d: weight {weight.shape} incompatible with input {x.shape}"
        )
    cout = weight.shape[1]
    w, b = weight.data, bias.data
    out = np.empty((cout, 2 * d, 2 * h, 2 * wd), dtype=x.dtype)
    out[:] = b[:, None, None, None]
    for a in range(2):
        for bb in range(2):
            for c in range(2):
                out[:, a::2, bb::2, c::2] += np.einsum(
                    "io,idhw->odhw", w[:, :, a, bb, c], x.data
                )

    def rule(gy):
        dw = np.zeros_like(w)
        dx = np.zeros_like(x.data)
        db = gy.sum(axis=(1, 2, 3))
        for a in range(2):
            for bb in range(2):
                for c in range(2):
                    gslice = gy[:, a::2, bb::2, c::2]
                    dw[:, :, a, bb, c] = np.einsum("odhw,idhw->io", gslice, x.data)
                    dx += np.einsum("io,odhw->idhw", w[:, :, a, bb, c], gslice)
        return dx, dw, db

    return make_op((x, weight, bias), out, rule)


def linear(x: Tensor, p: LinearParams) -> Tensor:
    """Per-token affine map: x @ W.T + b for x of shape (tokens, in_dim)."""
    if x.ndim != 2 or x.shape[1] != p.weight.shape[1]:
        raise ValueError(
            f"linear: input {x.shape} incompatible with weight {p.weight.shape}"
        )
    return add_rowvec(matmul(x, transpose2d(p.weight)), p.bias)


def conv3d_param_count(out_ch: int, in_ch: int, k: int, groups: int = 1) -> int:
    return out_ch * (in_ch // groups) * k ** 3 + out_ch


def linear_param_count(out_dim: int, in_dim: int) -> int:
    return out_dim * in_dim + out_dim
