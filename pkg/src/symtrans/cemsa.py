"""Convolution-based efficient multi-head self-attention (CEMSA).

A CEMSA transformer block replaces the learned Q/K/V linear projections of a
standard attention block with convolutional ones: a single depthwise conv over
the token volume produces Q directly (no linear afterwards, which is what
carries positional information in place of a positional embedding), and the
same depthwise output feeds a grouped 1x1x1 conv, a layer norm, and two linear
maps to produce K and V. Attention itself is the usual per-head
softmax(Q K^T / sqrt(d_k)) V followed by an output projection, and the block
wraps attention and a 4x-expansion feed-forward in a pre-norm residual pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .ops import Conv3dParams, LinearParams, conv3d, depthwise_conv3d, linear
from .params import ParamBag, truncated_normal
from .tensor import Tensor


def clamp_kernel(s: int, spatial_shape) -> int:
    """Largest odd kernel extent <= min(s, smallest spatial extent), >= 1.

    Configured kernel sizes can equal or exceed small feature maps (and may be
    even); odd size keeps stride-1 same-padding exact.
    """
    s_eff = min(int(s), min(int(e) for e in spatial_shape))
    if s_eff % 2 == 0:
        s_eff -= 1
    return max(s_eff, 1)


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class CemsaConfig:
    dim: int
    heads: int
    dw_kernel: int
    spatial_shape: tuple
    groups: int = 0  # 0 means groups == dim
    ffn_expansion: int = 4
    kv_stride: int = 1

    def __post_init__(self):
        self.spatial_shape = tuple(int(e) for e in self.spatial_shape)
        if self.groups == 0:
            self.groups = self.dim
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % self.groups:
            raise ValueError(f"dim {self.dim} not divisible by groups {self.groups}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def tokens(self) -> int:
        d, h, w = self.spatial_shape
        return d * h * w

    @property
    def kernel(self) -> int:
        return clamp_kernel(self.dw_kernel, self.spatial_shape)


@dataclass
class CemsaParams:
    dw: Conv3dParams        # shared depthwise trunk, kernel s
    g_kv: Conv3dParams      # grouped 1x1x1 reduction on the K/V path
    ln_kv: LayerNormParams
    proj_k: LinearParams
    proj_v: LinearParams
    proj_out: LinearParams
    ln1: LayerNormParams
    ln2: LayerNormParams
    ffn1: LinearParams
    ffn2: LinearParams


def cemsa_param_shapes(cfg: CemsaConfig) -> dict:
    """Relative name -> (shape, init kind) for one block's parameters."""
    d, s, g, e = cfg.dim, cfg.kernel, cfg.groups, cfg.ffn_expansion
    shapes = {"dw.weight": ((d, 1, s, s, s), "weight"),
              "dw.bias": ((d,), "zeros"),
              "g_kv.weight": ((d, d // g, 1, 1, 1), "weight"),
              "g_kv.bias": ((d,), "zeros")}
    for ln_name in ("ln_kv", "ln1", "ln2"):
        shapes[f"{ln_name}.gamma"] = ((d,), "ones")
        shapes[f"{ln_name}.beta"] = ((d,), "zeros")
    for lin_name, out_dim, in_dim in (("proj_k", d, d), ("proj_v", d, d),
                                      ("proj_out", d, d), ("ffn1", e * d, d),
                                      ("ffn2", d, e * d)):
        shapes[f"{lin_name}.weight"] = ((out_dim, in_dim), "weight")
        shapes[f"{lin_name}.bias"] = ((out_dim,), "zeros")
    return shapes


def init_array(shape, kind, rng: np.random.Generator) -> np.ndarray:
    if kind == "weight":  # transformer linears and embeddings
        return truncated_normal(rng, shape)
    if kind == "conv":  # plain conv blocks: fan-in scaled for LeakyReLU stacks
        fan_in = int(np.prod(shape[1:]))
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "flow":  # near-identity start for the final field head
        return rng.normal(0.0, 1e-5, size=shape)
    raise ValueError(f"unknown init kind {kind!r}")


def bind_cemsa_params(cfg: CemsaConfig, prefix: str, tensors) -> CemsaParams:
    """Assemble the structured view over a name -> Tensor mapping."""

    def t(name):
        return tensors[f"{prefix}.{name}"]

    def ln(name):
        return LayerNormParams(gamma=t(f"{name}.gamma"), beta=t(f"{name}.beta"))

    def lin(name):
        return LinearParams(weight=t(f"{name}.weight"), bias=t(f"{name}.bias"))

    return CemsaParams(
        dw=Conv3dParams(t("dw.weight"), t("dw.bias"), stride=1,
                        padding=cfg.kernel // 2, groups=cfg.dim),
        g_kv=Conv3dParams(t("g_kv.weight"), t("g_kv.bias"),
                          stride=cfg.kv_stride, padding=0, groups=cfg.groups),
        ln_kv=ln("ln_kv"), proj_k=lin("proj_k"), proj_v=lin("proj_v"),
        proj_out=lin("proj_out"), ln1=ln("ln1"), ln2=ln("ln2"),
        ffn1=lin("ffn1"), ffn2=lin("ffn2"),
    )


def init_cemsa_params(cfg: CemsaConfig, bag: ParamBag, prefix: str,
                      rng: np.random.Generator) -> CemsaParams:
    for name, (shape, kind) in cemsa_param_shapes(cfg).items():
        bag.add(f"{prefix}.{name}", init_array(shape, kind, rng))
    return bind_cemsa_params(cfg, prefix, bag.tensors)


def tokens_to_volume(x: Tensor, cfg: CemsaConfig) -> Tensor:
    n, d = x.shape
    if n != cfg.tokens:
        raise ValueError(
            f"token count {n} does not match spatial shape {cfg.spatial_shape}"
        )
    return T.reshape(T.transpose2d(x), (d,) + cfg.spatial_shape)


def volume_to_tokens(vol: Tensor) -> Tensor:
    c = vol.shape[0]
    n = int(np.prod(vol.shape[1:]))
    return T.transpose2d(T.reshape(vol, (c, n)))


def cemsa_qkv(x: Tensor, cfg: CemsaConfig, p: CemsaParams):
    """Convolutional Q/K/V projection of a token sequence.

    Q is the flattened depthwise conv output, used raw. K and V come from the
    same depthwise trunk through the grouped conv, layer norm, and one linear
    projection each.
    """
    vol = tokens_to_volume(x, cfg)
    trunk = depthwise_conv3d(vol, p.dw.weight, p.dw.bias, kernel=cfg.kernel)
    q = volume_to_tokens(trunk)
    kv = volume_to_tokens(conv3d(trunk, p.g_kv))
    kv = T.layer_norm(kv, p.ln_kv.gamma, p.ln_kv.beta)
    return q, linear(kv, p.proj_k), linear(kv, p.proj_v)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         proj_out: LinearParams | None = None) -> Tensor:
    n, dm = q.shape
    if dm % heads:
        raise ValueError(f"dim {dm} not divisible by heads {heads}")
    dk = dm // heads
    scale = 1.0 / np.sqrt(dk)
    outputs = []
    for h in range(heads):
        qh = T.narrow(q, 1, h * dk, dk)
        kh = T.narrow(k, 1, h * dk, dk)
        vh = T.narrow(v, 1, h * dk, dk)
        scores = T.scalar_mul(T.matmul(qh, T.transpose2d(kh)), scale)
        outputs.append(T.matmul(T.softmax_lastdim(scores), vh))
    merged = outputs[0] if heads == 1 else T.concat(outputs, axis=1)
    return merged if proj_out is None else linear(merged, proj_out)


def cemsa_block(x: Tensor, cfg: CemsaConfig, p: CemsaParams) -> Tensor:
    """Pre-norm residual transformer block with CEMSA attention.

    No positional embedding anywhere: the depthwise projection carries the
    positional information.
    """
    q, k, v = cemsa_qkv(T.layer_norm(x, p.ln1.gamma, p.ln1.beta), cfg, p)
    y = T.add(x, multi_head_attention(q, k, v, cfg.heads, p.proj_out))
    h = T.layer_norm(y, p.ln2.gamma, p.ln2.beta)
    h = linear(T.gelu(linear(h, p.ffn1)), p.ffn2)
    return T.add(y, h)


def count_parameters(cfg: CemsaConfig, breakdown: bool = False):
    """Exact learnable-scalar count of one CEMSA block (layer norms included)."""
    d, s, g, e = cfg.dim, cfg.kernel, cfg.groups, cfg.ffn_expansion
    parts = {
        "dw": d * s ** 3 + d,
        "gconv_weight": d * (d // g),
        "gconv_bias": d,
        "ln": 6 * d,  # ln_kv + ln1 + ln2
        "proj_k": d * d + d,
        "proj_v": d * d + d,
        "proj_out": d * d + d,
        "ffn": (e * d * d + e * d) + (d * e * d + d),
    }
    total = sum(parts.values())
    return (total, parts) if breakdown else total


def count_flops(cfg: CemsaConfig, breakdown: bool = False):
    """Multiply-accumulate count of one CEMSA block forward pass."""
    d, s, g, e = cfg.dim, cfg.kernel, cfg.groups, cfg.ffn_expansion
    n = cfg.tokens
    m = n // cfg.kv_stride ** 3 if cfg.kv_stride > 1 else n
    parts = {
        "dw": n * d * s ** 3,
        "gconv": m * d * (d // g),
        "proj_kv": 2 * m * d * d,
        "attention": 2 * n * m * d,
        "proj_out": n * d * d,
        "ffn": 2 * n * d * e * d,
    }
    total = sum(parts.values())
    return (total, parts) if breakdown else total


def msa_count_parameters(dim: int, ffn_expansion: int = 4,
                         breakdown: bool = False):
    """Companion count for a standard MSA block at the same embedding dim.

    Three dim x dim input projections, one output projection, and the
    feed-forward pair; layer norms are tallied separately.
    """
    d, e = dim, ffn_expansion
    parts = {
        "qkv": 3 * (d * d + d),
        "proj_out": d * d + d,
        "ffn": (e * d * d + e * d) + (d * e * d + d),
        "ln": 4 * d,
    }
    total = sum(parts.values())
    return (total, parts) if breakdown else total


def msa_count_flops(tokens: int, dim: int, ffn_expansion: int = 4) -> int:
    n, d, e = tokens, dim, ffn_expansion
    return 3 * n * d * d + n * d * d + 2 * n * n * d + 2 * n * d * e * d
