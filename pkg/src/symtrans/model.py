"""The symmetric U-shaped registration network.

Two conv levels (full and half resolution) feed three transformer stages at
1/4, 1/8, 1/16 resolution in the encoder; the decoder mirrors them with patch
expanding, skip-connection fusion, and transformer stages, then two conv
decode levels bring features back to full resolution for the 3-channel flow
head. Ablation placements swap transformer stages for plain conv blocks (and
patch expanding for transposed convs) in either half, or stack every
transformer block at the 1/16 bottleneck.

Stage dims are C, 2C, 4C. Parameters live in a flat, insertion-ordered
name -> Tensor bag; the structured views used by the forward pass are bound
on top of it, which is also how checkpoints are read back.
"""

from __future__ import annotations

import dataclasses
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cemsa import (
    CemsaConfig,
    CemsaParams,
    bind_cemsa_params,
    cemsa_block,
    cemsa_param_shapes,
    init_array,
    tokens_to_volume,
    volume_to_tokens,
)
from .configio import ConfigError, from_dict, to_canonical_json
from .ops import Conv3dParams, LinearParams, conv3d, conv_transpose3d, linear
from .params import ParamBag
from .tensor import Tensor

PLACEMENTS = ("symmetric", "encoder_only", "decoder_only", "bottom_only")
MODES = ("displacement", "diffeomorphic")

CHECKPOINT_MAGIC = b"SYMT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    input_shape: tuple = (32, 32, 32)
    base_dim: int = 8
    encoder_depths: tuple = (2, 2, 2)
    decoder_depths: tuple = (2, 1, 1)
    stage_kernels: tuple = (24, 16, 12)
    stage_heads: tuple = (2, 4, 8)
    patch_kernel: int = 3
    ffn_expansion: int = 4
    placement: str = "symmetric"
    mode: str = "displacement"
    leaky_slope: float = 0.2
    kv_stride: int = 1

    def __post_init__(self):
        self.input_shape = tuple(int(e) for e in self.input_shape)
        self.encoder_depths = tuple(int(d) for d in self.encoder_depths)
        self.decoder_depths = tuple(int(d) for d in self.decoder_depths)
        self.stage_kernels = tuple(int(s) for s in self.stage_kernels)
        self.stage_heads = tuple(int(h) for h in self.stage_heads)
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must have 3 extents, got {self.input_shape}")
        for e in self.input_shape:
            if e % 16:
                raise ValueError(
                    f"input extents must be divisible by 16, got {self.input_shape}"
                )
        if self.base_dim % 4:
            raise ValueError(f"base_dim must be divisible by 4, got {self.base_dim}")
        if not (len(self.encoder_depths) == len(self.decoder_depths) == 3):
            raise ValueError("encoder_depths and decoder_depths must have 3 entries")
        if len(self.stage_kernels) != 3 or len(self.stage_heads) != 3:
            raise ValueError("stage_kernels and stage_heads must have 3 entries")
        for i, h in enumerate(self.stage_heads):
            if (self.base_dim * 2 ** i) % h:
                raise ValueError(
                    f"stage {i} dim {self.base_dim * 2 ** i} not divisible by "
                    f"heads {h}"
                )
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def stage_dims(self):
        return tuple(self.base_dim * 2 ** i for i in range(3))

    def stage_shapes(self):
        d, h, w = self.input_shape
        return tuple((d >> (2 + i), h >> (2 + i), w >> (2 + i)) for i in range(3))

    def half_shape(self):
        d, h, w = self.input_shape
        return (d // 2, h // 2, w // 2)

    def cemsa_config(self, stage: int) -> CemsaConfig:
        return CemsaConfig(
            dim=self.stage_dims[stage],
            heads=self.stage_heads[stage],
            dw_kernel=self.stage_kernels[stage],
            spatial_shape=self.stage_shapes()[stage],
            ffn_expansion=self.ffn_expansion,
            kv_stride=self.kv_stride,
        )


def make_ablation(cfg: ModelConfig, placement: str) -> ModelConfig:
    if placement not in PLACEMENTS:
        raise ValueError(f"unknown placement {placement!r}")
    return dataclasses.replace(cfg, placement=placement)


def transformer_depths(cfg: ModelConfig):
    """Effective CEMSA depth per (encoder, decoder) stage after placement."""
    enc = list(cfg.encoder_depths)
    dec = list(cfg.decoder_depths)
    total = sum(enc) + sum(dec)
    if cfg.placement == "symmetric":
        return tuple(enc), tuple(dec)
    if cfg.placement == "encoder_only":
        return tuple(enc), (0, 0, 0)
    if cfg.placement == "decoder_only":
        return (0, 0, 0), tuple(dec)
    return (0, 0, total), (0, 0, 0)  # bottom_only


def conv_depths(cfg: ModelConfig):
    """Conv block depth per stage: conv variants match the replaced depth."""
    enc_tf, dec_tf = transformer_depths(cfg)
    enc = [0 if tf else d for tf, d in zip(enc_tf, cfg.encoder_depths)]
    dec = [0 if tf else d for tf, d in zip(dec_tf, cfg.decoder_depths)]
    if cfg.placement == "bottom_only":
        enc[2] = 0  # absorbed into the bottom transformer stack
        dec[0] = 0
    return tuple(enc), tuple(dec)


def _decoder_uses_deconv(cfg: ModelConfig) -> bool:
    return cfg.placement in ("encoder_only", "bottom_only")


@dataclass
class ExpandParams:
    lin1: LinearParams  # C -> 2C
    lin2: LinearParams  # C/4 -> C/2


@dataclass
class DeconvParams:
    weight: Tensor  # (C_in, C_out, 2, 2, 2)
    bias: Tensor


@dataclass
class EncoderStage:
    embed: Conv3dParams
    blocks: list
    convs: list
    cemsa: CemsaConfig


@dataclass
class DecoderStage:
    fuse: Conv3dParams | None
    blocks: list
    convs: list
    expand: ExpandParams | DeconvParams
    cemsa: CemsaConfig


@dataclass
class SymTransParams:
    """Structured view over the flat parameter bag."""

    stem_conv0: Conv3dParams
    stem_down1: Conv3dParams
    stem_conv1: Conv3dParams
    enc: list
    dec: list
    fuse_half: Conv3dParams
    expand_half: ExpandParams | DeconvParams
    fuse_full: Conv3dParams
    flow: Conv3dParams


def model_param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    """Flat name -> (shape, init kind) map, in declaration order."""
    c = cfg.base_dim
    k = cfg.patch_kernel
    dims = cfg.stage_dims
    enc_tf, dec_tf = transformer_depths(cfg)
    enc_cv, dec_cv = conv_depths(cfg)
    deconv_dec = _decoder_uses_deconv(cfg)
    shapes: "OrderedDict[str, tuple]" = OrderedDict()

    def conv(name, cout, cin, kk, kind="conv"):
        shapes[f"{name}.weight"] = ((cout, cin, kk, kk, kk), kind)
        shapes[f"{name}.bias"] = ((cout,), "zeros")

    def expand(name, cin):
        if deconv_dec:
            shapes[f"{name}.deconv.weight"] = ((cin, cin // 2, 2, 2, 2), "conv")
            shapes[f"{name}.deconv.bias"] = ((cin // 2,), "zeros")
        else:
            # trunk upsamplers, not in-block projections: fan-in scaled so the
            # decoder path carries signal from the first iteration
            shapes[f"{name}.lin1.weight"] = ((2 * cin, cin), "conv")
            shapes[f"{name}.lin1.bias"] = ((2 * cin,), "zeros")
            shapes[f"{name}.lin2.weight"] = ((cin // 2, cin // 4), "conv")
            shapes[f"{name}.lin2.bias"] = ((cin // 2,), "zeros")

    def stage_blocks(prefix, stage, tf_depth, cv_depth):
        blk_cfg = cfg.cemsa_config(stage)
        for b in range(tf_depth):
            for rel, (shape, kind) in cemsa_param_shapes(blk_cfg).items():
                shapes[f"{prefix}.block{b}.{rel}"] = (shape, kind)
        for b in range(cv_depth):
            conv(f"{prefix}.conv{b}", dims[stage], dims[stage], 3)

    conv("stem.conv0", c // 2, 2, 3)
    conv("stem.down1", c, c // 2, 3)
    conv("stem.conv1", c, c, 3)

    embed_in = (c, dims[0], dims[1])
    for i in range(3):
        conv(f"enc{i + 1}.embed", dims[i], embed_in[i], k, kind="weight")
        stage_blocks(f"enc{i + 1}", i, enc_tf[i], enc_cv[i])

    # decoder transformer-level stages, bottom (1/16) upward
    stage_blocks("dec3", 2, dec_tf[0], dec_cv[0])
    expand("dec3.expand", dims[2])
    conv("dec2.fuse", dims[1], dims[2], 3)  # 2C + 2C concatenated
    stage_blocks("dec2", 1, dec_tf[1], dec_cv[1])
    expand("dec2.expand", dims[1])
    conv("dec1.fuse", dims[0], dims[1], 3)
    stage_blocks("dec1", 0, dec_tf[2], dec_cv[2])
    expand("dec1.expand", dims[0])

    conv("dec0.fuse", c, c // 2 + c, 3)  # half-res conv decode level
    expand("dec0.expand", c)
    conv("out.fuse", c // 2, c, 3)  # full-res conv decode level
    shapes["out.flow.weight"] = ((3, c // 2, 3, 3, 3), "flow")
    shapes["out.flow.bias"] = ((3,), "zeros")
    return shapes


def bind_model_params(cfg: ModelConfig, tensors) -> SymTransParams:
    c = cfg.base_dim
    enc_tf, dec_tf = transformer_depths(cfg)
    enc_cv, dec_cv = conv_depths(cfg)
    deconv_dec = _decoder_uses_deconv(cfg)

    def conv(name, stride, padding):
        return Conv3dParams(tensors[f"{name}.weight"], tensors[f"{name}.bias"],
                            stride=stride, padding=padding)

    def lin(name):
        return LinearParams(tensors[f"{name}.weight"], tensors[f"{name}.bias"])

    def expand(name):
        if deconv_dec:
            return DeconvParams(tensors[f"{name}.deconv.weight"],
                                tensors[f"{name}.deconv.bias"])
        return ExpandParams(lin1=lin(f"{name}.lin1"), lin2=lin(f"{name}.lin2"))

    def stage_blocks(prefix, stage, tf_depth, cv_depth):
        blk_cfg = cfg.cemsa_config(stage)
        blocks = [bind_cemsa_params(blk_cfg, f"{prefix}.block{b}", tensors)
                  for b in range(tf_depth)]
        convs = [conv(f"{prefix}.conv{b}", 1, 1) for b in range(cv_depth)]
        return blocks, convs, blk_cfg

    pk = cfg.patch_kernel
    enc = []
    for i in range(3):
        blocks, convs, blk_cfg = stage_blocks(f"enc{i + 1}", i, enc_tf[i], enc_cv[i])
        enc.append(EncoderStage(embed=conv(f"enc{i + 1}.embed", 2, pk // 2),
                                blocks=blocks, convs=convs, cemsa=blk_cfg))

    dec = []
    for j, (name, stage) in enumerate((("dec3", 2), ("dec2", 1), ("dec1", 0))):
        blocks, convs, blk_cfg = stage_blocks(name, stage, dec_tf[j], dec_cv[j])
        fuse = None if j == 0 else conv(f"{name}.fuse", 1, 1)
        dec.append(DecoderStage(fuse=fuse, blocks=blocks, convs=convs,
                                expand=expand(f"{name}.expand"), cemsa=blk_cfg))

    return SymTransParams(
        stem_conv0=conv("stem.conv0", 1, 1),
        stem_down1=conv("stem.down1", 2, 1),
        stem_conv1=conv("stem.conv1", 1, 1),
        enc=enc, dec=dec,
        fuse_half=conv("dec0.fuse", 1, 1),
        expand_half=expand("dec0.expand"),
        fuse_full=conv("out.fuse", 1, 1),
        flow=conv("out.flow", 1, 1),
    )


def init_model_params(cfg: ModelConfig, rng: np.random.Generator):
    """Fresh parameter bag + structured view.

    Linear/conv weights are truncated-normal (std 0.02), biases zero, layer
    norm gains one; the flow head starts near zero so the initial field is
    near-identity.
    """
    bag = ParamBag()
    for name, (shape, kind) in model_param_shapes(cfg).items():
        bag.add(name, init_array(shape, kind, rng))
    return bag, bind_model_params(cfg, bag.tensors)


def model_count_parameters(cfg: ModelConfig, by_module: bool = False):
    """Exact learnable-scalar total (optionally grouped by top-level module)."""
    shapes = model_param_shapes(cfg)
    if not by_module:
        return sum(int(np.prod(s)) for s, _ in shapes.values())
    groups: "OrderedDict[str, int]" = OrderedDict()
    for name, (shape, _) in shapes.items():
        top = name.split(".")[0]
        groups[top] = groups.get(top, 0) + int(np.prod(shape))
    return groups


def model_count_flops(cfg: ModelConfig, by_module: bool = False):
    """Forward-pass multiply-accumulate count, grouped by top-level module."""
    from .cemsa import count_flops as cemsa_flops

    c = cfg.base_dim
    k3 = cfg.patch_kernel ** 3
    dims = cfg.stage_dims
    full = cfg.input_shape
    half = cfg.half_shape()
    stages = cfg.stage_shapes()
    enc_tf, dec_tf = transformer_depths(cfg)
    enc_cv, dec_cv = conv_depths(cfg)
    deconv_dec = _decoder_uses_deconv(cfg)
    groups: "OrderedDict[str, int]" = OrderedDict()

    def vox(shape):
        return int(np.prod(shape))

    def add(name, macs):
        top = name.split(".")[0]
        groups[top] = groups.get(top, 0) + int(macs)

    def conv_macs(out_shape, cout, cin, kk3):
        return vox(out_shape) * cout * cin * kk3

    def stage_macs(prefix, stage, tf_depth, cv_depth):
        blk_cfg = cfg.cemsa_config(stage)
        for _ in range(tf_depth):
            add(prefix, cemsa_flops(blk_cfg))
        for _ in range(cv_depth):
            add(prefix, conv_macs(stages[stage], dims[stage], dims[stage], 27))

    def expand_macs(prefix, cin, in_shape):
        n = vox(in_shape)
        if deconv_dec:
            add(prefix, 8 * n * (cin // 2) * cin * 1)  # k=2 s=2: 8 output voxels each
        else:
            add(prefix, n * 2 * cin * cin + 8 * n * (cin // 2) * (cin // 4))

    add("stem", conv_macs(full, c // 2, 2, 27))
    add("stem", conv_macs(half, c, c // 2, 27))
    add("stem", conv_macs(half, c, c, 27))
    embed_in = (c, dims[0], dims[1])
    for i in range(3):
        add(f"enc{i + 1}", conv_macs(stages[i], dims[i], embed_in[i], k3))
        stage_macs(f"enc{i + 1}", i, enc_tf[i], enc_cv[i])
    stage_macs("dec3", 2, dec_tf[0], dec_cv[0])
    expand_macs("dec3", dims[2], stages[2])
    add("dec2", conv_macs(stages[1], dims[1], dims[2], 27))
    stage_macs("dec2", 1, dec_tf[1], dec_cv[1])
    expand_macs("dec2", dims[1], stages[1])
    add("dec1", conv_macs(stages[0], dims[0], dims[1], 27))
    stage_macs("dec1", 0, dec_tf[2], dec_cv[2])
    expand_macs("dec1", dims[0], stages[0])
    add("dec0", conv_macs(half, c, c // 2 + c, 27))
    expand_macs("dec0", c, half)
    add("out", conv_macs(full, c // 2, c, 27))
    add("out", conv_macs(full, 3, c // 2, 27))
    if by_module:
        return groups
    return sum(groups.values())


def patch_embed(vol: Tensor, p: Conv3dParams) -> Tensor:
    """Strided conv then flatten: overlapping patch tokens at half the extent."""
    for e in vol.shape[1:]:
        if e % 2:
            raise ValueError(f"patch_embed needs even extents, got {vol.shape[1:]}")
    return volume_to_tokens(conv3d(vol, p))


def patch_expand(x: Tensor, spatial_shape, p: ExpandParams) -> Tensor:
    """Token upsampling: 8x the tokens, half the channels.

    One linear doubles the channel dim, the 2C vector is dealt out as a
    2x2x2 spatial block (channel-major, block offsets in (d, h, w) order),
    and a second linear maps C/4 -> C/2.
    """
    n, c_in = x.shape
    if c_in % 4:
        raise ValueError(f"patch_expand needs channels divisible by 4, got {c_in}")
    d, h, w = spatial_shape
    if n != d * h * w:
        raise ValueError(f"patch_expand: {n} tokens vs spatial {spatial_shape}")
    y = linear(x, p.lin1)  # (N, 2C)
    c4 = c_in // 4
    y = T.reshape(y, (d, h, w, c4, 2, 2, 2))
    y = T.permute(y, (0, 4, 1, 5, 2, 6, 3))  # (d,2,h,2,w,2,c4)
    y = T.reshape(y, (8 * n, c4))
    return linear(y, p.lin2)  # (8N, C/2)


def _expand_volume(vol: Tensor, p, slope: float) -> Tensor:
    """Upsample a volume 2x: patch expanding, or a transposed conv in the
    conv-variant decoders (LeakyReLU applied in the deconv case only)."""
    if isinstance(p, DeconvParams):
        return T.leaky_relu(conv_transpose3d(vol, p.weight, p.bias), slope)
    c, d, h, w = vol.shape
    tokens = patch_expand(volume_to_tokens(vol), (d, h, w), p)
    return _tokens_to_volume_shape(tokens, (2 * d, 2 * h, 2 * w))


def fuse_skip(dec_tokens: Tensor, enc_tokens: Tensor, spatial_shape,
              p: Conv3dParams, slope: float = 0.2) -> Tensor:
    """Reshape both token maps to image form, concat channels, conv, LeakyReLU."""
    n = int(np.prod(spatial_shape))
    if dec_tokens.shape[0] != n or enc_tokens.shape[0] != n:
        raise ValueError(
            f"fuse_skip: token counts {dec_tokens.shape[0]}/{enc_tokens.shape[0]} "
            f"do not match spatial {tuple(spatial_shape)}"
        )
    dvol = _tokens_to_volume_shape(dec_tokens, spatial_shape)
    evol = _tokens_to_volume_shape(enc_tokens, spatial_shape)
    fused = T.leaky_relu(conv3d(T.concat([dvol, evol], axis=0), p), slope)
    return volume_to_tokens(fused)


def _tokens_to_volume_shape(x: Tensor, spatial_shape) -> Tensor:
    c = x.shape[1]
    return T.reshape(T.transpose2d(x), (c,) + tuple(spatial_shape))


def _fuse_volumes(dec_vol: Tensor, enc_vol: Tensor, p: Conv3dParams,
                  slope: float) -> Tensor:
    if dec_vol.shape[1:] != enc_vol.shape[1:]:
        raise ValueError(
            f"fuse: spatial mismatch {dec_vol.shape} vs {enc_vol.shape}"
        )
    return T.leaky_relu(conv3d(T.concat([dec_vol, enc_vol], axis=0), p), slope)


def _run_stage_blocks(vol: Tensor, stage, slope: float) -> Tensor:
    """Apply a stage's CEMSA blocks (token form) or conv blocks (volume form)."""
    if stage.blocks:
        tokens = volume_to_tokens(vol)
        for bp in stage.blocks:
            tokens = cemsa_block(tokens, stage.cemsa, bp)
        vol = _tokens_to_volume_shape(tokens, stage.cemsa.spatial_shape)
    for cp in stage.convs:
        vol = T.leaky_relu(conv3d(vol, cp), slope)
    return vol


def forward(moving: Tensor, fixed: Tensor, params: SymTransParams,
            cfg: ModelConfig) -> Tensor:
    """Predict the raw 3-channel field (displacement, or velocity in
    diffeomorphic mode) for a moving/fixed volume pair."""
    expected = (1,) + cfg.input_shape
    for name, v in (("moving", moving), ("fixed", fixed)):
        if v.shape != expected:
            raise ValueError(f"{name} volume shape {v.shape} != {expected}")
    slope = cfg.leaky_slope

    x = T.concat([moving, fixed], axis=0)
    skip_full = T.leaky_relu(conv3d(x, params.stem_conv0), slope)
    x = T.leaky_relu(conv3d(skip_full, params.stem_down1), slope)
    skip_half = T.leaky_relu(conv3d(x, params.stem_conv1), slope)

    skips = []
    vol = skip_half
    for i, stage in enumerate(params.enc):
        vol = conv3d(vol, stage.embed)
        if stage.convs:
            vol = T.leaky_relu(vol, slope)
        vol = _run_stage_blocks(vol, stage, slope)
        skips.append(vol)

    vol = skips[2]
    # 1/16 decoder stage sits right on the bottleneck (no fusion)
    vol = _run_stage_blocks(vol, params.dec[0], slope)
    vol = _expand_volume(vol, params.dec[0].expand, slope)

    for j, enc_skip in ((1, skips[1]), (2, skips[0])):
        stage = params.dec[j]
        vol = _fuse_volumes(vol, enc_skip, stage.fuse, slope)
        vol = _run_stage_blocks(vol, stage, slope)
        vol = _expand_volume(vol, stage.expand, slope)

    vol = _fuse_volumes(vol, skip_half, params.fuse_half, slope)
    vol = _expand_volume(vol, params.expand_half, slope)
    vol = _fuse_volumes(vol, skip_full, params.fuse_full, slope)
    return conv3d(vol, params.flow)


# --- checkpoint serialization -------------------------------------------------

def save_checkpoint(path, cfg: ModelConfig, bag: ParamBag):
    """Write magic, version, canonical-JSON config, then the parameter
    tensors in declaration order as (name, rank, extents, float32 LE data)."""
    blob = to_canonical_json(cfg).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, tns in bag.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", tns.ndim))
            f.write(struct.pack(f"<{tns.ndim}I", *tns.shape))
            f.write(np.ascontiguousarray(tns.data, dtype="<f4").tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path):
    """Read a checkpoint back into (config, bag, structured params)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", f.read(4))
        import json

        cfg = from_dict(ModelConfig, json.loads(f.read(blob_len).decode("utf-8")))
        bag = ParamBag()
        for name, (shape, _) in model_param_shapes(cfg).items():
            (name_len,) = struct.unpack("<I", f.read(4))
            stored = f.read(name_len).decode("utf-8")
            if stored != name:
                raise CheckpointError(
                    f"parameter order mismatch: expected {name!r}, found {stored!r}"
                )
            (rank,) = struct.unpack("<I", f.read(4))
            extents = struct.unpack(f"<{rank}I", f.read(4 * rank))
            if extents != tuple(shape):
                raise CheckpointError(
                    f"parameter {name!r} shape {extents} != expected {tuple(shape)}"
                )
            count = int(np.prod(shape))
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            bag.add(name, data.copy())
        trailing = f.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after final parameter")
    return cfg, bag, bind_model_params(cfg, bag.tensors)
