#!/usr/bin/env python3
"""Anatomy of the CEMSA transformer block and its parameter economics.

CEMSA swaps the learned Q/K/V linear projections of standard attention for
convolutional ones: one shared depthwise conv over the token volume gives Q
directly (its spatial structure is what replaces the positional embedding),
and the same trunk feeds a grouped 1x1x1 conv + layer norm + two linears for
K and V.
"""

import numpy as np

from symtrans.cemsa import (
    CemsaConfig,
    cemsa_block,
    cemsa_qkv,
    count_flops,
    count_parameters,
    init_cemsa_params,
    msa_count_parameters,
)
from symtrans.params import ParamBag
from symtrans.tensor import Tensor

# a stage working on a 6x6x6 token volume with 16 channels, 4 heads
cfg = CemsaConfig(dim=16, heads=4, dw_kernel=5, spatial_shape=(6, 6, 6))
bag = ParamBag()
params = init_cemsa_params(cfg, bag, "demo", np.random.default_rng(0))

x = Tensor(np.random.default_rng(1).normal(size=(216, 16)).astype(np.float32))
q, k, v = cemsa_qkv(x, cfg, params)
print(f"tokens {x.shape} -> Q {q.shape}, K {k.shape}, V {v.shape}")

out = cemsa_block(x, cfg, params)
print(f"block output {out.shape} (token count preserved)")

# With every learned weight zeroed the block is the identity: both the
# attention branch and the FFN die, leaving the two residual connections.
for _, t in bag.items():
    t.data[:] = 0.0
identity = cemsa_block(x, cfg, params)
print("zero-weight block is identity:", np.array_equal(identity.data, x.data))

# Parameter economics: the depthwise kernel costs dim * s^3 instead of the
# dim^2 of a learned Q projection, and the grouped conv shrinks its weight
# by exactly 1/groups.
print(f"\n{'dim':>5} {'s_eff':>6} {'CEMSA':>9} {'MSA':>9} {'saving':>8}")
for dim, heads, s, shape in ((48, 2, 24, (4, 4, 4)), (96, 4, 16, (2, 2, 2)),
                             (192, 8, 12, (1, 1, 1))):
    c = CemsaConfig(dim=dim, heads=heads, dw_kernel=s, spatial_shape=shape)
    cemsa = count_parameters(c)
    msa = msa_count_parameters(dim)
    print(f"{dim:>5} {c.kernel:>6} {cemsa:>9} {msa:>9} {1 - cemsa / msa:>7.1%}")

_, parts = count_parameters(CemsaConfig(dim=64, heads=4, dw_kernel=3,
                                        spatial_shape=(4, 4, 4)), breakdown=True)
print("\nper-term parameter breakdown at dim 64:", parts)

total, fparts = count_flops(CemsaConfig(dim=64, heads=4, dw_kernel=3,
                                        spatial_shape=(8, 8, 8)), breakdown=True)
print(f"forward MACs at dim 64 on an 8^3 stage: {total:,} {fparts}")
