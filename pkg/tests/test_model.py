import numpy as np
import pytest

from symtrans import tensor as T
from symtrans.cemsa import volume_to_tokens
from symtrans.configio import ConfigError, from_dict
from symtrans.model import (
    CheckpointError,
    ExpandParams,
    ModelConfig,
    bind_model_params,
    conv_depths,
    forward,
    fuse_skip,
    init_model_params,
    load_checkpoint,
    make_ablation,
    model_count_flops,
    model_count_parameters,
    model_param_shapes,
    patch_embed,
    patch_expand,
    save_checkpoint,
    transformer_depths,
)
from symtrans.oracles import conv3d_reference
from symtrans.ops import Conv3dParams, LinearParams
from symtrans.params import ParamBag
from symtrans.tensor import Tensor


def tiny_cfg(**kw):
    base = dict(input_shape=(16, 16, 16), base_dim=8,
                encoder_depths=(1, 1, 1), decoder_depths=(1, 1, 1))
    base.update(kw)
    return ModelConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible by 16"):
        ModelConfig(input_shape=(20, 16, 16))
    with pytest.raises(ValueError, match="base_dim"):
        ModelConfig(base_dim=6)
    with pytest.raises(ValueError, match="heads"):
        ModelConfig(stage_heads=(3, 4, 8))
    with pytest.raises(ValueError, match="placement"):
        ModelConfig(placement="everywhere")
    with pytest.raises(ValueError, match="mode"):
        ModelConfig(mode="rigid")


def test_default_depths_total_ten():
    cfg = ModelConfig()
    assert sum(cfg.encoder_depths) + sum(cfg.decoder_depths) == 10


def test_stage_geometry():
    cfg = ModelConfig(input_shape=(32, 32, 32), base_dim=8)
    assert cfg.stage_dims == (8, 16, 32)
    assert cfg.stage_shapes() == ((8, 8, 8), (4, 4, 4), (2, 2, 2))
    assert cfg.half_shape() == (16, 16, 16)


def test_patch_embed_token_count():
    # 8^3 volume, stride-2 kernel-3 conv: N = (D/2)(H/2)(W/2) = 64 tokens
    rng = np.random.default_rng(0)
    vol = Tensor(rng.normal(size=(4, 8, 8, 8)).astype(np.float32))
    w = Tensor(rng.normal(size=(6, 4, 3, 3, 3)).astype(np.float32) * 0.1)
    b = Tensor(np.zeros(6, np.float32))
    tokens = patch_embed(vol, Conv3dParams(w, b, stride=2, padding=1))
    assert tokens.shape == (64, 6)


def test_patch_embed_values_vs_conv_oracle():
    rng = np.random.default_rng(1)
    vol = rng.normal(size=(2, 4, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    tokens = patch_embed(Tensor(vol, dtype=np.float64),
                         Conv3dParams(Tensor(w, dtype=np.float64),
                                      Tensor(b, dtype=np.float64),
                                      stride=2, padding=1))
    ref = conv3d_reference(vol, w, b, stride=2, padding=1)
    np.testing.assert_allclose(tokens.data, ref.reshape(3, 8).T, atol=1e-9)


def test_patch_embed_odd_extent_rejected():
    vol = Tensor(np.zeros((1, 5, 4, 4), np.float32))
    p = Conv3dParams(Tensor(np.zeros((1, 1, 3, 3, 3), np.float32)),
                     Tensor(np.zeros(1, np.float32)), stride=2, padding=1)
    with pytest.raises(ValueError, match="even"):
        patch_embed(vol, p)


def _identity_expand(c_in):
    # lin1 replicates channel 0 into every slot; lin2 sums its inputs
    w1 = np.zeros((2 * c_in, c_in), np.float32)
    w1[:, 0] = 1.0
    w2 = np.ones((c_in // 2, c_in // 4), np.float32)
    return ExpandParams(
        lin1=LinearParams(Tensor(w1), Tensor(np.zeros(2 * c_in, np.float32))),
        lin2=LinearParams(Tensor(w2), Tensor(np.zeros(c_in // 2, np.float32))),
    )


def test_patch_expand_shape_contract():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(8, 8)).astype(np.float32))
    bag = ParamBag()
    p = ExpandParams(
        lin1=LinearParams(bag.add("l1.w", rng.normal(size=(16, 8))),
                          bag.add("l1.b", np.zeros(16))),
        lin2=LinearParams(bag.add("l2.w", rng.normal(size=(4, 2))),
                          bag.add("l2.b", np.zeros(4))),
    )
    out = patch_expand(x, (2, 2, 2), p)
    assert out.shape == (64, 4)


def test_patch_expand_replicates_blocks_under_structured_maps():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(8, 4)).astype(np.float32)
    out = patch_expand(Tensor(x), (2, 2, 2), _identity_expand(4))
    # every coarse voxel's 2x2x2 block carries its channel-0 value
    vol = out.data.T.reshape(2, 4, 4, 4)
    coarse = x[:, 0].reshape(2, 2, 2)
    for d in range(2):
        for h in range(2):
            for w in range(2):
                block = vol[:, 2 * d : 2 * d + 2, 2 * h : 2 * h + 2,
                            2 * w : 2 * w + 2]
                np.testing.assert_allclose(block, coarse[d, h, w], atol=1e-6)


def test_patch_expand_channel_divisibility():
    x = Tensor(np.zeros((8, 6), np.float32))
    with pytest.raises(ValueError, match="divisible by 4"):
        patch_expand(x, (2, 2, 2), _identity_expand(4))


def test_patch_expand_gradcheck():
    rng = np.random.default_rng(4)
    leaves = {
        "x": rng.normal(size=(8, 4)),
        "w1": rng.normal(size=(8, 4)) * 0.4,
        "b1": rng.normal(size=8) * 0.1,
        "w2": rng.normal(size=(2, 1)) * 0.4,
        "b2": rng.normal(size=2) * 0.1,
    }

    def build(lv):
        p = ExpandParams(lin1=LinearParams(lv["w1"], lv["b1"]),
                         lin2=LinearParams(lv["w2"], lv["b2"]))
        out = patch_expand(lv["x"], (2, 2, 2), p)
        return T.mean_all(T.mul(out, out))

    rep = T.grad_check(build, leaves, wide=True, coords_per_leaf=6,
                       rng=np.random.default_rng(5))
    assert rep.max_err() < 1e-4, rep


def test_fuse_skip_concat_dims_and_composition():
    rng = np.random.default_rng(6)
    dec = rng.normal(size=(8, 3)).astype(np.float32)
    enc = rng.normal(size=(8, 5)).astype(np.float32)
    w = rng.normal(size=(4, 8, 3, 3, 3)).astype(np.float32) * 0.2
    b = rng.normal(size=4).astype(np.float32) * 0.1
    p = Conv3dParams(Tensor(w), Tensor(b), stride=1, padding=1)
    out = fuse_skip(Tensor(dec), Tensor(enc), (2, 2, 2), p, slope=0.2)
    assert out.shape == (8, 4)
    # manual composition oracle
    both = np.concatenate([dec.T.reshape(3, 2, 2, 2), enc.T.reshape(5, 2, 2, 2)])
    ref = conv3d_reference(both, w, b, stride=1, padding=1)
    ref = np.where(ref >= 0, ref, 0.2 * ref)
    np.testing.assert_allclose(out.data, ref.reshape(4, 8).T, atol=1e-5)


def test_fuse_skip_token_count_mismatch():
    p = Conv3dParams(Tensor(np.zeros((2, 4, 3, 3, 3), np.float32)),
                     Tensor(np.zeros(2, np.float32)), stride=1, padding=1)
    with pytest.raises(ValueError, match="token counts"):
        fuse_skip(Tensor(np.zeros((8, 2), np.float32)),
                  Tensor(np.zeros((7, 2), np.float32)), (2, 2, 2), p)


def test_zero_encoder_tokens_fuse_depends_on_decoder_only():
    rng = np.random.default_rng(7)
    dec = rng.normal(size=(8, 2)).astype(np.float32)
    w = np.zeros((2, 4, 3, 3, 3), np.float32)
    w[:, :2, 1, 1, 1] = np.eye(2)  # identity on the decoder half of channels
    p = Conv3dParams(Tensor(w), Tensor(np.zeros(2, np.float32)),
                     stride=1, padding=1)
    out = fuse_skip(Tensor(dec), Tensor(np.zeros((8, 2), np.float32)),
                    (2, 2, 2), p, slope=1.0)
    np.testing.assert_allclose(out.data, dec, atol=1e-6)


def test_forward_output_shape_32():
    cfg = ModelConfig(input_shape=(32, 32, 32), base_dim=8,
                      encoder_depths=(1, 1, 1), decoder_depths=(1, 1, 1))
    bag, params = init_model_params(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    m = Tensor(rng.normal(size=(1, 32, 32, 32)).astype(np.float32))
    f = Tensor(rng.normal(size=(1, 32, 32, 32)).astype(np.float32))
    out = forward(m, f, params, cfg)
    assert out.shape == (3, 32, 32, 32)


def test_forward_initial_field_near_identity():
    cfg = tiny_cfg()
    bag, params = init_model_params(cfg, np.random.default_rng(2))
    rng = np.random.default_rng(3)
    m = Tensor(rng.normal(size=(1, 16, 16, 16)).astype(np.float32))
    f = Tensor(rng.normal(size=(1, 16, 16, 16)).astype(np.float32))
    out = forward(m, f, params, cfg)
    assert np.max(np.abs(out.data)) < 0.01


def test_forward_shape_mismatch():
    cfg = tiny_cfg()
    bag, params = init_model_params(cfg, np.random.default_rng(4))
    with pytest.raises(ValueError, match="moving"):
        forward(Tensor(np.zeros((1, 32, 32, 32), np.float32)),
                Tensor(np.zeros((1, 16, 16, 16), np.float32)), params, cfg)


def test_forward_deterministic():
    cfg = tiny_cfg()
    bag, params = init_model_params(cfg, np.random.default_rng(5))
    rng = np.random.default_rng(6)
    m = Tensor(rng.normal(size=(1, 16, 16, 16)).astype(np.float32))
    f = Tensor(rng.normal(size=(1, 16, 16, 16)).astype(np.float32))
    a = forward(m, f, params, cfg).data
    b = forward(m, f, params, cfg).data
    np.testing.assert_array_equal(a, b)


def test_ablation_variants():
    base = tiny_cfg()
    assert make_ablation(base, "symmetric") == base
    bottom = make_ablation(base, "bottom_only")
    enc_tf, dec_tf = transformer_depths(bottom)
    assert enc_tf == (0, 0, 6) and dec_tf == (0, 0, 0)
    e = make_ablation(base, "encoder_only")
    enc_tf, dec_tf = transformer_depths(e)
    assert enc_tf == (1, 1, 1) and dec_tf == (0, 0, 0)
    assert conv_depths(e) == ((0, 0, 0), (1, 1, 1))
    d = make_ablation(base, "decoder_only")
    enc_tf, dec_tf = transformer_depths(d)
    assert enc_tf == (0, 0, 0) and dec_tf == (1, 1, 1)
    with pytest.raises(ValueError, match="placement"):
        make_ablation(base, "sideways")


def test_ablation_default_depths_bottom_stacks_ten():
    cfg = ModelConfig()
    enc_tf, dec_tf = transformer_depths(make_ablation(cfg, "bottom_only"))
    assert enc_tf[2] == 10
    assert sum(enc_tf) + sum(dec_tf) == 10


def test_all_placements_same_output_shape():
    rng = np.random.default_rng(7)
    m = Tensor(rng.normal(size=(1, 16, 16, 16)).astype(np.float32))
    f = Tensor(rng.normal(size=(1, 16, 16, 16)).astype(np.float32))
    shapes = set()
    for placement in ("symmetric", "encoder_only", "decoder_only", "bottom_only"):
        cfg = tiny_cfg(placement=placement)
        bag, params = init_model_params(cfg, np.random.default_rng(8))
        shapes.add(forward(m, f, params, cfg).shape)
    assert shapes == {(3, 16, 16, 16)}


def test_count_parameters_additive_and_matches_bag():
    cfg = tiny_cfg()
    bag, _ = init_model_params(cfg, np.random.default_rng(9))
    total = model_count_parameters(cfg)
    assert total == bag.total_size()
    by_module = model_count_parameters(cfg, by_module=True)
    assert sum(by_module.values()) == total


def test_count_parameters_monotone_in_base_dim():
    a = model_count_parameters(tiny_cfg(base_dim=8))
    b = model_count_parameters(tiny_cfg(base_dim=16))
    assert b > a


def test_count_flops_additive():
    cfg = tiny_cfg()
    by_module = model_count_flops(cfg, by_module=True)
    assert sum(by_module.values()) == model_count_flops(cfg)
    assert model_count_flops(cfg) > 0


def test_paper_scale_parameter_total_in_plausible_band():
    cfg = ModelConfig(input_shape=(96, 112, 96), base_dim=48)
    total = model_count_parameters(cfg)
    assert 5_000_000 < total < 50_000_000


def test_model_config_round_trip_strict():
    cfg = tiny_cfg(placement="bottom_only", mode="diffeomorphic")
    import dataclasses as dc
    d = dc.asdict(cfg)
    back = from_dict(ModelConfig, d)
    assert back == cfg
    d["typo_field"] = 1
    with pytest.raises(ConfigError, match="typo_field"):
        from_dict(ModelConfig, d)


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_cfg()
    bag, _ = init_model_params(cfg, np.random.default_rng(10))
    path = tmp_path / "model.symt"
    save_checkpoint(path, cfg, bag)
    cfg2, bag2, params2 = load_checkpoint(path)
    assert cfg2 == cfg
    for (n1, t1), (n2, t2) in zip(bag.items(), bag2.items()):
        assert n1 == n2
        np.testing.assert_array_equal(t1.data, t2.data)
    # byte-identical rewrite
    path2 = tmp_path / "model2.symt"
    save_checkpoint(path2, cfg2, bag2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.symt"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_skip_shapes_assert_at_construction():
    # decoder/encoder skip joins must agree spatially for every valid config
    for shape in ((16, 16, 16), (16, 32, 16)):
        cfg = ModelConfig(input_shape=shape, base_dim=8,
                          encoder_depths=(1, 1, 1), decoder_depths=(1, 1, 1))
        sh = cfg.stage_shapes()
        assert sh[0] == tuple(e // 4 for e in shape)
        assert sh[2] == tuple(e // 16 for e in shape)
