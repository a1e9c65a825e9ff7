import numpy as np
import pytest

from symtrans.deformation import jacobian_determinant
from symtrans.losses import LossConfig, dice, warp_labels
from symtrans.model import ModelConfig
from symtrans.oracles import adam_reference
from symtrans.tensor import Tensor
from symtrans.training import (
    AdamState,
    SyntheticSpec,
    TrainConfig,
    adam_step,
    clip_gradients,
    generate_pair,
    init_adam,
    load_opt_state,
    pair_rng,
    register,
    save_opt_state,
    train,
)


def tiny_train_cfg(**kw):
    model = ModelConfig(input_shape=(16, 16, 16), base_dim=8,
                        encoder_depths=(1, 1, 1), decoder_depths=(1, 1, 1))
    data = SyntheticSpec(extents=(16, 16, 16), radius_range=(2.5, 4.0),
                         warp_amplitude=1.5, warp_sigma=2.5)
    base = dict(model=model, data=data, iterations=3, seed=7,
                checkpoint_every=100)
    base.update(kw)
    return TrainConfig(**base)


def params_dict(values):
    return {k: Tensor(np.asarray(v), requires_grad=True) for k, v in values.items()}


def set_grads(params, grads):
    for k, g in grads.items():
        params[k].grad = np.asarray(g, dtype=params[k].dtype)


def test_adam_zero_grad_keeps_params():
    params = params_dict({"w": np.array([1.0, -2.0], np.float32)})
    state = init_adam(params)
    set_grads(params, {"w": np.zeros(2)})
    state = adam_step(params, state, tiny_train_cfg())
    assert state.t == 1
    np.testing.assert_array_equal(params["w"].data, [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    cfg = tiny_train_cfg(lr=1e-2)
    params = params_dict({"w": np.array([0.0, 0.0], np.float32)})
    state = init_adam(params)
    set_grads(params, {"w": np.array([0.3, -5.0])})
    adam_step(params, state, cfg)
    np.testing.assert_allclose(params["w"].data, [-1e-2, 1e-2], rtol=1e-4)


def test_adam_matches_wide_precision_oracle():
    cfg = tiny_train_cfg(lr=0.05)
    x0 = np.array([1.0, 1.0])
    params = {"x": Tensor(x0, requires_grad=True, dtype=np.float64)}
    state = init_adam(params)
    for _ in range(10):
        params["x"].grad = 2.0 * params["x"].data
        adam_step(params, state, cfg)
    traj = adam_reference(x0, lambda x: 2.0 * x, lr=0.05, steps=10)
    np.testing.assert_allclose(params["x"].data, traj[-1], atol=1e-10)


def test_adam_update_sign_invariant_to_loss_scale():
    cfg = tiny_train_cfg(lr=1e-3)
    g = np.array([0.2, -0.7, 1.4])
    updates = []
    for scale in (1.0, 25.0):
        params = params_dict({"w": np.zeros(3, np.float32)})
        state = init_adam(params)
        set_grads(params, {"w": scale * g})
        adam_step(params, state, cfg)
        updates.append(params["w"].data.copy())
    np.testing.assert_array_equal(np.sign(updates[0]), np.sign(updates[1]))


def test_adam_missing_grad_raises():
    params = params_dict({"w": np.zeros(2, np.float32)})
    state = init_adam(params)
    with pytest.raises(ValueError, match="missing gradient"):
        adam_step(params, state, tiny_train_cfg())


def test_clip_gradients():
    params = params_dict({"w": np.zeros(3, np.float32)})
    params["w"].grad = np.array([3.0, 0.0, 4.0], np.float32)
    norm = clip_gradients(params, max_norm=1.0)
    assert abs(norm - 5.0) < 1e-6
    np.testing.assert_allclose(np.linalg.norm(params["w"].grad), 1.0, rtol=1e-5)


def test_generate_pair_zero_amplitude():
    spec = SyntheticSpec(extents=(16, 16, 16), warp_amplitude=0.0,
                         radius_range=(2.5, 4.0))
    moving, fixed, lm, lf, u = generate_pair(spec, np.random.default_rng(0))
    np.testing.assert_array_equal(u, 0.0)
    np.testing.assert_allclose(moving, fixed, atol=1e-6)
    np.testing.assert_array_equal(lm, lf)


def test_generate_pair_fold_free_and_labels_warped():
    spec = SyntheticSpec(extents=(16, 16, 16), radius_range=(2.5, 4.0),
                         warp_amplitude=2.0, warp_sigma=2.5)
    for seed in range(5):
        moving, fixed, lm, lf, u = generate_pair(spec, np.random.default_rng(seed))
        _, stats = jacobian_determinant(u)
        assert stats.count == 0
        assert moving.shape == (1, 16, 16, 16) and lm.shape == (16, 16, 16)
        np.testing.assert_array_equal(lf, warp_labels(lm, u))
        # the true field recovers the fixed labels exactly; raw overlap is worse
        _, pre = dice(lm, lf)
        _, post = dice(warp_labels(lm, u), lf)
        assert post == 1.0
        assert pre < post


def test_generate_pair_deterministic_stream():
    spec = SyntheticSpec(extents=(16, 16, 16), radius_range=(2.5, 4.0))
    a = generate_pair(spec, pair_rng(3, 5))
    b = generate_pair(spec, pair_rng(3, 5))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_train_zero_iterations_returns_init(tmp_path):
    cfg = tiny_train_cfg(iterations=0)
    result = train(cfg, out_dir=tmp_path)
    import numpy.random as npr
    from symtrans.model import init_model_params

    bag, _ = init_model_params(cfg.model, npr.default_rng(cfg.seed))
    for (n1, t1), (n2, t2) in zip(result.bag.items(), bag.items()):
        assert n1 == n2
        np.testing.assert_array_equal(t1.data, t2.data)
    assert (tmp_path / "checkpoint_000000.symt").exists()
    assert result.curve == []


def test_train_same_seed_bit_identical(tmp_path):
    cfg = tiny_train_cfg(iterations=3)
    r1 = train(cfg, out_dir=tmp_path / "a")
    r2 = train(cfg, out_dir=tmp_path / "b")
    assert r1.curve == r2.curve
    f1 = (tmp_path / "a" / "checkpoint_000003.symt").read_bytes()
    f2 = (tmp_path / "b" / "checkpoint_000003.symt").read_bytes()
    assert f1 == f2
    assert ((tmp_path / "a" / "loss.csv").read_bytes()
            == (tmp_path / "b" / "loss.csv").read_bytes())


def test_train_resume_matches_uninterrupted(tmp_path):
    cfg_full = tiny_train_cfg(iterations=6, checkpoint_every=3)
    full = train(cfg_full, out_dir=tmp_path / "full")
    part = train(tiny_train_cfg(iterations=3, checkpoint_every=3),
                 out_dir=tmp_path / "part")
    resumed = train(cfg_full, out_dir=tmp_path / "resumed",
                    resume=tmp_path / "part" / "checkpoint_000003")
    assert resumed.curve == full.curve[3:]
    a = (tmp_path / "full" / "checkpoint_000006.symt").read_bytes()
    b = (tmp_path / "resumed" / "checkpoint_000006.symt").read_bytes()
    assert a == b


def test_opt_state_round_trip(tmp_path):
    params = params_dict({"a.w": np.ones((2, 3), np.float32),
                          "b.w": np.zeros(4, np.float32)})
    state = init_adam(params)
    state.t = 17
    state.m["a.w"] += 0.25
    state.v["b.w"] += 1.5
    save_opt_state(tmp_path / "s.opt", state)
    back = load_opt_state(tmp_path / "s.opt")
    assert back.t == 17
    np.testing.assert_array_equal(back.m["a.w"], state.m["a.w"])
    np.testing.assert_array_equal(back.v["b.w"], state.v["b.w"])


def test_register_modes_share_raw_field():
    cfg = tiny_train_cfg(iterations=0)
    result = train(cfg)
    from symtrans.model import bind_model_params

    params = bind_model_params(cfg.model, result.bag.tensors)
    spec = cfg.data
    moving, fixed, lm, lf, _ = generate_pair(spec, pair_rng(1, 0))
    u_disp, warped_disp, met_disp = register(moving, fixed, params, cfg.model,
                                             mode="displacement",
                                             moving_labels=lm, fixed_labels=lf)
    u_diff, _, met_diff = register(moving, fixed, params, cfg.model,
                                   mode="diffeomorphic")
    # freshly initialized model: near-zero field either way, and the
    # integrated field of a near-zero velocity is itself near zero
    assert np.max(np.abs(u_disp)) < 0.01
    assert np.max(np.abs(u_diff)) < 0.01
    assert "dsc_mean" in met_disp and "folding_count" in met_diff
    with pytest.raises(ValueError, match="mode"):
        register(moving, fixed, params, cfg.model, mode="affine")


def test_train_config_validation():
    with pytest.raises(ValueError, match="lr"):
        tiny_train_cfg(lr=0.0)
    with pytest.raises(ValueError, match="iterations"):
        tiny_train_cfg(iterations=-1)
    with pytest.raises(ValueError, match="extents"):
        TrainConfig(model=ModelConfig(input_shape=(16, 16, 16)),
                    data=SyntheticSpec(extents=(32, 32, 32)))
