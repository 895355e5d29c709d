import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from atlasreg.gradcheck import check_end_to_end, check_layers
from atlasreg.net import (
    Adam, CheckpointError, NetConfig, PaddingPlan, StateError, UNet3D, adam_step,
    batchnorm3d_forward, conv3d_backward, conv3d_forward, load_checkpoint, maxpool3d_backward,
    maxpool3d_forward, save_checkpoint, upsample_trilinear_forward,
)
from atlasreg.volcore import DimensionError


def naive_conv(x, w, b):
    """Six nested loops over output position and kernel offset, zero padding."""
    n, cin, X, Y, Z = x.shape
    cout, _, k, _, _ = w.shape
    r = k // 2
    out = np.zeros((n, cout, X, Y, Z))
    for bi, o in itertools.product(range(n), range(cout)):
        for i, j, l in itertools.product(range(X), range(Y), range(Z)):
            acc = b[o]
            for a, c, e in itertools.product(range(k), range(k), range(k)):
                xi, yj, zl = i + a - r, j + c - r, l + e - r
                if 0 <= xi < X and 0 <= yj < Y and 0 <= zl < Z:
                    acc += np.dot(w[o, :, a, c, e], x[bi, :, xi, yj, zl])
            out[bi, o, i, j, l] = acc
    return out


# ---------------------------------------------------------------------------
# conv


@pytest.mark.parametrize("k", [1, 3])
def test_conv_matches_nested_loops(k):
    rng = np.random.default_rng(k)
    x = rng.standard_normal((2, 2, 4, 5, 3))
    w = rng.standard_normal((3, 2, k, k, k))
    b = rng.standard_normal(3)
    out, _ = conv3d_forward(x, w, b)
    assert np.max(np.abs(out - naive_conv(x, w, b))) < 1e-12


def test_conv_loop_and_im2col_paths_agree(monkeypatch):
    from atlasreg.net import layers
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 3, 5, 6, 4))
    w = rng.standard_normal((2, 3, 3, 3, 3))
    b = rng.standard_normal(2)
    out1, c1 = conv3d_forward(x, w, b)
    dout = rng.standard_normal(out1.shape)
    g1 = conv3d_backward(dout, c1)
    monkeypatch.setattr(layers, "IM2COL_MAX_ELEMENTS", 0)
    out2, c2 = conv3d_forward(x, w, b)
    g2 = conv3d_backward(dout, c2)
    assert np.max(np.abs(out1 - out2)) < 1e-12
    for a, c in zip(g1, g2):
        assert np.max(np.abs(a - c)) < 1e-12


def test_conv_identity_kernel():
    x = np.random.default_rng(1).standard_normal((1, 1, 4, 4, 4))
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, 1, 1, 1] = 1.0
    out, _ = conv3d_forward(x, w, np.zeros(1))
    assert np.array_equal(out, x)


def test_conv_zero_kernel_gives_bias():
    x = np.random.default_rng(2).standard_normal((1, 2, 3, 3, 3))
    out, _ = conv3d_forward(x, np.zeros((2, 2, 3, 3, 3)), np.array([0.5, -1.5]))
    assert np.all(out[0, 0] == 0.5) and np.all(out[0, 1] == -1.5)


def test_layer_gradients():
    for r in check_layers(0):
        assert r.passed, (r.name, r.max_rel_err)


# ---------------------------------------------------------------------------
# pooling, upsampling, batch norm


def test_maxpool_values_and_first_index_ties():
    x = np.zeros((1, 1, 2, 2, 2))
    out, cache = maxpool3d_forward(x)
    assert out.shape == (1, 1, 1, 1, 1)
    dx = maxpool3d_backward(np.ones((1, 1, 1, 1, 1)), cache)
    # all eight tie: gradient goes to the first in C order
    assert dx[0, 0, 0, 0, 0] == 1.0 and dx.sum() == 1.0
    x = np.arange(8.0).reshape(1, 1, 2, 2, 2)
    out, cache = maxpool3d_forward(x)
    assert out.item() == 7.0
    assert maxpool3d_backward(np.ones((1, 1, 1, 1, 1)), cache)[0, 0, 1, 1, 1] == 1.0


def test_maxpool_rejects_odd_dims():
    with pytest.raises(RuntimeError):
        maxpool3d_forward(np.zeros((1, 1, 3, 2, 2)))


def test_upsample_constant_and_ramp():
    c = np.full((1, 2, 2, 3, 2), 4.0)
    up, _ = upsample_trilinear_forward(c)
    assert up.shape == (1, 2, 4, 6, 4) and np.allclose(up, 4.0, atol=0, rtol=1e-15)
    # a linear ramp is reproduced in the interior (half-voxel aligned)
    ramp = np.arange(4.0)[None, None, :, None, None] * np.ones((1, 1, 4, 2, 2))
    up, _ = upsample_trilinear_forward(ramp)
    expect = (np.arange(8) + 0.5) / 2.0 - 0.5
    assert np.allclose(up[0, 0, 1:-1, 0, 0], expect[1:-1], atol=1e-15)
    assert up[0, 0, 0, 0, 0] == 0.0 and up[0, 0, -1, 0, 0] == 3.0


def test_batchnorm_normalizes():
    x = np.random.default_rng(3).standard_normal((2, 3, 4, 4, 4)) * 5 + 2
    out, _ = batchnorm3d_forward(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3))
    assert np.allclose(out.mean(axis=(0, 2, 3, 4)), 0, atol=1e-12)
    assert np.allclose(out.var(axis=(0, 2, 3, 4)), 1, atol=1e-4)


def test_batchnorm_running_stats_and_infer():
    rm, rv = np.zeros(1), np.ones(1)
    x = np.full((1, 1, 2, 2, 2), 3.0)
    batchnorm3d_forward(x, np.ones(1), np.zeros(1), rm, rv, momentum=0.5)
    assert rm[0] == 1.5 and rv[0] == 0.5
    out, _ = batchnorm3d_forward(x, np.ones(1), np.zeros(1), rm, rv, mode="infer")
    assert np.allclose(out, 1.5 / np.sqrt(0.5 + 1e-5))
    with pytest.raises(ValueError):
        batchnorm3d_forward(x, np.ones(1), np.zeros(1), rm, rv, mode="eval")


# ---------------------------------------------------------------------------
# padding


def test_padding_plan_reference_dims():
    plan = PaddingPlan.for_dims((64, 76, 44))
    assert plan.padded == (64, 80, 48)
    assert plan.low == (0, 2, 2) and plan.high == (0, 2, 2)


@settings(max_examples=30, deadline=None)
@given(dims=st.tuples(*(st.integers(1, 20),) * 3))
def test_padding_crop_roundtrip(dims):
    plan = PaddingPlan.for_dims(dims)
    assert all(p % 8 == 0 and 0 <= p - d < 8 for p, d in zip(plan.padded, dims))
    x = np.random.default_rng(0).standard_normal((2,) + dims)
    padded = plan.pad(x)
    assert padded.shape == (2,) + plan.padded
    assert np.array_equal(plan.crop(padded), x)


# ---------------------------------------------------------------------------
# network


def _count_formula(b):
    return 5744.25 * b * b + 173.5 * b + 3


@pytest.mark.parametrize("b", [2, 4, 8, 16])
def test_parameter_count(b):
    cfg = NetConfig(base_channels=b)
    assert cfg.parameter_count() == _count_formula(b)
    assert UNet3D(cfg).parameter_count() == cfg.parameter_count()


def test_parameter_count_reference_values():
    assert NetConfig(base_channels=16).parameter_count() == 1473307
    assert NetConfig(base_channels=8).parameter_count() == 369023


def test_layer_inventory():
    cfg = NetConfig(base_channels=4)
    names = [n for n, _, _ in cfg.conv_layers()]
    assert sum(n.startswith("enc") for n in names) == 8
    assert sum(n.startswith(("dec", "head", "final")) for n in names) == 10
    assert len(cfg.bn_layers()) == 8


def test_zero_final_layer_gives_zero_field():
    net = UNet3D(NetConfig(base_channels=2, seed=1))
    net.params["final.w"][...] = 0.0
    net.params["final.b"][...] = 0.0
    u = net.forward_volume(np.random.default_rng(0).standard_normal((9, 10, 7)))
    assert u.data.shape == (9, 10, 7, 3) and not np.any(u.data)


def test_initial_field_is_small():
    net = UNet3D(NetConfig(base_channels=2))
    u = net.forward_volume(np.random.default_rng(0).standard_normal((8, 8, 8)), "train")
    assert 0 < np.max(np.abs(u.data)) < 1e-2


def test_dims_checked_against_config():
    net = UNet3D(NetConfig(base_channels=2, input_dims=(8, 8, 8)))
    with pytest.raises(DimensionError):
        net.forward_volume(np.zeros((8, 8, 9)))


def test_backward_requires_train_forward():
    net = UNet3D(NetConfig(base_channels=2))
    with pytest.raises(StateError):
        net.backward_field(np.zeros((8, 8, 8, 3)))
    net.forward_volume(np.zeros((8, 8, 8)), "infer")
    with pytest.raises(StateError):
        net.backward_field(np.zeros((8, 8, 8, 3)))
    net.forward_volume(np.zeros((8, 8, 8)), "train")
    adam_step(net, Adam(net.params))
    with pytest.raises(StateError):
        net.backward_field(np.zeros((8, 8, 8, 3)))


def test_gradients_accumulate():
    net = UNet3D(NetConfig(base_channels=2, seed=3))
    x = np.random.default_rng(0).standard_normal((8, 8, 8))
    g = np.random.default_rng(1).standard_normal((8, 8, 8, 3))
    net.forward_volume(x, "train")
    net.backward_field(g)
    once = {k: v.copy() for k, v in net.grads.items()}
    net.backward_field(g)
    for k in once:
        assert np.allclose(net.grads[k], 2 * once[k], rtol=1e-12, atol=0)
    net.zero_grad()
    assert all(not np.any(v) for v in net.grads.values())


def test_end_to_end_gradient():
    r = check_end_to_end(0)
    assert r.passed, r.max_rel_err


def test_deterministic_init():
    a, b = UNet3D(NetConfig(base_channels=2, seed=5)), UNet3D(NetConfig(base_channels=2, seed=5))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = UNet3D(NetConfig(base_channels=2, seed=6))
    assert not np.array_equal(a.params["enc0a.w"], c.params["enc0a.w"])


# ---------------------------------------------------------------------------
# optimizer


def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam(p, lr=0.1)
    opt.step({"w": np.zeros(2)})
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_magnitude():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    opt = Adam(p, lr=0.01)
    opt.step({"w": np.array([3.0, -0.2, 1e-3])})
    step = np.abs(p["w"] - np.array([1.0, -2.0, 0.5]))
    assert np.all(step > 0.9 * 0.01) and np.all(step <= 0.01)


def test_adam_minimizes_quadratic():
    p = {"w": np.array([3.0, -4.0])}
    opt = Adam(p, lr=0.05)
    for _ in range(2000):
        opt.step({"w": 2 * p["w"]})
    assert np.max(np.abs(p["w"])) < 1e-3


def test_adam_rejects_bad_lr():
    with pytest.raises(ValueError):
        Adam({"w": np.zeros(1)}, lr=0.0)


# ---------------------------------------------------------------------------
# checkpoints


def _train_steps(net, opt, xs, gs):
    for x, g in zip(xs, gs):
        net.zero_grad()
        net.forward_volume(x, "train")
        net.backward_field(g)
        adam_step(net, opt)


def test_checkpoint_roundtrip(tmp_path):
    net = UNet3D(NetConfig(base_channels=2, seed=2))
    opt = Adam(net.params, lr=1e-3)
    rng = np.random.default_rng(0)
    _train_steps(net, opt, [rng.standard_normal((8, 8, 8))], [rng.standard_normal((8, 8, 8, 3))])
    save_checkpoint(tmp_path / "c.ckpt", net, opt, {"epoch": 1})
    net2, opt2, extra = load_checkpoint(tmp_path / "c.ckpt", expected=net.config)
    assert extra == {"epoch": 1} and opt2.t == opt.t == 1
    for k in net.params:
        assert np.array_equal(net.params[k], net2.params[k])
        assert np.array_equal(opt.m[k], opt2.m[k]) and np.array_equal(opt.v[k], opt2.v[k])
    for k in net.buffers:
        assert np.array_equal(net.buffers[k], net2.buffers[k])


def test_checkpoint_resume_matches_uninterrupted(tmp_path):
    rng = np.random.default_rng(1)
    xs = [rng.standard_normal((8, 8, 8)) for _ in range(4)]
    gs = [rng.standard_normal((8, 8, 8, 3)) for _ in range(4)]
    cfg = NetConfig(base_channels=2, seed=4)
    full = UNet3D(cfg)
    opt = Adam(full.params, lr=1e-3)
    _train_steps(full, opt, xs, gs)

    half = UNet3D(cfg)
    opt_h = Adam(half.params, lr=1e-3)
    _train_steps(half, opt_h, xs[:2], gs[:2])
    save_checkpoint(tmp_path / "h.ckpt", half, opt_h)
    resumed, opt_r, _ = load_checkpoint(tmp_path / "h.ckpt")
    _train_steps(resumed, opt_r, xs[2:], gs[2:])
    for k in full.params:
        assert np.array_equal(full.params[k], resumed.params[k])


def test_checkpoint_config_mismatch_and_corruption(tmp_path):
    net = UNet3D(NetConfig(base_channels=2))
    save_checkpoint(tmp_path / "c.ckpt", net)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c.ckpt", expected=NetConfig(base_channels=4))
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "x.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"garbage\n\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ckpt")
