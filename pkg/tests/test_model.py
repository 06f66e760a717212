import numpy as np
import pytest

from dualpix.losses import loss_st1
from dualpix.model import MdpConfig, build, load_checkpoint, param_count, save_checkpoint, set_frozen
from dualpix.tensor import Tape, Tensor


def conv(cin, cout, k=3):
    return cin * cout * k * k + cout


@pytest.fixture(scope="module")
def small():
    return build(MdpConfig(depth=2, base_channels=4, patch=16, seed=1))


def image(seed, n=1, size=16):
    return Tensor(np.random.default_rng(seed).random((n, 3, size, size)))


def test_param_count_closed_form():
    model = build(MdpConfig(depth=3, base_channels=16, stitch="none"))
    enc = (conv(3, 16) + conv(16, 16) + conv(16, 32)
           + conv(32, 32) + conv(32, 32) + conv(32, 64)
           + conv(64, 64) + conv(64, 64) + conv(64, 128)
           + 2 * conv(128, 128))
    dec = (conv(128 + 64, 64) + conv(64, 64)
           + conv(64 + 32, 32) + conv(32, 32)
           + conv(32 + 16, 16) + conv(16, 16)
           + conv(16, 3))
    assert param_count(model) == enc + 3 * dec
    middle = build(MdpConfig(depth=3, base_channels=16, stitch="middle"))
    # middle stitching fuses after the 32-channel decoder block
    assert param_count(middle) == enc + 3 * dec + 3 * conv(96, 32, 1)


def test_stitch_variants_within_five_percent():
    counts = [param_count(build(MdpConfig(stitch=s))) for s in ("none", "middle", "late")]
    assert max(counts) / min(counts) < 1.05


def test_doubling_width_roughly_quadruples():
    a = param_count(build(MdpConfig(base_channels=8)))
    b = param_count(build(MdpConfig(base_channels=16)))
    assert 3.7 < b / a < 4.1


def test_build_deterministic_and_seeded():
    a, b = build(MdpConfig(seed=3)), build(MdpConfig(seed=3))
    assert all(a.params[n].data.tobytes() == b.params[n].data.tobytes() for n in a.params)
    c = build(MdpConfig(seed=4))
    assert a.params["enc.l0.conv1.w"].data.tobytes() != c.params["enc.l0.conv1.w"].data.tobytes()


def test_he_variance():
    model = build(MdpConfig())
    checked = 0
    for name, p in model.params.items():
        if name.endswith(".w") and p.data.size >= 10000:
            fan_in = np.prod(p.shape[1:])
            assert abs(p.data.var() / (2.0 / fan_in) - 1) < 0.2, name
            checked += 1
    assert checked >= 5
    assert all(not p.data.any() for n, p in model.params.items() if n.endswith(".b"))


@pytest.mark.parametrize("bad", [dict(patch=60), dict(depth=0), dict(stitch="early"), dict(base_channels=0)])
def test_invalid_configs(bad):
    with pytest.raises(ValueError):
        build(MdpConfig(**bad))


def test_latent_sizes():
    model = build(MdpConfig(depth=3, base_channels=4, patch=64))
    latent, skips = model.encode(Tensor(np.zeros((1, 3, 64, 64))))
    assert latent.shape == (1, 32, 8, 8)
    assert [s.shape[2] for s in skips] == [64, 32, 16]
    assert model.encode(Tensor(np.zeros((1, 3, 96, 96))))[0].shape[2:] == (12, 12)
    with pytest.raises(ValueError, match="divisible"):
        model.encode(Tensor(np.zeros((1, 3, 60, 64))))


def test_latent_non_degenerate(small):
    for seed in range(3):
        a = small.encode(image(seed))[0].data
        b = small.encode(image(seed + 10))[0].data
        assert not np.array_equal(a, b)


def test_outputs_finite_and_clamped(small):
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 16, 16)) * 5)
    for out in small.forward(x):
        assert out.shape == (2, 3, 16, 16)
        assert np.all(np.isfinite(out.data)) and out.data.min() >= 0 and out.data.max() <= 1


def test_no_stitch_path_independence():
    model = build(MdpConfig(depth=2, base_channels=4, patch=16, stitch="none"))
    x = image(3)
    l0, _, s0 = model.forward(x)
    for name, p in model.params.items():
        if name.startswith("dec_l."):
            p.data = np.zeros_like(p.data)
    l1, _, s1 = model.forward(x)
    assert not np.array_equal(l0.data, l1.data)
    assert s0.data.tobytes() == s1.data.tobytes()


@pytest.mark.parametrize("stitch", ["middle", "late"])
def test_stitch_couples_decoders(stitch):
    model = build(MdpConfig(depth=2, base_channels=4, patch=16, stitch=stitch))
    level = model.config.stitch_level
    x = image(4)
    s0 = model.forward(x)[2].data
    for suffix in ("w", "b"):
        p = model.params[f"dec_l.l{level}.conv2.{suffix}"]
        p.data = np.zeros_like(p.data)
    assert not np.array_equal(s0, model.forward(x)[2].data)


def test_stitch_levels():
    assert MdpConfig(depth=3, stitch="middle").stitch_level == 1
    assert MdpConfig(depth=3, stitch="late").stitch_level == 0
    assert MdpConfig(depth=3, stitch="none").stitch_level is None


def test_frozen_branch_gets_no_gradient(small):
    model = small.copy()
    set_frozen(model, "dec_s", True)
    x = image(5, n=2)
    with Tape() as tape:
        lp, rp, _ = model.forward(x)
        total, _ = loss_st1(x * 0.5, x * 0.5, lp, rp, x)
    tape.backward(total)
    for name, p in model.params.items():
        branch = name.split(".")[0]
        if branch == "dec_s":
            assert p.grad is None
    for branch in ("enc", "dec_l", "dec_r"):
        norm = sum(float(np.abs(p.grad).sum()) for n, p in model.params.items()
                   if n.startswith(branch + ".") and p.grad is not None)
        assert norm > 0, branch
    assert set(model.trainable()) == {n for n in model.params if not n.startswith("dec_s.")}


def test_predict_pads_and_crops(small):
    img = np.random.default_rng(6).random((21, 30, 3)).astype(np.float32)
    outs = small.predict(img)
    assert all(o.shape == img.shape for o in outs)


def test_fully_convolutional_tiling():
    # a 128 input agrees with its 64 crops away from the seams
    model = build(MdpConfig(depth=2, base_channels=4, patch=64, seed=2))
    img = np.random.default_rng(7).random((128, 128, 3)).astype(np.float32)
    full = model.predict(img)[2]
    tile = model.predict(img[:64, :64])[2]
    band = 24
    np.testing.assert_allclose(full[:64 - band, :64 - band], tile[:64 - band, :64 - band], atol=1e-5)


def test_checkpoint_round_trip(tmp_path, small):
    extra = {"adam.m/x": np.arange(6, dtype=np.float32).reshape(2, 3)}
    save_checkpoint(tmp_path / "m.mdp", small, extra, {"epoch": 3})
    raw = (tmp_path / "m.mdp").read_bytes()
    assert raw[:4] == b"MDP1"
    model, back_extra, meta = load_checkpoint(tmp_path / "m.mdp")
    assert model.config == small.config
    assert meta == {"epoch": "3"}
    np.testing.assert_array_equal(back_extra["adam.m/x"], extra["adam.m/x"])
    for name, p in small.params.items():
        assert model.params[name].data.tobytes() == p.data.tobytes()
    save_checkpoint(tmp_path / "again.mdp", model, back_extra, meta)
    assert (tmp_path / "again.mdp").read_bytes() == raw


def test_checkpoint_errors(tmp_path, small):
    (tmp_path / "bad.mdp").write_bytes(b"NOPE")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(tmp_path / "bad.mdp")
    save_checkpoint(tmp_path / "m.mdp", small)
    data = (tmp_path / "m.mdp").read_bytes()
    (tmp_path / "cut.mdp").write_bytes(data[:-10])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(tmp_path / "cut.mdp")
