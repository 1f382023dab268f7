import numpy as np
import pytest

from fedkl.errors import FormatError, KeyRequiredError, ShapeError
from fedkl.keylock import generate_key, keylock_coeffs
from fedkl.layers import LOCK_PRIVATE, SHAREABLE, BatchNorm
from fedkl.models import (GradientBundle, Model, build_mlp, build_tinycnn, forward_backward, load_model,
                          merge, partition, read_checkpoint, save_checkpoint, sgd_step)

from gradcheck import numerical_gradient, rel_error

KEY_LEN = 16


def models_under_test(seed):
    return [build_mlp([6, 5, 3], v, key_len=KEY_LEN, seed=seed) for v in ("none", "plain", "keylock")] + \
           [build_tinycnn((1, 5, 5), 2, 3, v, key_len=KEY_LEN, seed=seed, activation="sigmoid", n_conv=2)
            for v in ("none", "plain", "keylock")]


class TestBuilders:
    def test_mlp_registry(self):
        m = build_mlp([4, 8, 3])
        assert sorted(m.params) == ["fc1.bias", "fc1.weight", "fc2.bias", "fc2.weight"]
        assert m.params["fc1.weight"].shape == (8, 4)

    def test_keylock_mlp_adds_four_lock_params(self):
        m = build_mlp([4, 8, 3], "keylock", key_len=KEY_LEN)
        assert sorted(m.lock_names) == ["fc1_kl.lock_beta.bias", "fc1_kl.lock_beta.weight",
                                        "fc1_kl.lock_gamma.bias", "fc1_kl.lock_gamma.weight"]
        assert m.params["fc1_kl.lock_gamma.weight"].shape == (KEY_LEN, 8)

    def test_zero_init_gives_uniform_output(self):
        m = build_mlp([4, 8, 3], init="zeros")
        fb = forward_backward(m, np.zeros((1, 4)), np.array([0]))
        assert np.allclose(fb.probs, 1 / 3, rtol=0, atol=1e-15)

    def test_mlp_needs_two_dims(self):
        with pytest.raises(ValueError):
            build_mlp([4])

    def test_tinycnn_logits_and_lock_shapes(self):
        m = build_tinycnn((1, 8, 8), 4, 4, "keylock")
        logits, _ = m.forward(np.zeros((2, 1, 8, 8)), generate_key(0))
        assert logits.shape == (2, 4)
        assert {m.params[n].shape for n in m.lock_names} == {(1024, 4), (4,)}

    def test_tinycnn_parameter_count(self):
        m = build_tinycnn((1, 8, 8), 4, 4, "plain")
        # conv 4*1*3*3 + 4, bn 4 + 4, fc 4*64*4 + 4
        assert m.n_params() == 40 + 8 + 1028

    def test_tinycnn_kernel_too_large(self):
        with pytest.raises(ShapeError):
            build_tinycnn((1, 2, 2), 2, 2, kernel=5, pad=0)

    def test_lock_tag_outside_keylock_rejected(self):
        m = build_mlp([4, 3])
        with pytest.raises(ShapeError):
            Model(m.layers, m.params, {n: LOCK_PRIVATE for n in m.params})


class TestForwardBackward:
    def test_missing_key(self):
        m = build_mlp([4, 5, 3], "keylock", key_len=KEY_LEN)
        with pytest.raises(KeyRequiredError, match="key required"):
            forward_backward(m, np.zeros((2, 4)), np.array([0, 1]))

    def test_saturated_correct_prediction_has_tiny_gradient(self):
        m = build_mlp([2, 3], init="zeros")
        m = m.with_params({"fc1.bias": np.array([0.0, 900.0, 0.0])})
        fb = forward_backward(m, np.ones((1, 2)), np.array([1]))
        assert max(np.max(np.abs(g)) for g in fb.bundle.grads.values()) == 0.0

    def test_deterministic(self):
        m = build_tinycnn((1, 5, 5), 2, 3, "keylock", key_len=KEY_LEN)
        x, key = np.random.default_rng(0).uniform(size=(2, 1, 5, 5)), generate_key(0, KEY_LEN)
        a = forward_backward(m, x, np.array([0, 2]), key).bundle
        b = forward_backward(m, x, np.array([0, 2]), key).bundle
        assert a.equals(b)

    @pytest.mark.parametrize("seed", range(4))
    def test_whole_model_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        key = generate_key(seed, KEY_LEN)
        for m in models_under_test(seed):
            shape = (3, 6) if m.arch["kind"] == "mlp" else (3, 1, 5, 5)
            x, y = rng.uniform(size=shape), rng.integers(0, 3, 3)
            k = key if m.has_keylock else None
            fb = forward_backward(m, x, y, k)
            for n in m.params:
                fd = numerical_gradient(lambda: forward_backward(m, x, y, k).loss, m.params[n], h=1e-5)
                assert rel_error(fb.bundle.grads[n], fd) <= 1e-4, (m.arch, n)

    def test_keylock_equals_precomputed_bn(self):
        km = build_mlp([6, 5, 3], "keylock", key_len=KEY_LEN, seed=3)
        bm = build_mlp([6, 5, 3], "plain", seed=3)
        key = generate_key(1, KEY_LEN)
        gamma, beta = keylock_coeffs(km.layers[2].module(km.params), key)
        shared = {n: km.params[n] for n in bm.params if n in km.params}
        bm = bm.with_params({**shared, "fc1_bn.gamma": gamma, "fc1_bn.beta": beta})
        x = np.random.default_rng(0).normal(size=(4, 6))
        assert isinstance(bm.layers[2], BatchNorm)
        assert np.array_equal(km.forward(x, key)[0], bm.forward(x)[0])

    def test_per_sample_matches_separate_calls(self):
        m = build_tinycnn((1, 5, 5), 2, 3, "keylock", key_len=KEY_LEN, activation="sigmoid")
        key = generate_key(0, KEY_LEN)
        x, y = np.random.default_rng(1).uniform(size=(3, 1, 5, 5)), np.array([0, 1, 2])
        fb = forward_backward(m, x, y, key, per_sample=True)
        for i in range(3):
            single = forward_backward(m, x[i:i + 1], y[i:i + 1], key)
            for n, g in single.bundle.grads.items():
                assert np.allclose(fb.bundle.grads[n][i], g, rtol=1e-12, atol=1e-14)


class TestPartition:
    def test_plain_model_has_empty_private(self):
        m = build_mlp([4, 5, 3], "plain")
        fb = forward_backward(m, np.ones((2, 4)), np.array([0, 1]))
        _, private = partition(fb.bundle)
        assert private.names() == []

    def test_round_trip(self):
        m = build_mlp([4, 5, 3], "keylock", key_len=KEY_LEN)
        b = forward_backward(m, np.ones((2, 4)), np.array([0, 1]), generate_key(0, KEY_LEN)).bundle
        shareable, private = partition(b)
        assert set(private.names()) == set(m.lock_names)
        assert set(shareable.tags.values()) == {SHAREABLE}
        back = merge(shareable, private)
        assert set(back.names()) == set(b.names())
        assert all(np.array_equal(back.grads[n], b.grads[n]) for n in b.names())

    def test_json_round_trip(self):
        b = GradientBundle({"w": np.arange(6.0).reshape(2, 3)}, {"w": SHAREABLE})
        assert GradientBundle.from_json(b.to_json()).equals(b)


class TestSGD:
    def test_zero_lr_is_identity(self):
        m = build_mlp([4, 3])
        fb = forward_backward(m, np.ones((1, 4)), np.array([0]))
        assert all(np.array_equal(sgd_step(m, fb.bundle, 0.0).params[n], m.params[n]) for n in m.params)

    def test_scalar_case(self):
        m = build_mlp([1, 2], init="zeros")
        b = GradientBundle({"fc1.bias": np.array([2.0, -1.0])}, {"fc1.bias": SHAREABLE})
        assert sgd_step(m, b, 0.5).params["fc1.bias"].tolist() == [-1.0, 0.5]

    def test_shape_mismatch(self):
        m = build_mlp([1, 2])
        with pytest.raises(ShapeError):
            sgd_step(m, GradientBundle({"fc1.bias": np.ones(3)}, {"fc1.bias": SHAREABLE}), 0.1)

    def test_loss_decreases_on_separable_toy_set(self):
        rng = np.random.default_rng(0)
        x = np.concatenate([rng.normal(-2, 0.3, (10, 2)), rng.normal(2, 0.3, (10, 2))])
        y = np.repeat([0, 1], 10)
        m = build_mlp([2, 4, 2], seed=1)
        first = forward_backward(m, x, y).loss
        for _ in range(50):
            m = sgd_step(m, forward_backward(m, x, y).bundle, 0.1)
        assert forward_backward(m, x, y).loss < first


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = build_tinycnn((1, 5, 5), 2, 3, "keylock", key_len=KEY_LEN, seed=4)
        save_checkpoint(m, tmp_path / "m.ckpt")
        back = load_model(tmp_path / "m.ckpt")
        assert back.arch == m.arch
        assert all(np.array_equal(back.params[n], m.params[n]) for n in m.params)
        assert back.tags == m.tags

    def test_partial_checkpoint_needs_base(self, tmp_path):
        m = build_mlp([4, 5, 3], "keylock", key_len=KEY_LEN)
        save_checkpoint(m, tmp_path / "g.ckpt", m.shareable_names)
        _, params, _ = read_checkpoint(tmp_path / "g.ckpt")
        assert not set(params) & set(m.lock_names)
        with pytest.raises(FormatError):
            load_model(tmp_path / "g.ckpt")
        assert set(load_model(tmp_path / "g.ckpt", base=m).params) == set(m.params)

    def test_bad_magic_and_truncation(self, tmp_path):
        m = build_mlp([4, 3])
        save_checkpoint(m, tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "a").write_bytes(b"XXXX" + raw[4:])
        (tmp_path / "b").write_bytes(raw[:-8])
        for name in ("a", "b"):
            with pytest.raises(FormatError):
                read_checkpoint(tmp_path / name)

    def test_architecture_mismatch(self, tmp_path):
        save_checkpoint(build_mlp([4, 3]), tmp_path / "m.ckpt")
        with pytest.raises(ShapeError):
            load_model(tmp_path / "m.ckpt", base=build_mlp([4, 5, 3]))
