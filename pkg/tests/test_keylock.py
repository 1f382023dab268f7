import numpy as np
import pytest

from fedkl.errors import FormatError, KeyRequiredError, ShapeError
from fedkl.keylock import (Key, KeyLockModule, KeyLockNorm, generate_key, keylock_backward, keylock_coeffs,
                           keylock_forward, load_key, save_key)
from fedkl.layers import LOCK_PRIVATE, batchnorm_backward, batchnorm_forward

from gradcheck import numerical_gradient, rel_error


def random_module(rng, s=16, o=3):
    return KeyLockModule(rng.normal(size=(s, o)), rng.normal(size=o), rng.normal(size=(s, o)), rng.normal(size=o))


class TestKey:
    def test_same_seed_same_key(self):
        assert np.array_equal(generate_key(5, 32).values, generate_key(5, 32).values)

    def test_default_length(self):
        assert len(generate_key(0)) == 1024

    def test_rejects_empty_length(self):
        with pytest.raises(ValueError):
            generate_key(0, 0)

    def test_file_round_trip(self, tmp_path):
        key = generate_key(11, 40)
        save_key(key, tmp_path / "k.bin")
        back = load_key(tmp_path / "k.bin")
        assert back.seed == 11 and np.array_equal(back.values, key.values)
        assert (tmp_path / "k.bin").stat().st_size == 12 + 8 * 40

    def test_truncated_file(self, tmp_path):
        save_key(generate_key(1, 8), tmp_path / "k.bin")
        (tmp_path / "k.bin").write_bytes((tmp_path / "k.bin").read_bytes()[:-3])
        with pytest.raises(FormatError):
            load_key(tmp_path / "k.bin")

    def test_non_finite_key_rejected(self):
        with pytest.raises(ArithmeticError):
            Key(np.array([0.0, np.inf]), 0)


class TestCoeffs:
    def test_zero_weights_give_identity(self):
        m = KeyLockModule(np.zeros((8, 2)), np.ones(2), np.zeros((8, 2)), np.zeros(2))
        gamma, beta = keylock_coeffs(m, generate_key(3, 8))
        assert gamma.tolist() == [1.0, 1.0] and beta.tolist() == [0.0, 0.0]

    def test_zero_key_gives_biases(self):
        m = random_module(np.random.default_rng(0))
        gamma, beta = keylock_coeffs(m, np.zeros(16))
        assert np.array_equal(gamma, m.b_gamma) and np.array_equal(beta, m.b_beta)

    def test_against_loop_oracle(self):
        m = random_module(np.random.default_rng(1))
        k = generate_key(2, 16).values
        gamma, beta = keylock_coeffs(m, k)
        for o in range(3):
            g = m.b_gamma[o] + sum(k[s] * m.w_gamma[s, o] for s in range(16))
            b = m.b_beta[o] + sum(k[s] * m.w_beta[s, o] for s in range(16))
            assert abs(gamma[o] - g) <= 1e-12 and abs(beta[o] - b) <= 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ShapeError, match="key length"):
            keylock_coeffs(random_module(np.random.default_rng(2)), np.ones(15))

    def test_different_keys_different_coeffs(self):
        rng = np.random.default_rng(3)
        m = KeyLockModule.init(64, 4, rng)
        for i in range(50):
            g1, b1 = keylock_coeffs(m, generate_key(2 * i, 64))
            g2, b2 = keylock_coeffs(m, generate_key(2 * i + 1, 64))
            assert np.max(np.abs(g1 - g2)) > 1e-9 and np.max(np.abs(b1 - b2)) > 1e-9


class TestForwardBackward:
    def test_identity_lock_equals_plain_bn_bitwise(self):
        rng = np.random.default_rng(4)
        x, up = rng.normal(size=(3, 2, 4, 4)), rng.normal(size=(3, 2, 4, 4))
        m = KeyLockModule(np.zeros((8, 2)), np.ones(2), np.zeros((8, 2)), np.zeros(2))
        s, cache = keylock_forward(x, m, generate_key(0, 8))
        s_bn, cache_bn = batchnorm_forward(x, np.ones(2), np.zeros(2))
        assert np.array_equal(s, s_bn)
        assert np.array_equal(keylock_backward(cache, up)[4], batchnorm_backward(cache_bn, up)[2])

    def test_zero_upstream(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 3))
        _, cache = keylock_forward(x, random_module(rng), generate_key(0, 16))
        assert all(not g.any() for g in keylock_backward(cache, np.zeros_like(x)))

    def test_unit_key_fills_one_row(self):
        rng = np.random.default_rng(6)
        x, up = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        key = np.zeros(16)
        key[0] = 1.0
        _, cache = keylock_forward(x, random_module(rng), key)
        gw = keylock_backward(cache, up)[0]
        assert np.any(gw[0] != 0) and not gw[1:].any()

    def test_weight_gradient_is_key_outer_product(self):
        rng = np.random.default_rng(7)
        x, up = rng.normal(size=(2, 3, 3, 3)), rng.normal(size=(2, 3, 3, 3))
        key = generate_key(9, 16)
        _, cache = keylock_forward(x, random_module(rng), key)
        gwg, gwb, gbg, gbb, _ = keylock_backward(cache, up)
        assert np.linalg.matrix_rank(gwg) == 1
        v = gwg.T @ key.values / (key.values @ key.values)
        assert np.allclose(v, gbg, rtol=1e-12, atol=1e-14)
        assert np.allclose(gwb, np.outer(key.values, gbb), rtol=0, atol=0)

    def test_mismatched_key(self):
        rng = np.random.default_rng(8)
        _, cache = keylock_forward(rng.normal(size=(3, 3)), random_module(rng), np.ones(16))
        with pytest.raises(ShapeError):
            keylock_backward(cache, np.ones((3, 3)), np.ones(15))

    @pytest.mark.parametrize("i", range(20))
    def test_finite_differences(self, i):
        rng = np.random.default_rng(100 + i)
        shape = (3, 3, 3, 3) if i % 2 else (5, 3)
        x, r = rng.normal(size=shape), rng.normal(size=shape)
        m, key = random_module(rng), generate_key(i, 16)

        def loss():
            return float((keylock_forward(x, m, key)[0] * r).sum())

        gwg, gwb, gbg, gbb, gx = keylock_backward(keylock_forward(x, m, key)[1], r)
        for analytic, var in ((gwg, m.w_gamma), (gwb, m.w_beta), (gbg, m.b_gamma), (gbb, m.b_beta), (gx, x)):
            assert rel_error(analytic, numerical_gradient(loss, var)) <= 1e-5


class TestLayer:
    def test_params_are_lock_private(self):
        layer = KeyLockNorm("kl", 4, key_len=32)
        specs = layer.param_specs()
        assert len(specs) == 4 and all(s.tag == LOCK_PRIVATE for s in specs)
        assert {s.shape for s in specs} == {(32, 4), (4,)}

    def test_lock_bias_flag(self):
        assert len(KeyLockNorm("kl", 4, key_len=32, lock_bias=False).param_specs()) == 2

    def test_forward_needs_key(self):
        layer = KeyLockNorm("kl", 2, key_len=4)
        params = {s.name: np.zeros(s.shape) for s in layer.param_specs()}
        with pytest.raises(KeyRequiredError):
            layer.forward(params, np.ones((2, 2)))

    @pytest.mark.parametrize("s", [64, 1024])
    def test_init_scale_does_not_grow_with_key_length(self, s):
        m = KeyLockModule.init(s, 2000, np.random.default_rng(10))
        gamma, beta = keylock_coeffs(m, generate_key(4, s))
        assert abs(gamma.mean() - 1) < 0.15 and abs(beta.mean()) < 0.15
        assert 0.8 < gamma.std() < 1.2 and 0.8 < beta.std() < 1.2
