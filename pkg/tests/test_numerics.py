import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrihallu.numerics import ArrayOps, Tape, conv2d, fft2c, ifft2c
from gradcheck import check_graph
from oracles import central_difference, conv2d_naive, dft2c_bruteforce, rel_err


def crandn(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


class TestFFT:
    def test_center_delta_gives_flat_spectrum(self):
        x = np.zeros((8, 8))
        x[4, 4] = 1.0
        y = fft2c(x)
        np.testing.assert_allclose(np.abs(y), 1 / 8, atol=1e-15)

    def test_zero_in_zero_out(self):
        assert np.all(fft2c(np.zeros((8, 8))) == 0)
        assert np.all(ifft2c(np.zeros((8, 8))) == 0)

    @pytest.mark.parametrize("n", [4, 8])
    def test_matches_bruteforce_dft(self, rng, n):
        x = crandn(rng, n, n)
        np.testing.assert_allclose(fft2c(x), dft2c_bruteforce(x), rtol=0, atol=1e-12)

    def test_round_trip(self, rng):
        x = crandn(rng, 16, 16)
        back = ifft2c(fft2c(x))
        assert np.linalg.norm(back - x) / np.linalg.norm(x) < 1e-10

    def test_constant_kspace_inverts_to_center_delta(self):
        d = ifft2c(np.full((8, 8), 1 / 8, dtype=complex))
        expected = np.zeros((8, 8))
        expected[4, 4] = 1.0
        np.testing.assert_allclose(d, expected, atol=1e-15)

    def test_parseval(self, rng):
        x = crandn(rng, 3, 16, 8)
        assert abs(np.linalg.norm(fft2c(x)) - np.linalg.norm(x)) <= 1e-10 * np.linalg.norm(x)

    def test_linearity(self, rng):
        x, y = crandn(rng, 8, 8), crandn(rng, 8, 8)
        a, b = complex(*rng.normal(size=2)), complex(*rng.normal(size=2))
        np.testing.assert_allclose(fft2c(a * x + b * y), a * fft2c(x) + b * fft2c(y), atol=1e-10)

    def test_adjoint(self, rng):
        x, y = crandn(rng, 8, 16), crandn(rng, 8, 16)
        assert abs(np.vdot(fft2c(x), y) - np.vdot(x, ifft2c(y))) < 1e-10

    @pytest.mark.parametrize("shape", [(6, 8), (8, 12), (3,)])
    def test_rejects_non_power_of_two(self, shape):
        with pytest.raises(ValueError):
            fft2c(np.zeros(shape))
        with pytest.raises(ValueError):
            ifft2c(np.zeros(shape))

    def test_per_leading_index(self, rng):
        x = crandn(rng, 3, 8, 8)
        y = fft2c(x)
        for c in range(3):
            np.testing.assert_array_equal(y[c], fft2c(x[c]))


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 5, 5))
        k = np.zeros((2, 2, 1, 1))
        k[0, 0, 0, 0] = k[1, 1, 0, 0] = 1.0
        np.testing.assert_array_equal(conv2d(x, k, np.zeros(2)), x)

    def test_zero_kernel_gives_bias(self, rng):
        x = rng.normal(size=(1, 5, 5))
        out = conv2d(x, np.zeros((1, 1, 3, 3)), np.array([0.7]))
        np.testing.assert_array_equal(out, np.full((1, 5, 5), 0.7))

    def test_matches_naive_loops(self, rng):
        x = rng.normal(size=(2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        np.testing.assert_allclose(conv2d(x, k, b), conv2d_naive(x, k, b), atol=1e-12)

    def test_batched_matches_unbatched(self, rng):
        x = rng.normal(size=(4, 2, 8, 8))
        k = rng.normal(size=(3, 2, 3, 3))
        out = conv2d(x, k)
        for i in range(4):
            np.testing.assert_allclose(out[i], conv2d(x[i], k), atol=1e-13)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError, match="channel"):
            conv2d(rng.normal(size=(2, 5, 5)), np.zeros((1, 3, 3, 3)))

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(ValueError):
            conv2d(rng.normal(size=(1, 5, 5)), np.zeros((1, 1, 2, 2)))


class TestTape:
    def test_sum_gradient_is_one(self, rng):
        tape = Tape()
        x = tape.leaf(rng.normal(size=(3, 4)))
        g = tape.backward(tape.sum(x))
        np.testing.assert_array_equal(g[x], np.ones((3, 4)))

    def test_squared_norm_gradient(self, rng):
        v = rng.normal(size=(5, 5))
        tape = Tape()
        x = tape.leaf(v)
        g = tape.backward(tape.sum(tape.square(x)))
        np.testing.assert_allclose(g[x], 2 * v)

    def test_complex_leaf_gradient_pairs(self, rng):
        # d/dRe + i d/dIm of |z|^2 is 2z
        v = crandn(rng, 4, 4)
        tape = Tape()
        x = tape.leaf(v)
        g = tape.backward(tape.sum(tape.square(x)))
        np.testing.assert_allclose(g[x], 2 * v)

    def test_non_scalar_root_rejected(self, rng):
        tape = Tape()
        x = tape.leaf(rng.normal(size=3))
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(tape.relu(x))

    def test_unreachable_leaf_gets_zero(self, rng):
        tape = Tape()
        x = tape.leaf(rng.normal(size=3))
        y = tape.leaf(rng.normal(size=(2, 2)))
        g = tape.backward(tape.sum(x))
        np.testing.assert_array_equal(g[y], np.zeros((2, 2)))

    def test_topological_order(self, rng):
        tape = Tape()
        x = tape.leaf(rng.normal(size=(4, 4)))
        tape.sum(tape.abs(tape.fft2c(tape.relu(x))))
        for node in tape.nodes:
            assert all(p.index < node.index for p in node.parents)

    @pytest.mark.parametrize("seed", range(5))
    def test_composite_graph_matches_finite_differences(self, seed):
        assert check_graph(seed) < 1e-4

    def test_taped_and_plain_ops_agree(self, rng):
        v = rng.normal(size=(2, 1, 8, 8))
        k = rng.normal(size=(3, 1, 3, 3))
        tape, plain = Tape(), ArrayOps()

        def run(ops, x):
            h = ops.relu(ops.conv2d(x, k, np.zeros(3)))
            h = ops.concat([ops.upsample2(ops.avgpool2(h)), h], axis=1)
            return ops.sum(ops.abs(ops.fft2c(h)))

        assert run(tape, tape.leaf(v)).value == run(plain, v)

    def test_determinism(self, rng):
        v = rng.normal(size=(1, 8, 8))

        def run():
            tape = Tape()
            x = tape.leaf(v)
            root = tape.sum(tape.rss(tape.ifft2c(tape.mul(x, 1 + 2j)), axis=0))
            return tape.backward(root)[x]

        assert np.array_equal(run(), run())


def _op_graph(op, x):
    tape = Tape()
    leaf = tape.leaf(x)
    w = np.linspace(-1.0, 1.0, x.size).reshape(x.shape)
    if op == "amax":
        out = tape.amax(tape.mul(leaf, w), axis=(1, 2), keepdims=True)
    elif op == "rss":
        out = tape.rss(tape.fft2c(tape.add(leaf, 0.3j * w)), axis=0)
    elif op == "div":
        out = tape.div(leaf, tape.add(tape.sum(tape.square(leaf)), 1.0))
    elif op == "clip":
        out = tape.clip(leaf, -0.5, 0.5)
    elif op == "pool":
        out = tape.upsample2(tape.avgpool2(tape.mul(leaf, w)))
    elif op == "ifft":
        out = tape.abs(tape.ifft2c(tape.mul(leaf, 1 - 0.5j)))
    elif op == "mean":
        out = tape.expand(tape.mean(tape.square(leaf)), 0)
    else:
        raise AssertionError(op)
    root = tape.sum(tape.square(tape.sub(out, 0.1)))
    return tape, leaf, root


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000),
       op=st.sampled_from(["amax", "rss", "div", "clip", "pool", "ifft", "mean"]),
       n=st.sampled_from([4, 8]))
def test_every_op_matches_finite_differences(seed, op, n):
    x = np.random.default_rng(seed).normal(size=(2, n, n))
    tape, leaf, root = _op_graph(op, x)
    grad = tape.backward(root)[leaf]
    fd = central_difference(lambda v: float(_op_graph(op, v)[2].value), x)
    assert rel_err(grad, fd) < 1e-4
