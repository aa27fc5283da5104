import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from taac.errors import ConfigError, DegenerateInputError, DimensionError, FormatError, NumericError
from taac.gradcheck import CASES, TOLERANCE, run_gradient_suite
from taac.nn_core import (AdamW, BatchNorm, Linear, Param, avgpool_backward, avgpool_forward,
                          batchnorm_forward, conv1d_forward, cross_entropy, dropout, fc_backward,
                          fc_forward, gradient_check, load_checkpoint, save_checkpoint, softmax)


class TestFc:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(fc_forward(x, np.eye(4), np.zeros(4)), x)

    def test_hand_case(self):
        y = fc_forward(np.array([[1.0, 2.0]]), np.array([[1.0, 1.0], [0.0, 1.0]]), np.array([1.0, 0.0]))
        np.testing.assert_array_equal(y, [[4.0, 2.0]])

    def test_empty_batch(self):
        assert fc_forward(np.zeros((0, 3)), np.ones((2, 3)), np.zeros(2)).shape == (0, 2)

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            fc_forward(np.zeros((2, 3)), np.ones((2, 4)), np.zeros(2))
        with pytest.raises(DimensionError):
            fc_forward(np.zeros((2, 3)), np.ones((2, 3)), np.zeros(3))

    def test_per_example_stacks_sum_to_batch_grad(self, rng):
        x, dy, W = rng.normal(size=(12, 5)), rng.normal(size=(12, 3)), rng.normal(size=(3, 5))
        _, dW, db = fc_backward(dy, x, W)
        _, sW, sb = fc_backward(dy, x, W, n_examples=4)
        assert sW.shape == (4, 3, 5) and sb.shape == (4, 3)
        np.testing.assert_allclose(sW.sum(0), dW, atol=1e-12)
        np.testing.assert_allclose(sb.sum(0), db, atol=1e-12)
        # example 1 owns rows 3..5
        np.testing.assert_allclose(sW[1], dy[3:6].T @ x[3:6], atol=1e-12)

    def test_linear_check_is_tight(self, rng):
        x, W, b = rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), rng.normal(size=2)
        R = rng.normal(size=(3, 2))
        _, _, db = fc_backward(R, x, W)
        assert gradient_check(lambda v: (R * fc_forward(x, W, v)).sum(), b, db) < 1e-7


class TestConv:
    def test_hand_cases(self):
        y, _ = conv1d_forward(np.array([[[1.0, 2.0, 3.0]]]), np.array([[[1.0, 0.0]]]))
        np.testing.assert_array_equal(y, [[[1.0, 2.0]]])
        y, _ = conv1d_forward(np.ones((1, 1, 3)), np.ones((1, 1, 2)))
        np.testing.assert_array_equal(y, [[[2.0, 2.0]]])

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 9))
        np.testing.assert_array_equal(conv1d_forward(x, np.ones((1, 1, 1)))[0], x)

    def test_same_padding_length(self, rng):
        y, _ = conv1d_forward(rng.normal(size=(2, 3, 50)), rng.normal(size=(4, 3, 17)), padding=8)
        assert y.shape == (2, 4, 50)

    def test_geometry_errors(self):
        with pytest.raises(DimensionError):
            conv1d_forward(np.zeros((1, 1, 2)), np.zeros((1, 1, 3)))
        with pytest.raises(DimensionError):
            conv1d_forward(np.zeros((1, 2, 5)), np.zeros((1, 1, 3)))

    def test_matches_direct_loop(self, rng):
        x, w, b = rng.normal(size=(2, 3, 12)), rng.normal(size=(4, 3, 5)), rng.normal(size=4)
        y, _ = conv1d_forward(x, w, b, stride=2, padding=1)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1)))
        ref = np.empty_like(y)
        for n in range(2):
            for o in range(4):
                for t in range(y.shape[2]):
                    ref[n, o, t] = (xp[n, :, 2 * t:2 * t + 5] * w[o]).sum() + b[o]
        np.testing.assert_allclose(y, ref, atol=1e-12)


class TestBatchNorm:
    def test_standardizes(self):
        x = np.array([[-1.0], [1.0]])
        y, _ = batchnorm_forward(x, np.ones(1), np.zeros(1), eps=0.0)
        np.testing.assert_allclose(y, x)

    def test_gamma_zero(self, rng):
        y, _ = batchnorm_forward(rng.normal(size=(4, 2, 3)), np.zeros(2), np.array([0.5, -2.0]))
        assert np.all(y[:, 0] == 0.5) and np.all(y[:, 1] == -2.0)

    def test_constant_batch(self):
        y, _ = batchnorm_forward(np.full((3, 2), 7.0), np.ones(2), np.array([1.0, 2.0]))
        np.testing.assert_array_equal(y, [[1.0, 2.0]] * 3)

    def test_batch_of_one(self):
        with pytest.raises(DegenerateInputError):
            batchnorm_forward(np.zeros((1, 2)), np.ones(2), np.zeros(2))

    def test_running_stats(self):
        bn = BatchNorm(1, "bn", dtype=np.float64)
        bn.forward(np.array([[1.0], [3.0]]))
        assert bn.running_mean.value[0] == pytest.approx(0.2)
        # unbiased variance 2 -> 0.9 + 0.2
        assert bn.running_var.value[0] == pytest.approx(1.1)
        bn.eval()
        y = bn.forward(np.array([[0.2]]))
        assert y[0, 0] == pytest.approx(0.0, abs=1e-12)


class TestDropout:
    def test_zero_rate(self, rng):
        x = rng.normal(size=50)
        assert dropout(x, 0.0, "train", rng)[0] is x
        assert dropout(x, 0.7, "eval")[0] is x

    def test_survivor_fraction(self):
        y, mask = dropout(np.ones(100000), 0.5, "train", np.random.default_rng(0))
        assert abs((y != 0).mean() - 0.5) < 0.05
        assert set(np.unique(y)) == {0.0, 2.0}

    @pytest.mark.parametrize("rate", [-0.1, 1.0])
    def test_bad_rate(self, rate):
        with pytest.raises(ConfigError):
            dropout(np.ones(3), rate, "train", np.random.default_rng(0))


class TestCrossEntropy:
    def test_uniform_logits(self):
        for eps in (0.0, 0.1):
            loss, _ = cross_entropy(np.zeros((1, 2)), np.array([0]), eps)
            assert loss == pytest.approx(math.log(2), abs=1e-15)

    def test_large_margin(self):
        loss, _ = cross_entropy(np.array([[50.0, -50.0]]), np.array([0]), 0.0)
        assert loss < 1e-20

    def test_smoothing_floor(self):
        # with smoothing the best achievable loss is the target entropy
        loss, _ = cross_entropy(np.array([[50.0, -50.0]]), np.array([0]), 0.1)
        assert loss > 0.1

    def test_sum_reduction(self, rng):
        z, y = rng.normal(size=(5, 2)), rng.integers(0, 2, 5)
        lm, gm = cross_entropy(z, y)
        ls, gs = cross_entropy(z, y, reduction="sum")
        assert ls == pytest.approx(5 * lm)
        np.testing.assert_allclose(gs, 5 * gm)

    def test_errors(self):
        with pytest.raises(NumericError):
            cross_entropy(np.array([[np.nan, 0.0]]), np.array([0]))
        with pytest.raises(DimensionError):
            cross_entropy(np.zeros((1, 2)), np.array([2]))


class TestAdamW:
    def test_zero_grad_no_decay(self):
        p = Param("w", np.array([1.5, -2.0]))
        AdamW([p], lr=0.1, weight_decay=0.0).step()
        np.testing.assert_array_equal(p.value, [1.5, -2.0])

    def test_frozen(self):
        p = Param("w", np.array([1.0]))
        p.grad = np.array([3.0])
        p.trainable = False
        AdamW([p], lr=0.1).step()
        assert p.value[0] == 1.0

    def test_hand_step(self):
        # w=2, g=0.5, lr=0.1, wd=0.01, moments m=0.2, v=0.1 at t=1
        p = Param("w", np.array([2.0]))
        p.grad = np.array([0.5])
        opt = AdamW([p], lr=0.1, weight_decay=0.01)
        opt.m["w"][:] = 0.2
        opt.v["w"][:] = 0.1
        opt.step()
        m = 0.9 * 0.2 + 0.1 * 0.5
        v = 0.999 * 0.1 + 0.001 * 0.25
        w = 2.0 * (1 - 0.1 * 0.01) - 0.1 * (m / 0.1) / (math.sqrt(v / 0.001) + 1e-8)
        assert p.value[0] == pytest.approx(w, rel=1e-12)

    def test_buffers_skipped(self):
        bn = BatchNorm(2, "bn")
        opt = AdamW(bn.params())
        assert {p.name for p in opt.params} == {"bn.gamma", "bn.beta"}


class TestModule:
    def test_state_roundtrip_and_freeze(self, rng):
        lin = Linear(4, 3, "fc", rng)
        s = lin.state_dict()
        lin.W.value += 1
        lin.load_state_dict(s)
        np.testing.assert_array_equal(lin.W.value, s["fc.W"])
        lin.set_trainable(False)
        assert not any(p.trainable for p in lin.params())

    def test_missing_or_misshapen_state(self, rng):
        lin = Linear(4, 3, "fc", rng)
        with pytest.raises(FormatError):
            lin.load_state_dict({"fc.W": lin.W.value})
        with pytest.raises(DimensionError):
            lin.load_state_dict({"fc.W": np.zeros((2, 2)), "fc.b": lin.b.value})

    def test_avgpool_tail(self):
        x = np.arange(10, dtype=float).reshape(1, 1, 10)
        np.testing.assert_array_equal(avgpool_forward(x, 4), [[[1.5, 5.5]]])
        dx = avgpool_backward(np.ones((1, 1, 2)), 10, 4)
        np.testing.assert_array_equal(dx[0, 0], [0.25] * 8 + [0, 0])

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=6))
    def test_softmax_sums_to_one(self, z):
        assert softmax(np.array([z])).sum() == pytest.approx(1.0)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        state = {"a.W": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5]),
                 "n": np.array([3, -4], dtype=np.int64), "s": np.float32(2.0) * np.ones(())}
        save_checkpoint(tmp_path / "c.taac", state, {"phase": 2})
        got, meta = load_checkpoint(tmp_path / "c.taac")
        assert meta["phase"] == 2 and meta["format_version"] == 1
        for k, v in state.items():
            assert got[k].dtype == v.dtype and np.array_equal(got[k], v)

    def test_layout(self, tmp_path):
        save_checkpoint(tmp_path / "c.taac", {"w": np.array([1.0], dtype=np.float32)})
        buf = (tmp_path / "c.taac").read_bytes()
        assert buf[:4] == b"TAAC"
        assert buf[4:10] == b"\x01\x00\x01\x00\x00\x00"
        assert buf[10:13] == b"\x01\x00w" and buf[13:15] == b"\x01\x01"
        assert buf[-4:] == np.float32(1.0).tobytes()

    def test_bad_magic_and_truncation(self, tmp_path):
        p = tmp_path / "c.taac"
        p.write_bytes(b"NOPE")
        with pytest.raises(FormatError):
            load_checkpoint(p)
        save_checkpoint(p, {"w": np.ones(8, dtype=np.float32)})
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(FormatError):
            load_checkpoint(p)


@pytest.mark.parametrize("case", sorted(CASES))
def test_gradient_suite(case):
    err = run_gradient_suite(10, 0, [case])[case]
    assert err < TOLERANCE
