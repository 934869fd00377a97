import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modality_lens import numerics as nx
from modality_lens.errors import ContractError, DimensionError, NumericError, ParseError
from modality_lens.numerics import ComputationTape, Tensor, backward, finite_diff_check


# ---------------------------------------------------------------- oracles


def matmul_oracle(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def softmax_oracle(row):
    e = [math.exp(v) for v in row]
    z = sum(e)
    return [v / z for v in e]


def layer_norm_oracle(x, g, b, eps):
    n = len(x)
    mu = sum(x) / n
    var = sum((v - mu) ** 2 for v in x) / n
    return [(v - mu) / math.sqrt(var + eps) * gi + bi for v, gi, bi in zip(x, g, b)]


def attention_oracle(q, k, v):
    h, m, dh = q.shape
    out = np.zeros((h, m, dh))
    for hh in range(h):
        for i in range(m):
            scores = [float(q[hh, i] @ k[hh, j]) / math.sqrt(dh) for j in range(k.shape[1])]
            w = softmax_oracle(scores)
            for j, wj in enumerate(w):
                out[hh, i] += wj * v[hh, j]
    return out


# ---------------------------------------------------------------- Tensor


class TestTensor:
    def test_rejects_nan(self):
        with pytest.raises(NumericError):
            Tensor([1.0, float("nan")])

    def test_rejects_inf(self):
        with pytest.raises(NumericError):
            Tensor([[float("inf")]])

    def test_stores_float64(self):
        t = Tensor(np.arange(6, dtype=np.int32).reshape(2, 3))
        assert t.data.dtype == np.float64
        assert t.shape == (2, 3)
        assert t.size == 6

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_debug_guard_catches_overflow(self):
        nx.set_debug(True)
        try:
            with pytest.raises(NumericError):
                nx.exp(Tensor([1000.0]))
        finally:
            nx.set_debug(False)


# ---------------------------------------------------------------- matmul


class TestMatmul:
    def test_identity(self, rng):
        a = rng.standard_normal((3, 3))
        assert np.array_equal(nx.matmul(np.eye(3), a).data, a)

    def test_scalar_case(self):
        assert nx.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]

    def test_matches_triple_loop(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        assert np.abs(nx.matmul(a, b).data - matmul_oracle(a, b)).max() < 1e-12

    def test_batched_times_matrix(self, rng):
        a = rng.standard_normal((2, 3, 5, 4))
        b = rng.standard_normal((4, 6))
        out = nx.matmul(a, b).data
        for i in range(2):
            for j in range(3):
                assert np.abs(out[i, j] - matmul_oracle(a[i, j], b)).max() < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nx.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_rank_one_rejected(self):
        with pytest.raises(DimensionError):
            nx.matmul(np.ones(3), np.ones((3, 2)))


# ---------------------------------------------------------------- softmax


class TestSoftmax:
    def test_uniform_row(self):
        out = nx.softmax_rows(np.zeros((1, 3))).data
        assert np.abs(out - 1 / 3).max() < 1e-15

    def test_exp_normalize_oracle(self):
        out = nx.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0]
        assert np.abs(out - softmax_oracle([1.0, 2.0, 3.0])).max() < 1e-15

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(st.floats(-50, 50), min_size=1, max_size=8),
        st.floats(-1e3, 1e3),
    )
    def test_shift_invariance_and_row_sums(self, row, c):
        x = np.array([row])
        a = nx.softmax_rows(x).data
        b = nx.softmax_rows(x + c).data
        assert abs(a.sum() - 1.0) < 1e-12
        assert np.all(a >= 0)
        assert np.abs(a - b).max() < 1e-12

    def test_large_magnitudes_are_stable(self):
        out = nx.softmax_rows(Tensor([[1e300, 0.0]])).data
        assert out.tolist() == [[1.0, 0.0]]

    def test_needs_matrix(self):
        with pytest.raises(DimensionError):
            nx.softmax_rows(np.zeros(3))

    def test_log_softmax_matches(self, rng):
        x = rng.standard_normal((4, 5))
        assert np.abs(nx.log_softmax(x).data - np.log(nx.softmax_rows(x).data)).max() < 1e-12


# ---------------------------------------------------------------- layer_norm


class TestLayerNorm:
    def test_constant_vector_gives_zero(self):
        out = nx.layer_norm(np.full(5, 3.7), np.ones(5), np.zeros(5), 1e-5).data
        assert np.abs(out).max() == 0.0

    def test_already_standardized(self):
        out = nx.layer_norm(Tensor([-1.0, 1.0]), np.ones(2), np.zeros(2), 1e-14).data
        assert np.abs(out - [-1.0, 1.0]).max() < 1e-12

    def test_two_pass_oracle(self, rng):
        x = rng.standard_normal(7) * 3 + 1
        g = rng.standard_normal(7)
        b = rng.standard_normal(7)
        out = nx.layer_norm(x, g, b, 1e-5).data
        assert np.abs(out - layer_norm_oracle(x, g, b, 1e-5)).max() < 1e-12

    def test_eps_must_be_positive(self):
        with pytest.raises(ContractError):
            nx.layer_norm(np.ones(3), np.ones(3), np.zeros(3), 0.0)

    def test_affine_shape_checked(self):
        with pytest.raises(DimensionError):
            nx.layer_norm(np.ones((2, 3)), np.ones(2), np.zeros(3))


# ---------------------------------------------------------------- attention


class TestAttention:
    def test_single_key_returns_value(self, rng):
        q = rng.standard_normal((2, 5, 4))
        k = rng.standard_normal((2, 1, 4))
        v = rng.standard_normal((2, 1, 4))
        out = nx.scaled_dot_attention(q, k, v).data
        assert np.abs(out - v).max() < 1e-15

    def test_identical_keys_average_values(self, rng):
        q = rng.standard_normal((1, 3, 4))
        k = np.repeat(rng.standard_normal((1, 1, 4)), 6, axis=1)
        v = rng.standard_normal((1, 6, 4))
        out = nx.scaled_dot_attention(q, k, v).data
        assert np.abs(out - v.mean(axis=1, keepdims=True)).max() < 1e-14

    def test_loop_oracle(self, rng):
        q, k, v = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 5, 4)), rng.standard_normal((2, 5, 4))
        out = nx.scaled_dot_attention(q, k, v).data
        assert np.abs(out - attention_oracle(q, k, v)).max() < 1e-12

    def test_head_dim_mismatch(self):
        with pytest.raises(DimensionError):
            nx.scaled_dot_attention(np.ones((1, 2, 3)), np.ones((1, 2, 4)), np.ones((1, 2, 4)))


# ---------------------------------------------------------------- backward


class TestBackward:
    def test_square_sum(self, rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True)
        with ComputationTape() as tape:
            loss = nx.sum_(x * x)
        backward(loss, tape)
        assert np.array_equal(x.grad, 2 * x.data)

    def test_independent_loss_gives_zero(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        y = Tensor(rng.standard_normal(3), requires_grad=True)
        with ComputationTape() as tape:
            loss = nx.sum_(y * y)
            _ = x * 2.0
        backward(loss, tape)
        assert np.array_equal(x.grad, np.zeros(3))

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ComputationTape() as tape:
            y = x * 2.0
        with pytest.raises(ContractError):
            backward(y, tape)

    def test_reuse_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        with ComputationTape() as tape:
            loss = nx.sum_(x * x * x + x)
        backward(loss, tape)
        assert x.grad.tolist() == [28.0]

    def test_grads_accumulate_across_calls(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        for _ in range(2):
            with ComputationTape() as tape:
                loss = nx.sum_(x * 3.0)
            backward(loss, tape)
        assert x.grad.tolist() == [6.0, 6.0]

    def test_constants_not_recorded(self):
        with ComputationTape() as tape:
            nx.exp(Tensor([1.0])) + 1.0
        assert len(tape) == 0

    def test_deterministic(self, rng):
        data = rng.standard_normal((4, 6))
        w = rng.standard_normal((6, 3))

        def run():
            x = Tensor(data, requires_grad=True)
            with ComputationTape() as tape:
                h = nx.layer_norm(nx.tanh(x @ w), np.ones(3), np.zeros(3))
                loss = nx.mean(nx.log_softmax(h))
            backward(loss, tape)
            return x.grad

        assert run().tobytes() == run().tobytes()


# ---------------------------------------------------------------- finite differences


def _check(fn, shapes, rng, positive=False):
    params = []
    for s in shapes:
        a = rng.standard_normal(s)
        params.append(Tensor(np.abs(a) + 0.5 if positive else a, requires_grad=True))
    return finite_diff_check(lambda: fn(*params), params, h=1e-5)


class TestFiniteDiff:
    def test_quadratic_form(self, rng):
        m = rng.standard_normal((5, 5))
        a = m @ m.T / 5 + np.eye(5)
        x = Tensor(rng.standard_normal((5, 1)), requires_grad=True)
        err = finite_diff_check(lambda: 0.5 * nx.sum_(nx.matmul(nx.transpose(x), nx.matmul(a, x))), [x], h=1e-5)
        assert err < 1e-9

    def test_layer_norm_chain(self, rng):
        g = Tensor(rng.standard_normal(6), requires_grad=True)
        b = Tensor(rng.standard_normal(6), requires_grad=True)
        x = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((6, 6)), requires_grad=True)

        def f():
            h = nx.layer_norm(x @ w, g, b)
            return nx.sum_(nx.tanh(nx.layer_norm(h, g, b)) * nx.exp(h * 0.1))

        assert finite_diff_check(f, [x, w, g, b]) < 1e-5

    @pytest.mark.parametrize(
        "name,fn,shapes,positive",
        [
            ("add", lambda a, b: nx.sum_(nx.tanh(a + b)), [(3, 4), (4,)], False),
            ("sub", lambda a, b: nx.sum_(nx.tanh(a - b)), [(3, 4), (3, 1)], False),
            ("mul", lambda a, b: nx.sum_(nx.tanh(a * b)), [(3, 4), (1, 4)], False),
            ("div", lambda a, b: nx.sum_(nx.tanh(a / b)), [(3, 4), (4,)], True),
            ("exp", lambda a: nx.sum_(nx.exp(a) * a), [(5,)], False),
            ("log", lambda a: nx.sum_(nx.log(a) * a), [(5,)], True),
            ("sqrt", lambda a: nx.sum_(nx.sqrt(a) * a), [(5,)], True),
            ("gelu", lambda a: nx.sum_(nx.gelu(a) * a), [(2, 6)], False),
            ("mean", lambda a: nx.sum_(nx.tanh(nx.mean(a, axis=0))), [(4, 3)], False),
            ("max", lambda a: nx.sum_(nx.tanh(nx.max_(a, axis=1))), [(4, 5)], False),
            ("matmul", lambda a, b: nx.sum_(nx.tanh(a @ b)), [(2, 3, 4), (4, 2)], False),
            ("bmm", lambda a, b: nx.sum_(nx.tanh(nx.matmul(a, b))), [(2, 3, 4), (2, 4, 2)], False),
            ("transpose", lambda a: nx.sum_(nx.tanh(nx.transpose(a, (1, 0, 2))) * np.arange(12.0).reshape(3, 2, 2)), [(2, 3, 2)], False),
            ("reshape", lambda a: nx.sum_(nx.tanh(nx.reshape(a, (6, 2))) @ np.arange(2.0).reshape(2, 1)), [(3, 4)], False),
            ("getitem", lambda a: nx.sum_(nx.tanh(a[1:, ::2])), [(3, 5)], False),
            ("gather", lambda a: nx.sum_(nx.tanh(a[np.array([0, 2, 2])])), [(3, 2)], False),
            ("concat", lambda a, b: nx.sum_(nx.tanh(nx.concat([a, b], axis=1)) * np.arange(5.0)), [(2, 2), (2, 3)], False),
            ("broadcast", lambda a: nx.sum_(nx.tanh(nx.broadcast_to(a, (3, 2, 4))) * np.arange(24.0).reshape(3, 2, 4)), [(2, 4)], False),
            ("softmax", lambda a: nx.sum_(nx.softmax_rows(a) * np.arange(12.0).reshape(3, 4)), [(3, 4)], False),
            ("log_softmax", lambda a: nx.sum_(nx.log_softmax(a) * np.arange(12.0).reshape(3, 4)), [(3, 4)], False),
            ("layer_norm", lambda a, g, b: nx.sum_(nx.tanh(nx.layer_norm(a, g, b))), [(3, 5), (5,), (5,)], False),
            ("attention", lambda q, k, v: nx.sum_(nx.tanh(nx.scaled_dot_attention(q, k, v))), [(2, 3, 4), (2, 5, 4), (2, 5, 4)], False),
        ],
    )
    def test_per_op(self, rng, name, fn, shapes, positive):
        assert _check(fn, shapes, rng, positive) < 1e-4, name

    def test_step_must_be_positive(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(ContractError):
            finite_diff_check(lambda: nx.sum_(x), [x], h=0.0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_objective(self):
        x = Tensor([0.0], requires_grad=True)
        with pytest.raises(NumericError):
            finite_diff_check(lambda: nx.sum_(nx.log(x)), [x])

    def test_restores_requires_grad(self):
        x = Tensor([1.0, 2.0])
        finite_diff_check(lambda: nx.sum_(x * x), [x])
        assert not x.requires_grad


# ---------------------------------------------------------------- EMBD


class TestEmbd:
    @pytest.mark.parametrize("shape", [(), (4,), (2, 3), (2, 1, 3)])
    def test_roundtrip(self, rng, shape):
        arr = rng.standard_normal(shape).astype(np.float32).astype(np.float64)
        back = nx.read_embd(nx.write_embd(Tensor(arr)))
        assert back.shape == arr.shape
        assert np.array_equal(back.data, arr)

    def test_layout(self):
        raw = nx.write_embd(Tensor([[1.0, 2.0]]))
        assert raw[:4] == b"EMBD"
        assert raw[4:16] == b"\x01\x00\x00\x00\x02\x00\x00\x00\x01\x00\x00\x00"
        assert raw[16:20] == b"\x02\x00\x00\x00"
        assert np.frombuffer(raw[20:], "<f4").tolist() == [1.0, 2.0]

    def test_bad_magic(self):
        with pytest.raises(ParseError, match="offset 0"):
            nx.read_embd(b"EMBX" + bytes(12))

    def test_truncated_payload(self):
        raw = nx.write_embd(Tensor(np.ones(4)))
        with pytest.raises(ParseError):
            nx.read_embd(raw[:-1])

    def test_offset_and_end(self):
        a, b = nx.write_embd(Tensor([1.0])), nx.write_embd(Tensor([2.0, 3.0]))
        t, end = nx.read_embd(a + b, len(a), return_end=True)
        assert t.data.tolist() == [2.0, 3.0] and end == len(a) + len(b)
