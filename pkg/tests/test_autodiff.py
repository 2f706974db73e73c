import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stylevar.autodiff import (Adam, AdamState, LSTMCell, Parameter, Tensor, adam_step, apply,
                               cross_entropy, grad_check, graph_nodes, load_checkpoint, lstm_step,
                               no_grad, ops, run_lstm, save_checkpoint, triangular_lr)
from stylevar.errors import ContractError, DimensionError, NumericDomainError


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = apply("matmul", a, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_softmax_uniform():
    out = apply("softmax", Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_sigmoid_zero():
    assert apply("sigmoid", Tensor(0.0)).item() == 0.5


def test_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        ops.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(DimensionError):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_log_domain():
    with pytest.raises(NumericDomainError):
        ops.log(Tensor([1.0, 0.0]))
    with pytest.raises(NumericDomainError):
        ops.exp(Tensor([1000.0]))


def test_validity_check():
    assert Tensor([1.0, 2.0]).is_valid()
    assert not Tensor([1.0, np.nan]).is_valid()
    assert not Tensor([np.inf]).is_valid()


class TestBackward:
    def test_square(self):
        x = Parameter([3.0])
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_linearity(self):
        a, b = Parameter(np.ones(4)), Parameter(np.arange(4.0))
        (a + b).sum().backward()
        np.testing.assert_array_equal(a.grad, np.ones(4))
        np.testing.assert_array_equal(b.grad, np.ones(4))

    def test_sigmoid_derivative(self):
        x = Parameter([0.0])
        ops.sigmoid(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.25])

    def test_non_scalar_loss(self):
        x = Parameter(np.ones(3))
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_twice_doubles_exactly(self):
        rng = np.random.default_rng(0)
        w = Parameter(rng.normal(size=(3, 4)))
        x = Tensor(rng.normal(size=(2, 3)))
        loss = ops.tanh(x @ w).sum()
        loss.backward()
        first = w.grad.copy()
        loss.backward()
        np.testing.assert_array_equal(w.grad, 2 * first)

    def test_each_node_visited_once(self):
        x = Parameter([1.0, 2.0])
        y = x * x
        z = y + y  # diamond: y has two consumers
        loss = z.sum()
        records = graph_nodes(loss)
        ids = [r[2] for r in records]
        assert len(ids) == len(set(ids))
        # creation order is topological: every input id precedes its output id
        for _, inputs, out in records:
            assert all(i < out for i in inputs)
        loss.backward()
        np.testing.assert_array_equal(x.grad, 4 * x.data)

    def test_returns_gradient_map(self):
        a = Parameter([1.0])
        grads = (a * 5.0).sum().backward()
        assert grads[a][0] == 5.0

    def test_no_grad_records_nothing(self):
        x = Parameter([1.0])
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad and y.is_leaf


def test_softmax_sums_to_one_and_positive():
    rng = np.random.default_rng(1)
    for _ in range(20):
        out = ops.softmax(Tensor(rng.normal(scale=10, size=(5, 7))), axis=-1).data
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-9)


class TestGradCheck:
    def test_polynomial(self):
        x = Tensor(np.random.default_rng(2).normal(size=5))
        assert grad_check(lambda t: (t * t).sum(), x, eps=1e-5) <= 1e-6

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(3)
        logits = Tensor(rng.normal(size=(4, 6)))
        targets = rng.integers(0, 6, size=4)
        assert grad_check(lambda t: cross_entropy(t, targets).mean(), logits) <= 1e-4

    def test_lstm_step_loss(self):
        rng = np.random.default_rng(4)
        cell = LSTMCell(3, 4, rng)
        cell.weight.data = rng.uniform(-0.5, 0.5, size=cell.weight.shape)
        xs = [Tensor(rng.normal(size=(2, 3))) for _ in range(3)]
        proj = rng.normal(size=(4, 5))
        targets = rng.integers(0, 5, size=2)

        def loss(_):
            outs, _ = run_lstm(cell, xs)
            return sum(cross_entropy(h @ Tensor(proj), targets).sum() for h in outs)

        assert grad_check(loss, cell.weight) <= 1e-4
        assert grad_check(loss, cell.bias) <= 1e-4

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            grad_check(lambda t: t.sum(), Tensor([1.0]), eps=0.1)

    def test_nan_function(self):
        with pytest.raises(NumericDomainError):
            grad_check(lambda t: t.sum() * np.nan, Tensor([1.0]))

    @pytest.mark.parametrize("op", ["tanh", "sigmoid", "softplus", "exp", "relu"])
    def test_unary_ops(self, op):
        x = Tensor(np.random.default_rng(5).normal(size=(3, 4)) + 0.01)
        w = np.random.default_rng(6).normal(size=(3, 4))
        assert grad_check(lambda t: (apply(op, t) * w).sum(), x) <= 1e-6

    def test_shape_ops(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(2, 3, 4)))
        w = rng.normal(size=(3, 2, 2))

        def f(t):
            y = ops.transpose(t, (1, 0, 2))[:, :, 1:3]
            z = ops.concat([y, ops.reshape(t[:, :, :2], (3, 2, 2))], axis=0)
            stacked = ops.stack([z[:3] * w, z[3:]], axis=0)
            return ops.tanh(stacked).sum() + (ops.log_softmax(z[3:], axis=1) * w).sum()

        assert grad_check(f, x) <= 1e-6

    def test_batched_matmul_broadcast(self):
        rng = np.random.default_rng(8)
        a = Tensor(rng.normal(size=(2, 3, 4)))
        b = Tensor(rng.normal(size=(4, 5)))
        assert grad_check(lambda t: ops.tanh(t @ b).sum(), a) <= 1e-6
        assert grad_check(lambda t: ops.tanh(a @ t).sum(), b) <= 1e-6

    def test_embed_lookup_repeated_ids(self):
        rng = np.random.default_rng(9)
        table = Tensor(rng.normal(size=(5, 3)))
        ids = np.array([[0, 2, 2], [4, 0, 1]])
        assert grad_check(lambda t: ops.tanh(ops.embed_lookup(t, ids)).sum(), table) <= 1e-6


class TestLSTM:
    def test_zero_params_zero_state(self):
        rng = np.random.default_rng(0)
        cell = LSTMCell(3, 4, rng)
        cell.weight.data[:] = 0
        cell.bias.data[:] = 0
        h, c = cell(Tensor(rng.normal(size=(2, 3))), *cell.zero_state(2))
        np.testing.assert_array_equal(h.data, 0.0)

    def test_four_chained_steps_gradcheck(self):
        rng = np.random.default_rng(1)
        cell = LSTMCell(2, 3, rng)
        x = Tensor(rng.normal(size=(4, 1, 2)))

        def loss(t):
            h, c = cell.zero_state(1)
            for i in range(4):
                h, c = cell(t[i], h, c)
            return (h * h).sum() + c.sum()

        assert grad_check(loss, x) <= 1e-4

    def test_saturated_gates_keep_cell(self):
        rng = np.random.default_rng(2)
        H = 4
        w = Tensor(rng.uniform(-0.08, 0.08, size=(3 + H, 4 * H)))
        b = np.zeros(4 * H)
        b[:H] = -10.0      # input gate closed
        b[H:2 * H] = 10.0  # forget gate open
        c_prev = Tensor(rng.normal(size=(1, H)))
        _, c = lstm_step(Tensor(rng.normal(size=(1, 3))), Tensor(rng.normal(size=(1, H))), c_prev, w, Tensor(b))
        assert np.max(np.abs(c.data - c_prev.data)) <= 1e-3

    def test_dimension_error(self):
        cell = LSTMCell(3, 4, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            cell(Tensor(np.ones((1, 2))), *cell.zero_state(1))

    def test_masked_final_state_matches_unpadded(self):
        rng = np.random.default_rng(3)
        cell = LSTMCell(2, 3, rng)
        seq = rng.normal(size=(3, 2))
        padded = [Tensor(np.stack([seq[t] if t < 3 else np.zeros(2), seq[t % 3]])) for t in range(5)]
        mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]])
        _, (h_pad, _) = run_lstm(cell, padded, mask)
        _, (h_ref, _) = run_lstm(cell, [Tensor(seq[t:t + 1]) for t in range(3)])
        np.testing.assert_allclose(h_pad.data[0], h_ref.data[0], atol=1e-14)
        _, (hb_pad, _) = run_lstm(cell, padded, mask, reverse=True)
        _, (hb_ref, _) = run_lstm(cell, [Tensor(seq[t:t + 1]) for t in range(3)], reverse=True)
        np.testing.assert_allclose(hb_pad.data[0], hb_ref.data[0], atol=1e-14)


class TestAdam:
    def test_first_step_magnitude(self):
        p = Parameter([0.5])
        state = AdamState(lr=1e-3)
        adam_step({"p": p}, {"p": np.array([1.0])}, state)
        assert abs((p.data[0] - 0.5) - (-1e-3)) <= 1e-6
        assert state.step == 1

    def test_zero_gradient(self):
        p = Parameter([0.5, -2.0])
        adam_step({"p": p}, {"p": np.zeros(2)}, AdamState())
        np.testing.assert_array_equal(p.data, [0.5, -2.0])

    def test_quadratic_decreases(self):
        p = Parameter([2.0, -1.5])
        opt = Adam({"p": p}, lr=0.1)
        losses = []
        for _ in range(3):
            opt.zero_grad()
            loss = (p * p).sum()
            losses.append(loss.item())
            loss.backward()
            opt.step()
        assert losses[0] > losses[1] > losses[2]

    def test_nan_gradient_aborts(self):
        p, q = Parameter([1.0]), Parameter([2.0])
        with pytest.raises(NumericDomainError, match="'q'"):
            adam_step({"p": p, "q": q}, {"p": np.array([1.0]), "q": np.array([np.nan])}, AdamState())
        assert p.data[0] == 1.0

    def test_cyclic_lr_bounds(self):
        lrs = [triangular_lr(s, 1e-4, 1e-3, 10) for s in range(60)]
        assert min(lrs) == pytest.approx(1e-4)
        assert max(lrs) == pytest.approx(1e-3)
        assert lrs[0] == pytest.approx(1e-4) and lrs[10] == pytest.approx(1e-3) and lrs[20] == pytest.approx(1e-4)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"enc.weight": rng.normal(size=(3, 4)), "bias": rng.normal(size=5), "scalar": np.array(2.5)}
    save_checkpoint(tmp_path / "m.ckpt", arrays, {"step": 7})
    back, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"step": 7}
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw.startswith(b"SVCKPT")


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")


def test_determinism():
    def run():
        rng = np.random.default_rng(11)
        cell = LSTMCell(3, 4, rng)
        outs, _ = run_lstm(cell, [Tensor(rng.normal(size=(2, 3))) for _ in range(4)])
        loss = sum(o.sum() for o in outs)
        loss.backward()
        return loss.data.tobytes(), cell.weight.grad.tobytes()

    assert run() == run()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_property(values):
    out = ops.softmax(Tensor(values)).data
    assert np.all(out > 0)
    assert abs(out.sum() - 1) <= 1e-9
