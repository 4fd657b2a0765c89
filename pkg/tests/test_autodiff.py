import numpy as np
import pytest

from actground import autodiff as ad
from actground.autodiff import Tensor
from actground.gradcheck import check_gradients
from actground.optim import AdamState, adam_step
from actground.rng import RngStream


def t(data, rg=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


def test_relu_values():
    out = ad.relu(t([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_softmax_symmetry():
    out = ad.softmax(t([0.0, 0.0]))
    assert np.allclose(out.data, [0.5, 0.5])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    x = t(rng.normal(size=(7, 5)) * 10)
    out = ad.softmax(x)
    assert np.all(out.data >= 0)
    assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)


def test_matmul_hand_arithmetic():
    out = ad.matmul(t([[1.0, 2.0], [3.0, 4.0]]), t([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_op():
    with pytest.raises(ad.ShapeError) as ei:
        ad.matmul(t(np.zeros((2, 3))), t(np.zeros((2, 3))))
    assert "matmul" in str(ei.value)


def test_backward_quadratic():
    w = t([1.0, 2.0])
    loss = ad.tsum(ad.mul(w, w))
    loss.backward()
    assert np.array_equal(w.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    w = t([1.0, 2.0])
    with pytest.raises(ad.AutodiffError):
        ad.mul(w, w).backward()


def test_parameter_used_twice_sums_paths():
    w = t([3.0])
    # loss = w*w + 2*w  ->  dloss/dw = 2w + 2
    loss = ad.tsum(ad.add(ad.mul(w, w), ad.mul(w, Tensor([2.0]))))
    loss.backward()
    assert np.allclose(w.grad, [8.0])


def test_dropout_eval_is_identity():
    x = t(np.arange(12.0).reshape(3, 4))
    out = ad.dropout(x, 0.5, train=False, rng=None)
    assert np.array_equal(out.data, x.data)


def test_dropout_train_scales_kept_units():
    rng = np.random.default_rng(1)
    x = t(np.ones((200, 50)))
    out = ad.dropout(x, 0.5, train=True, rng=rng)
    kept = out.data[out.data != 0]
    assert np.allclose(kept, 2.0)
    assert abs((out.data != 0).mean() - 0.5) < 0.02


def test_cross_entropy_matches_manual():
    logits = t([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]])
    targets = np.array([1, 2])
    loss = ad.cross_entropy_from_logits(logits, targets)
    p = np.exp(logits.data - logits.data.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    expected = -(np.log(p[0, 1]) + np.log(p[1, 2])) / 2
    assert np.isclose(loss.item(), expected)


def test_embedding_out_of_range():
    table = t(np.zeros((4, 3)))
    with pytest.raises(ad.AutodiffError):
        ad.embedding(table, np.array([0, 4]))


def test_lstm_step_zero_weights():
    # all-zero weights/biases: gates are sigmoid(0)=0.5, candidate tanh(0)=0
    hid = 4
    x = t(np.random.default_rng(2).normal(size=(2, 3)), rg=False)
    h = t(np.zeros((2, hid)), rg=False)
    c0 = np.random.default_rng(3).normal(size=(2, hid))
    c = t(c0, rg=False)
    wx = t(np.zeros((3, 4 * hid)))
    wh = t(np.zeros((hid, 4 * hid)))
    b = t(np.zeros(4 * hid))
    h1, c1 = ad.lstm_step(x, h, c, wx, wh, b)
    assert np.allclose(c1.data, 0.5 * c0)
    assert np.allclose(h1.data, 0.5 * np.tanh(0.5 * c0))


def test_lstm_step_deterministic():
    rng = np.random.default_rng(4)
    args = [t(rng.normal(size=s)) for s in [(2, 3), (2, 4), (2, 4), (3, 16), (4, 16), (16,)]]
    h1, c1 = ad.lstm_step(*args)
    h2, c2 = ad.lstm_step(*args)
    assert np.array_equal(h1.data, h2.data)
    assert np.array_equal(c1.data, c2.data)


def test_lstm_step_gradcheck():
    rng = np.random.default_rng(5)
    tensors = [t(rng.normal(size=s) * 0.5)
               for s in [(2, 3), (2, 4), (2, 4), (3, 16), (4, 16), (16,)]]

    def fn():
        h1, c1 = ad.lstm_step(*tensors)
        return ad.tsum(ad.add(ad.mul(h1, h1), c1))

    worst = check_gradients(fn, tensors)
    assert worst < 1e-4


# ---------------------------------------------------------------------------
# per-op randomized gradient checks


def _op_cases(rng):
    """(name, builder) pairs; builder returns (tensors, scalar_fn)."""

    def unary(op):
        x = t(rng.normal(size=(3, 4)))
        return [x], lambda: ad.tsum(op(x))

    cases = {
        "relu": lambda: unary(lambda x: ad.mul(ad.relu(x), x)),
        "sigmoid": lambda: unary(ad.sigmoid),
        "tanh": lambda: unary(ad.tanh),
        "softmax": lambda: unary(lambda x: ad.mul(ad.softmax(x), x)),
        "log_softmax": lambda: unary(lambda x: ad.mul(ad.log_softmax(x), x)),
        "square": lambda: unary(ad.square),
        "mean": lambda: ([x := t(rng.normal(size=(2, 5)))], lambda: ad.tmean(ad.mul(x, x))),
    }

    def add_case():
        a, b = t(rng.normal(size=(3, 4))), t(rng.normal(size=(4,)))
        return [a, b], lambda: ad.tsum(ad.mul(ad.add(a, b), ad.add(a, b)))

    def sub_case():
        a, b = t(rng.normal(size=(3, 4))), t(rng.normal(size=(3, 4)))
        return [a, b], lambda: ad.tsum(ad.square(ad.sub(a, b)))

    def matmul_case():
        a, b = t(rng.normal(size=(3, 4))), t(rng.normal(size=(4, 2)))
        return [a, b], lambda: ad.tsum(ad.square(ad.matmul(a, b)))

    def concat_case():
        a, b = t(rng.normal(size=(2, 3))), t(rng.normal(size=(2, 2)))
        return [a, b], lambda: ad.tsum(ad.square(ad.concat([a, b], axis=1)))

    def reshape_case():
        a = t(rng.normal(size=(2, 6)))
        return [a], lambda: ad.tsum(ad.square(ad.reshape(a, (3, 4))))

    def narrow_case():
        a = t(rng.normal(size=(3, 6)))
        return [a], lambda: ad.tsum(ad.square(ad.narrow(a, 1, 2, 3)))

    def conv_case():
        x = t(rng.normal(size=(2, 4, 3, 2)))
        w = t(rng.normal(size=(3, 3, 2, 3)) * 0.5)
        b = t(rng.normal(size=(3,)))
        return [x, w, b], lambda: ad.tsum(ad.square(ad.conv2d_same(x, w, b)))

    def mean_pool_case():
        x = t(rng.normal(size=(2, 3, 4, 2)))
        return [x], lambda: ad.tsum(ad.square(ad.mean_pool_spatial(x)))

    def max_pool_case():
        x = t(rng.normal(size=(2, 3, 4, 2)))
        return [x], lambda: ad.tsum(ad.square(ad.max_pool_spatial(x)))

    def xent_case():
        x = t(rng.normal(size=(4, 5)))
        targets = rng.integers(0, 5, size=4)
        return [x], lambda: ad.cross_entropy_from_logits(x, targets)

    def embedding_case():
        table = t(rng.normal(size=(6, 3)))
        ids = rng.integers(0, 6, size=(2, 4))
        return [table], lambda: ad.tsum(ad.square(ad.embedding(table, ids)))

    def broadcast_case():
        a = t(rng.normal(size=(2, 3)))
        return [a], lambda: ad.tsum(ad.square(ad.broadcast_spatial(a, 2, 4)))

    def masked_xent_case():
        x = t(rng.normal(size=(5, 4)))
        targets = rng.integers(0, 4, size=5)
        mask = (rng.random(5) > 0.3).astype(float)
        return [x], lambda: ad.masked_cross_entropy_sum(x, targets, mask)

    def dropout_case():
        x = t(rng.normal(size=(4, 6)))
        seed = int(rng.integers(2 ** 31))
        return [x], lambda: ad.tsum(ad.square(
            ad.dropout(x, 0.5, train=True, rng=np.random.default_rng(seed))))

    cases.update({
        "broadcast_spatial": broadcast_case,
        "masked_cross_entropy": masked_xent_case,
        "dropout": dropout_case,
        "add": add_case, "sub": sub_case, "matmul": matmul_case,
        "concat": concat_case, "reshape": reshape_case, "narrow": narrow_case,
        "conv2d_same": conv_case, "mean_pool": mean_pool_case,
        "max_pool": max_pool_case, "cross_entropy": xent_case,
        "embedding": embedding_case,
    })
    return cases


@pytest.mark.parametrize("name", sorted(_op_cases(np.random.default_rng(0))))
def test_op_gradcheck(name):
    rng = np.random.default_rng(abs(hash(name)) % 2 ** 31)
    for _ in range(5):
        tensors, fn = _op_cases(rng)[name]()
        assert check_gradients(fn, tensors) < 1e-4


def test_random_composed_graphs():
    """Randomly composed graphs of supported ops vs finite differences."""
    rng = np.random.default_rng(77)
    for case in range(40):
        a = t(rng.normal(size=(2, 3)))
        b = t(rng.normal(size=(3, 3)))
        c = t(rng.normal(size=(3,)))

        def fn():
            h = ad.add(ad.matmul(a, b), c)
            for step in range(3):
                pick = (case + step) % 4
                if pick == 0:
                    h = ad.tanh(ad.matmul(h, b))
                elif pick == 1:
                    h = ad.add(ad.relu(h), ad.sigmoid(h))
                elif pick == 2:
                    h = ad.mul(ad.softmax(h), h)
                else:
                    h = ad.add(ad.matmul(h, b), c)
            return ad.tmean(ad.square(h))

        assert check_gradients(fn, [a, b, c]) < 1e-4


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_size():
    from actground.autodiff import Parameter
    p = Parameter(np.array([1.0]), "w")
    state = AdamState([p])
    p.grad = np.array([1.0])
    adam_step(p_state := state)
    # bias correction makes the normalized first step ~ lr
    assert np.isclose(p.data[0], 1.0 - 0.001, atol=1e-6)
    assert p_state.step_count == 1
    assert p.grad is None


def test_adam_zero_grad_no_change():
    from actground.autodiff import Parameter
    p = Parameter(np.array([1.0, -2.0]), "w")
    state = AdamState([p])
    for _ in range(5):
        p.grad = np.zeros(2)
        adam_step(state)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_missing_grad_named():
    from actground.autodiff import Parameter
    p = Parameter(np.array([1.0]), "mystery")
    state = AdamState([p])
    with pytest.raises(ad.AutodiffError, match="mystery"):
        adam_step(state)


def test_adam_quadratic_descent():
    # 100 steps on f(w) = (w-3)^2 from w=0 strictly decreases f at checkpoints
    from actground.autodiff import Parameter
    p = Parameter(np.array([0.0]), "w")
    state = AdamState([p], lr=0.05)
    losses = []
    for step in range(100):
        w = p
        loss = ad.tsum(ad.square(ad.sub(w, Tensor([3.0]))))
        loss.backward()
        if step % 10 == 0:
            losses.append(loss.item())
        adam_step(state)
    assert all(b < a for a, b in zip(losses, losses[1:]))


# ---------------------------------------------------------------------------
# RNG streams


def test_rng_substreams_reproducible():
    a = RngStream(123).substream("gumbel").random(10)
    b = RngStream(123).substream("gumbel").random(10)
    assert np.array_equal(a, b)


def test_rng_substreams_independent():
    s = RngStream(123)
    first = s.substream("data").random(5)
    # drawing from another substream must not perturb "data"
    s2 = RngStream(123)
    s2.substream("init").random(100)
    second = s2.substream("data").random(5)
    assert np.array_equal(first, second)


def test_rng_distinct_seeds_differ():
    a = RngStream(1).substream("data").random(8)
    b = RngStream(2).substream("data").random(8)
    assert not np.array_equal(a, b)
