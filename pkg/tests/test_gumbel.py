import math

import numpy as np
import pytest

from actground import autodiff as ad
from actground.autodiff import Tensor
from actground.gradcheck import check_gradients


def test_zero_noise_is_argmax():
    logits = Tensor(np.array([[5.0, 0.0, 0.0]]), requires_grad=True)
    out = ad.gumbel_softmax_st(logits, noise_override=np.zeros((1, 3)))
    assert np.array_equal(out.data, [[1.0, 0.0, 0.0]])


def test_rows_exactly_one_hot():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(20, 30)))
    out = ad.gumbel_softmax_st(logits, rng=rng)
    assert np.all(np.isin(out.data, [0.0, 1.0]))
    assert np.array_equal(out.data.sum(axis=-1), np.ones(20))


def test_k_less_than_two_rejected():
    with pytest.raises(ad.AutodiffError):
        ad.gumbel_softmax_st(Tensor(np.zeros((3, 1))), rng=np.random.default_rng(0))


def test_sample_frequencies_match_softmax():
    # logits [ln 2, 0]: Gumbel-max sampling hits category 0 w.p. 2/3
    rng = np.random.default_rng(42)
    n = 100_000
    logits = Tensor(np.tile([math.log(2.0), 0.0], (n, 1)))
    out = ad.gumbel_softmax_st(logits, rng=rng)
    freq = out.data[:, 0].mean()
    assert abs(freq - 2.0 / 3.0) < 0.01


def test_backward_matches_soft_relaxation():
    # with fixed noise, the ST gradient equals the finite-difference
    # gradient of sum(w * softmax(logits + noise))
    rng = np.random.default_rng(7)
    logits = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    noise = rng.gumbel(size=(4, 5))
    w = rng.normal(size=(4, 5))

    def st_fn():
        out = ad.gumbel_softmax_st(logits, noise_override=noise)
        return ad.tsum(ad.mul(out, Tensor(w)))

    def soft_fn():
        out = ad.softmax(ad.add(logits, Tensor(noise)))
        return ad.tsum(ad.mul(out, Tensor(w)))

    logits.grad = None
    st_fn().backward()
    st_grad = logits.grad.copy()

    logits.grad = None
    assert check_gradients(soft_fn, [logits]) < 1e-4
    soft_fn().backward()
    assert np.allclose(st_grad, logits.grad, rtol=1e-10)


def test_train_zero_noise_reduces_to_mode():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.normal(size=(6, 4)))
    st = ad.gumbel_softmax_st(logits, noise_override=np.zeros((6, 4)))
    mode = np.zeros((6, 4))
    mode[np.arange(6), logits.data.argmax(axis=1)] = 1.0
    assert np.array_equal(st.data, mode)
