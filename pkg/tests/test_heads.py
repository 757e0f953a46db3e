import dataclasses
import math

import numpy as np
import pytest

from kspace import autodiff as ad
from kspace.autodiff import Tape
from kspace.heads import (EpisodeBatch, FrozenIclHead, adv_forward_loss, icl_predict, icl_probabilities,
                          init_adversary, main_loss)

from helpers import central_diff, rel_err


def test_query_matching_a_support_point_saturates():
    head = FrozenIclHead(4)
    zs = 40.0 * np.eye(4)[:3]
    p = icl_probabilities(head, zs, [1, 0, 0], zs[:1])
    assert p[0] == pytest.approx(0.99)


def test_equidistant_balanced_support_gives_half():
    head = FrozenIclHead(4)
    zs = np.eye(4)
    p = icl_probabilities(head, zs, [1, 0, 1, 0], np.zeros((1, 4)))
    assert p[0] == pytest.approx(0.5, abs=1e-15)


def test_three_support_hand_case():
    head = FrozenIclHead(4)  # temperature 2
    zs = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 2.0, 0]])
    zq = np.array([[2.0, 1.0, 1.0, 0]])
    logits = np.array([2.0, 1.0, 2.0]) / 2.0
    w = np.exp(logits) / np.exp(logits).sum()
    want = w[0] * 1 + w[1] * 0 + w[2] * 1
    assert icl_probabilities(head, zs, [1, 0, 1], zq)[0] == pytest.approx(want, abs=1e-15)


def test_probabilities_stay_clipped():
    rng = np.random.default_rng(0)
    head = FrozenIclHead(8)
    p = icl_probabilities(head, 50 * rng.normal(size=(10, 8)), rng.integers(0, 2, 10) | np.eye(1, 10, 0, int)[0],
                          50 * rng.normal(size=(30, 8)))
    assert np.all((p >= 0.01) & (p <= 0.99))


def test_single_class_support_is_a_contract_error():
    with pytest.raises(ad.ContractError):
        icl_probabilities(FrozenIclHead(2), np.eye(2), [1, 1], np.eye(2))
    with pytest.raises(ad.ContractError):
        EpisodeBatch(np.array([0, 1]), np.array([1, 1]), np.array([2]), np.array([0])).validate()
    with pytest.raises(ad.ContractError):
        EpisodeBatch(np.array([0, 1]), np.array([1, 0]), np.array([1]), np.array([0])).validate()


def test_head_is_frozen():
    head = FrozenIclHead(16)
    assert head.temperature == 4.0
    with pytest.raises(dataclasses.FrozenInstanceError):
        head.smoothing = 0.1


def test_main_loss_values():
    tape = Tape()
    assert main_loss(tape.constant([[0.99]]), [1]).value[0, 0] == pytest.approx(-math.log(0.99))
    assert main_loss(tape.constant([[0.5], [0.5]]), [1, 0]).value[0, 0] == pytest.approx(math.log(2))
    rng = np.random.default_rng(1)
    p, y = rng.uniform(0.05, 0.95, 20), rng.integers(0, 2, 20)
    want = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert main_loss(tape.constant(p[:, None]), y).value[0, 0] == pytest.approx(want, rel=1e-14)


def test_icl_gradient_reaches_query_and_support():
    rng = np.random.default_rng(2)
    zs, zq = rng.normal(size=(5, 4)), rng.normal(size=(3, 4))
    ys, yq = np.array([1, 0, 1, 0, 0]), np.array([1, 0, 1])
    head = FrozenIclHead(4)

    def loss(tape, a, b):
        return main_loss(icl_predict(head, a, ys, b), yq)

    tape = Tape()
    g = tape.backward_from(loss(tape, tape.leaf(zs, name="zs"), tape.leaf(zq, name="zq")))
    for name, arr in (("zs", zs), ("zq", zq)):
        def f():
            t = Tape()
            return loss(t, t.constant(zs), t.constant(zq)).value[0, 0]
        num = central_diff(f, arr)
        assert rel_err(g[name], num) < 1e-6
        assert np.abs(g[name]).sum() > 0


def test_zero_adversary_has_log2_loss_and_zero_row_gradients():
    params = {k: np.zeros_like(v) for k, v in init_adversary(6, np.random.default_rng(0)).items()}
    res = adv_forward_loss(params, np.random.default_rng(1).normal(size=(4, 6)), [1, 0, 1, 1])
    assert res.loss == pytest.approx(math.log(2))
    assert not res.row_grads.any()


def test_adversary_row_gradient_closed_form():
    rng = np.random.default_rng(3)
    params = init_adversary(6, rng)
    h = rng.normal(size=(4, 6))
    y = np.array([1, 0, 1, 0])
    res = adv_forward_loss(params, h, y)
    a = h @ params["adv.W1"] + params["adv.b1"]
    sig = 1 / (1 + np.exp(-a))
    dsilu = sig * (1 + a * (1 - sig))
    logit = (a * sig) @ params["adv.W2"] + params["adv.b2"]
    p = 1 / (1 + np.exp(-logit[:, 0]))
    want = (p - y)[:, None] * ((dsilu * params["adv.W2"][:, 0]) @ params["adv.W1"].T)
    assert np.allclose(res.row_grads, want, atol=1e-13)


def test_adversary_row_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    params = init_adversary(6, rng)
    h = rng.normal(size=(3, 6))
    y = np.array([0, 1, 1])
    res = adv_forward_loss(params, h, y)
    for i in range(3):
        row = h[i:i + 1].copy()
        num = central_diff(lambda: adv_forward_loss(params, row, y[i:i + 1]).loss, row)
        assert rel_err(res.row_grads[i:i + 1], num) < 1e-6


def test_duplicated_row_duplicates_gradient():
    rng = np.random.default_rng(5)
    params = init_adversary(4, rng)
    h = rng.normal(size=(2, 4))
    res = adv_forward_loss(params, np.vstack([h, h[:1]]), [1, 0, 1])
    assert np.array_equal(res.row_grads[0], res.row_grads[2])


def test_adversary_param_gradients_belong_to_mean_loss():
    rng = np.random.default_rng(6)
    params = init_adversary(4, rng)
    h = rng.normal(size=(5, 4))
    y = rng.integers(0, 2, 5)
    res = adv_forward_loss(params, h, y)
    W = params["adv.W2"]
    num = central_diff(lambda: adv_forward_loss(params, h, y).loss, W)
    assert rel_err(res.param_grads["adv.W2"], num) < 1e-6
