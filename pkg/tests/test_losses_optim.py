import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cact import tensor as T
from cact.errors import ContractError, NonFiniteGradientError
from cact.gradcheck import check_gradients
from cact.losses import loss_cls, loss_joint, loss_seg, loss_weighted, one_hot, sample_weight
from cact.nn import Parameter
from cact.optim import RMSprop, rmsprop_step
from cact.tensor import Tensor

import oracles


def random_probs(rng, *shape, axis=1):
    return T.softmax(Tensor(rng.standard_normal(shape)), axis=axis).data


# -- classification loss -----------------------------------------------------

def test_perfect_prediction_costs_nothing():
    Y = one_hot([0, 2, 1], 3)
    assert loss_cls(Y, Tensor(Y.copy())).item() == 0.0


def test_uniform_prediction_costs_two_bits():
    Y = one_hot([0, 1, 2, 3], 4)
    assert loss_cls(Y, Tensor(np.full((4, 4), 0.25))).item() == pytest.approx(2.0, abs=1e-15)


def test_cls_matches_loops():
    rng = np.random.default_rng(0)
    Y, P = one_hot(rng.integers(0, 4, 9), 4), random_probs(rng, 9, 4)
    assert abs(loss_cls(Y, Tensor(P)).item() - oracles.cross_entropy_loops(Y, P)) < 1e-12


def test_unnormalized_predictions_rejected():
    with pytest.raises(ContractError):
        loss_cls(one_hot([0], 2), Tensor(np.array([[0.7, 0.7]])))


def test_probability_floor_keeps_loss_finite():
    value = loss_cls(one_hot([0], 2), Tensor(np.array([[0.0, 1.0]]))).item()
    assert value == pytest.approx(-math.log2(1e-12))


# -- sample weights ------------------------------------------------------------

@pytest.mark.parametrize("roi,expected", [(0.25, 4.0), (0.05, 10.0), (0.10, 10.0), (1.0, 1.0)])
def test_sample_weight_rule(roi, expected):
    assert sample_weight(roi, 0.10) == expected


@pytest.mark.parametrize("roi", [-0.1, 1.5])
def test_sample_weight_domain(roi):
    with pytest.raises(ContractError):
        sample_weight(roi)


@given(st.floats(0.0, 1.0), st.floats(0.01, 0.5))
def test_sample_weight_bounded(roi, alpha):
    assert 1.0 <= sample_weight(roi, alpha) <= 1.0 / alpha


def test_unit_weights_equal_cls_exactly():
    rng = np.random.default_rng(1)
    Y, P = one_hot(rng.integers(0, 4, 7), 4), Tensor(random_probs(rng, 7, 4))
    assert loss_weighted(Y, P, np.ones(7)).item() == loss_cls(Y, P).item()


def test_weighted_single_uniform_sample():
    assert loss_weighted(one_hot([3], 4), Tensor(np.full((1, 4), 0.25)), [10.0]).item() == pytest.approx(20.0)


def test_weighted_matches_loops():
    rng = np.random.default_rng(2)
    Y, P, W = one_hot(rng.integers(0, 3, 6), 3), random_probs(rng, 6, 3), rng.uniform(1, 10, 6)
    assert abs(loss_weighted(Y, Tensor(P), W).item() - oracles.cross_entropy_loops(Y, P, W)) < 1e-12


# -- segmentation and joint ----------------------------------------------------

def test_seg_matches_loops():
    rng = np.random.default_rng(3)
    S = one_hot(rng.integers(0, 4, (2, 3, 5)), 4, axis=1)
    P = random_probs(rng, 2, 4, 3, 5)
    assert abs(loss_seg(S, Tensor(P)).item() - oracles.segmentation_loss_loops(S, P)) < 1e-12


def _joint_inputs(seed=4):
    rng = np.random.default_rng(seed)
    Y = one_hot(rng.integers(0, 4, 3), 4)
    S = one_hot(rng.integers(0, 4, (3, 2, 2)), 4, axis=1)
    return Y, Tensor(random_probs(rng, 3, 4)), S, Tensor(random_probs(rng, 3, 4, 2, 2))


def test_joint_endpoints():
    Y, P, S, Ps = _joint_inputs()
    assert loss_joint(Y, P, S, Ps, 1.0).item() == loss_cls(Y, P).item()
    assert loss_joint(Y, P, S, Ps, 0.0).item() == loss_seg(S, Ps).item()


def test_joint_uniform_heads():
    Y = one_hot([0, 1], 4)
    S = one_hot(np.zeros((2, 2, 2), int), 4, axis=1)
    value = loss_joint(Y, Tensor(np.full((2, 4), 0.25)), S, Tensor(np.full((2, 4, 2, 2), 0.25)), 0.5)
    assert value.item() == pytest.approx(2.0)


@pytest.mark.parametrize("alpha", [0.0, 0.25, 0.5, 0.75, 1.0])
def test_joint_linear_in_alpha(alpha):
    Y, P, S, Ps = _joint_inputs(5)
    a, b = loss_cls(Y, P).item(), loss_seg(S, Ps).item()
    assert loss_joint(Y, P, S, Ps, alpha).item() == pytest.approx(alpha * a + (1 - alpha) * b, abs=1e-14)


def test_joint_rejects_alpha_outside_unit_interval():
    Y, P, S, Ps = _joint_inputs()
    with pytest.raises(ContractError):
        loss_joint(Y, P, S, Ps, 1.5)


def test_loss_gradients_through_softmax():
    rng = np.random.default_rng(6)
    logits = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    seg_logits = Tensor(rng.standard_normal((3, 4, 2, 2)), requires_grad=True)
    Y = one_hot([0, 3, 1], 4)
    S = one_hot(rng.integers(0, 4, (3, 2, 2)), 4, axis=1)
    W = [1.0, 4.0, 10.0]

    def loss():
        P, Ps = T.softmax(logits, 1), T.softmax(seg_logits, 1)
        return T.add(loss_weighted(Y, P, W), loss_joint(Y, P, S, Ps, 0.3))

    errs = check_gradients(loss, [("logits", logits), ("seg", seg_logits)])
    assert max(errs.values()) < 1e-6


# -- RMSprop -----------------------------------------------------------------------

def test_zero_gradient_leaves_parameters():
    p = Parameter(np.array([1.0, -2.0]))
    p.grad = np.zeros(2)
    RMSprop([("p", p)], lr=0.1).step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_single_step_closed_form():
    p = Parameter(np.array([0.0]))
    p.grad = np.array([1.0])
    state = {}
    rmsprop_step([("p", p)], state, lr=0.01, rho=0.9, eps=0.0)
    assert state["p"][0] == pytest.approx(0.1)
    assert p.data[0] == -0.01 / math.sqrt((1 - 0.9) * 1.0)
    assert p.data[0] == pytest.approx(-0.031623, abs=1e-6)


def test_state_mirrors_parameter_shapes():
    params = [("a", Parameter(np.zeros((2, 3)))), ("b", Parameter(np.zeros(4)))]
    opt = RMSprop(params)
    assert {k: v.shape for k, v in opt.state.items()} == {"a": (2, 3), "b": (4,)}


def test_quadratic_bowl_converges():
    p = Parameter(np.array([5.0]))
    opt = RMSprop([("p", p)], lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        T.tsum(T.mul(p, p)).backward()
        opt.step()
    assert abs(p.data[0]) < 0.1


def test_nan_gradient_names_parameter():
    good, bad = Parameter(np.ones(2)), Parameter(np.ones(2))
    good.grad, bad.grad = np.ones(2), np.array([1.0, np.nan])
    opt = RMSprop([("layer.weight", good), ("layer.bias", bad)], lr=0.1)
    with pytest.raises(NonFiniteGradientError, match="layer.bias"):
        opt.step()
    np.testing.assert_array_equal(good.data, [1.0, 1.0])  # nothing applied on abort


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(1e-4, 0.1), st.floats(0.0, 0.99))
def test_first_step_moves_against_gradient(g, lr, rho):
    p = Parameter(np.array([0.0]))
    p.grad = np.array([g])
    rmsprop_step([("p", p)], {}, lr=lr, rho=rho, eps=1e-8)
    if g != 0:
        assert np.sign(p.data[0]) == -np.sign(g)
        assert abs(p.data[0]) <= lr / math.sqrt(1 - rho) + 1e-12
