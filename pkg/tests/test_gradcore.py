import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from reluplan import gradcore as gc
from reluplan.errors import ReluPlanError, ShapeError

import fdcheck
import gumbeloracle as go


@pytest.mark.parametrize("name", sorted(fdcheck.op_catalog(np.random.default_rng(0))))
def test_finite_differences_per_op(name):
    for i in range(10):
        rng = np.random.default_rng([7, i])
        inputs, fn = fdcheck.op_catalog(rng)[name]
        assert fdcheck.check(inputs, fn, rng) < fdcheck.TOL


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_mlp_finite_differences_property(seed):
    rng = np.random.default_rng(seed)
    inputs, fn = fdcheck.op_catalog(rng)["mlp3"]
    assert fdcheck.check(inputs, fn, rng) < fdcheck.TOL


def test_softmax_symmetric():
    np.testing.assert_allclose(gc.softmax(np.zeros(3)).value, [1 / 3] * 3)


def test_relu_derivative():
    x = gc.parameter([-1.0, 2.0])
    gc.tensor_sum(gc.relu(x)).backward()
    assert x.grad.tolist() == [0.0, 1.0]


def test_shared_node_visited_once():
    x = gc.parameter(3.0)
    y = x * x
    z = y + y  # 2x^2, so the gradient is 4x
    z.backward()
    assert x.grad == 12.0


def test_operator_overloads_with_numpy_left_operand():
    x = gc.parameter(np.eye(2))
    out = np.ones((1, 2)) @ x
    assert isinstance(out, gc.Tensor)
    gc.tensor_sum(2.0 * out - 1.0).backward()
    np.testing.assert_allclose(x.grad, 2.0 * np.ones((2, 2)))


def test_shape_errors():
    with pytest.raises(ShapeError):
        gc.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        gc.add(np.ones(3), np.ones(4))
    with pytest.raises(ShapeError):
        gc.Tensor(np.ones(3)).backward()


def test_cross_entropy_uniform():
    loss = gc.cross_entropy(np.zeros((5, 4)), np.array([0, 1, 2, 3, 0]))
    assert loss.item() == pytest.approx(np.log(4), abs=1e-15)


def test_kd_equals_ce_when_logits_match():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(6, 5))
    labels = rng.integers(0, 5, 6)
    assert gc.kd_loss(logits, logits.copy(), labels).item() == gc.cross_entropy(logits, labels).item()


def test_kd_distance_term():
    s, t = np.zeros((2, 3)), np.ones((2, 3))
    labels = np.array([0, 1])
    assert gc.kd_loss(s, t, labels).item() == pytest.approx(np.log(3) + 3.0)


def test_kd_teacher_receives_no_gradient():
    s, t = gc.parameter(np.zeros((2, 3))), gc.parameter(np.ones((2, 3)))
    gc.kd_loss(s, t, np.array([0, 1])).backward()
    assert t.grad is None and s.grad is not None


def test_label_out_of_range():
    with pytest.raises(ReluPlanError, match="label out of range"):
        gc.cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_gumbel_k1_always_one():
    rng = np.random.default_rng(0)
    assert all(gc.gumbel_sample(np.array([0.3]), rng).tolist() == [1.0] for _ in range(100))


def test_gumbel_dominated_logit():
    rng = np.random.default_rng(0)
    hits = sum(gc.gumbel_sample(np.array([1e6, 0, 0]), rng)[0] for _ in range(10_000))
    assert hits / 10_000 > 0.999


def test_gumbel_uniform_chi_square():
    assert go.chi2_pvalue(np.zeros(10), 100_000, seed=3) > 0.01


def test_gumbel_matches_direct_categorical_sampler():
    beta = np.random.default_rng(5).normal(size=10)
    rng = np.random.default_rng(6)
    ours = np.zeros(10)
    for _ in range(50_000):
        ours += gc.gumbel_sample(beta, rng)
    direct = np.bincount(np.random.default_rng(7).choice(10, 50_000, p=go.softmax(beta)), minlength=10)
    table = np.vstack([ours, direct])
    table = table[:, table.min(axis=0) > 0]
    assert stats.chi2_contingency(table).pvalue > 0.01


def test_gumbel_non_finite():
    with pytest.raises(ReluPlanError):
        gc.gumbel_sample(np.array([0.0, np.nan]), np.random.default_rng(0))


@given(st.lists(st.floats(-20, 20), min_size=1, max_size=8), st.floats(-1e3, 1e3), st.integers(0, 2**32 - 1))
def test_gumbel_shift_invariance_seeded(beta, c, seed):
    beta = np.array(beta)
    a = gc.gumbel_sample(beta, np.random.default_rng(seed))
    b = gc.gumbel_sample(beta + c, np.random.default_rng(seed))
    assert a.tolist() == b.tolist()


def test_gumbel_shift_invariance_statistical():
    beta = np.array([0.5, -1.0, 2.0, 0.0])
    counts = []
    for shift, seed in ((0.0, 11), (250.0, 12)):
        rng = np.random.default_rng(seed)
        c = np.zeros(4)
        for _ in range(20_000):
            c += gc.gumbel_sample(beta + shift, rng)
        counts.append(c)
    assert stats.chi2_contingency(np.vstack(counts)).pvalue > 0.01


def test_st_forward_is_gumbel_sample_with_same_noise():
    rng = np.random.default_rng(2)
    beta = rng.normal(size=6)
    noise = gc.gumbel_noise(rng, 6)
    draw = gc.gumbel_softmax_st(gc.Tensor(beta), 0.7, rng, noise=noise)
    assert draw.hard.value.tolist() == gc.gumbel_sample(beta, rng, noise=noise).tolist()
    assert draw.index == int(np.argmax(draw.hard.value))


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(1e-3, 1e6), st.integers(0, 2**32 - 1))
def test_st_relaxed_is_distribution(beta, tau, seed):
    draw = gc.gumbel_softmax_st(gc.Tensor(np.array(beta)), tau, np.random.default_rng(seed))
    r = draw.relaxed.value
    assert np.all(r >= 0) and abs(r.sum() - 1.0) <= 1e-12


def test_st_gradient_flows_through_relaxed_only():
    beta = gc.parameter(np.array([0.1, -0.3, 0.2]))
    rng = np.random.default_rng(4)
    noise = gc.gumbel_noise(rng, 3)
    w = np.array([1.0, 2.0, -1.0])
    draw = gc.gumbel_softmax_st(beta, 0.5, rng, noise=noise)
    gc.tensor_sum(gc.mul(draw.hard, w)).backward()
    hard_grad = beta.grad.copy()
    beta2 = gc.parameter(beta.value)
    relaxed = gc.gumbel_softmax_st(beta2, 0.5, rng, noise=noise).relaxed
    gc.tensor_sum(gc.mul(relaxed, w)).backward()
    np.testing.assert_allclose(hard_grad, beta2.grad, rtol=0, atol=1e-15)


def test_st_bad_tau():
    for tau in (0.0, -1.0):
        with pytest.raises(ReluPlanError):
            gc.gumbel_softmax_st(gc.Tensor(np.zeros(3)), tau, np.random.default_rng(0))


def test_st_high_tau_is_uniform():
    rng = np.random.default_rng(8)
    for _ in range(200):
        beta = rng.uniform(-10, 10, 10)
        r = gc.gumbel_softmax_st(gc.Tensor(beta), 1e6, rng).relaxed.value
        assert np.abs(r - 0.1).max() < 1e-3


def test_st_low_tau_is_one_hot_outside_near_ties():
    beta = np.random.default_rng(9).normal(size=10)
    dist, clear, threshold = go.low_tau_draws(beta, 1e-3, 5000, seed=10)
    assert np.all(dist[clear] <= 1e-3)
    p = go.near_tie_probability(beta, threshold)
    ties = int((~clear).sum())
    assert stats.binomtest(ties, clear.size, p).pvalue > 0.01


def test_near_tie_oracle_against_simulation():
    beta = np.array([1.0, 0.0, -0.5])
    rng = np.random.default_rng(0)
    s = np.sort(np.log(go.softmax(beta)) + rng.gumbel(size=(200_000, 3)), axis=1)
    empirical = np.mean(s[:, -1] - s[:, -2] < 0.3)
    assert empirical == pytest.approx(go.near_tie_probability(beta, 0.3), abs=4e-3)


def test_seeded_determinism():
    def seq(seed):
        rng = np.random.default_rng(seed)
        return b"".join(gc.gumbel_sample(np.zeros(7), rng).tobytes() for _ in range(50))

    assert seq(42) == seq(42) and seq(42) != seq(43)


def test_linear_tau():
    assert gc.linear_tau(0, 600, 1000, 0.1) == 1000
    assert gc.linear_tau(599, 600, 1000, 0.1) == pytest.approx(0.1)
    assert gc.linear_tau(0, 1, 5, 1) == 5


def test_sgd_and_adam_minimize_quadratic():
    for make in (lambda p: gc.SGD(p, lr=0.1, weight_decay=0), lambda p: gc.Adam(p, lr=0.1, weight_decay=0)):
        x = gc.parameter([3.0, -2.0])
        opt = make([x])
        for _ in range(300):
            opt.zero_grad()
            gc.tensor_sum(gc.square(x)).backward()
            opt.step()
        assert np.abs(x.value).max() < 1e-2


def test_clip_grad_norm():
    x = gc.parameter([3.0, 4.0])
    x.grad = np.array([3.0, 4.0])
    assert gc.clip_grad_norm([x], 1.0) == 5.0
    assert np.linalg.norm(x.grad) == pytest.approx(1.0)


def test_snapshot_round_trip():
    params = [gc.parameter(np.arange(6.0).reshape(2, 3)), gc.parameter([7.5])]
    blob = gc.snapshot(params)
    assert blob[:8] == (7).to_bytes(8, "little")
    assert len(blob) == 8 + 7 * 8
    fresh = [gc.parameter(np.zeros((2, 3))), gc.parameter([0.0])]
    gc.restore(fresh, gc.load_snapshot(blob))
    assert gc.snapshot(fresh) == blob
    with pytest.raises(ShapeError):
        gc.load_snapshot(blob[:-8])
    with pytest.raises(ShapeError):
        gc.restore(fresh[:1], gc.load_snapshot(blob))


def test_harness_catches_slightly_wrong_gradient():
    def bad_exp(x):
        x = gc.as_tensor(x)
        out = np.exp(x.value)
        return gc.Tensor(out, parents=(x,), backward=lambda g: x._acc(1.001 * g * out))

    rng = np.random.default_rng(0)
    assert fdcheck.check([rng.uniform(-2, 2, (3, 4))], bad_exp, rng) > 1e-5
