import numpy as np
import pytest

from conftest import numeric_grad, rel_err
from dynprune import tensor as T
from dynprune.errors import ConfigError, DomainError
from dynprune.grouping import (
    GroupLearnConfig,
    GroupParameters,
    alpha_gradient,
    group_learning_phase,
    group_regularizer,
    layer_scale,
    one_step_adapt,
    reg_grad_alpha,
    reg_grad_weight,
    reg_value,
    sample_alpha,
    upper_objective,
)
from dynprune.model import BatchNormSpec, ConvLayerSpec, LinearSpec, MaxPoolSpec, Model, NetworkSpec, ReLUSpec
from dynprune.pruning import discretize_alpha
from dynprune.tensor import Tensor


def tiny_spec():
    """One grouped conv (C_out=4, C_in=3, 3x3) feeding a classifier."""
    layers = (ConvLayerSpec(4, 3, grouped=True), BatchNormSpec(4), ReLUSpec(), MaxPoolSpec(), LinearSpec(36, 5))
    return NetworkSpec(layers, 5, (3, 6, 6))


def tiny_setup(seed=0, **cfg):
    r = np.random.default_rng(seed)
    model = Model.init(tiny_spec(), r)
    batch = (r.standard_normal((6, 3, 6, 6)), r.integers(0, 5, size=6))
    params = GroupParameters({"conv0": r.random((4, 2)) + 0.5}, tau=0.5, n_groups=2)
    config = GroupLearnConfig(**{"lam": 0.05, "unroll_lr": 0.1, **cfg})
    return model, batch, params, config, r


def loop_reg(w, alpha, mode="squared"):
    """Scalar-loop evaluation of the group regulariser for one layer."""
    c_out, c_in, kh, kw = w.shape
    total = 0.0
    for p in range(alpha.shape[1]):
        q = sum(np.sqrt(alpha[k, p]) for k in range(c_out))
        q = q * q if mode == "squared" else q
        for m in range(c_in):
            acc = 0.0
            for k in range(c_out):
                for i in range(kh):
                    for j in range(kw):
                        acc += (alpha[k, p] * w[k, m, i, j]) ** 2
            total += q * np.sqrt(acc)
    return total


# -- relaxation ------------------------------------------------------------------


def test_uniform_pi_zero_noise_gives_uniform_rows():
    params = GroupParameters({"l": np.ones((5, 3))}, tau=0.5, n_groups=3)
    s = sample_alpha(params, gumbel={"l": np.zeros((5, 3))})
    np.testing.assert_allclose(s.alpha["l"], 1 / 3, atol=1e-15)


def test_low_temperature_is_nearly_one_hot(rng):
    pi = np.exp(np.array([[0.0, 1.0], [2.0, 0.5], [0.0, 3.0]]))
    params = GroupParameters({"l": pi}, tau=0.01, n_groups=2)
    s = sample_alpha(params, gumbel={"l": np.zeros_like(pi)})
    assert np.all(s.alpha["l"].max(axis=1) > 0.99)
    assert list(s.alpha["l"].argmax(axis=1)) == list(pi.argmax(axis=1))


def test_rows_sum_to_one_and_are_interior(rng):
    params = GroupParameters({"l": rng.random((8, 4)) + 0.1}, tau=0.25, n_groups=4)
    for _ in range(100):
        a = sample_alpha(params, rng).alpha["l"]
        assert np.all(np.abs(a.sum(axis=1) - 1) < 1e-9)
        assert np.all((a > 0) & (a < 1))


def test_gumbel_max_frequencies():
    # argmax of a relaxed sample is the Gumbel-max sample of softmax(log pi)
    rng = np.random.default_rng(0)
    pi = np.array([[0.2, 0.5, 1.3]])
    params = GroupParameters({"l": pi}, tau=0.5, n_groups=3)
    n = 100_000
    g = rng.gumbel(size=(n, 3))
    a = T.softmax(Tensor((np.log(pi) + g) / params.tau), axis=1).data
    freq = np.bincount(a.argmax(axis=1), minlength=3) / n
    np.testing.assert_allclose(freq, pi[0] / pi.sum(), atol=0.01)
    # the library path agrees with the vectorised draw on a subsample
    for i in range(50):
        s = sample_alpha(params, gumbel={"l": g[i : i + 1]})
        np.testing.assert_allclose(s.alpha["l"], a[i : i + 1], atol=1e-14)


def test_nonpositive_pi_rejected():
    with pytest.raises(DomainError):
        sample_alpha(GroupParameters({"l": np.array([[1.0, 0.0]])}, 0.5, 2), np.random.default_rng(0))


def test_discretize_ties_and_loop_oracle(rng):
    params = GroupParameters({"a": np.array([[3.0, 1.0], [1.0, 1.0], [0.5, 2.0]])}, 0.5, 2)
    assert discretize_alpha(params)["a"].group_of_filter == (0, 0, 1)
    pi = rng.random((20, 4))
    got = discretize_alpha(GroupParameters({"b": pi}, 0.5, 4))["b"].group_of_filter
    expect = []
    for row in pi:
        best = 0
        for j in range(1, 4):
            if row[j] > row[best]:
                best = j
        expect.append(best)
    assert list(got) == expect


# -- regulariser ------------------------------------------------------------------


def test_regularizer_zero_weights():
    cfg = GroupLearnConfig()
    w = Tensor(np.zeros((4, 3, 3, 3)))
    assert group_regularizer({"l": w}, {"l": np.full((4, 2), 0.5)}, cfg).item() == 0.0


def test_regularizer_single_group_is_scaled_group_lasso(rng):
    w = rng.standard_normal((5, 3, 3, 3))
    lasso = sum(np.linalg.norm(w[:, m]) for m in range(3))
    assert reg_value(w, np.ones((5, 1))) == pytest.approx(25 * lasso, rel=1e-12)
    assert reg_value(w, np.ones((5, 1)), "sum") == pytest.approx(5 * lasso, rel=1e-12)


@pytest.mark.parametrize("mode", ["squared", "sum"])
def test_regularizer_matches_scalar_loops(rng, mode):
    w = rng.standard_normal((6, 4, 3, 3))
    alpha = rng.dirichlet(np.ones(3), size=6)
    cfg = GroupLearnConfig(quasi_norm=mode)
    got = group_regularizer({"l": Tensor(w)}, {"l": alpha}, cfg).item()
    expect = layer_scale(w.shape, cfg) * loop_reg(w, alpha, mode)
    assert abs(got - expect) <= 1e-10 * abs(expect)
    assert abs(reg_value(w, alpha, mode) - loop_reg(w, alpha, mode)) <= 1e-10 * abs(expect)


def test_regularizer_positively_homogeneous(rng):
    w = rng.standard_normal((4, 3, 3, 3))
    alpha = rng.dirichlet(np.ones(2), size=4)
    for c in (0.3, 2.0, 17.0):
        assert abs(reg_value(c * w, alpha) - c * reg_value(w, alpha)) < 1e-10 * c * reg_value(w, alpha)


def test_layer_scale():
    assert layer_scale((8, 8, 3, 3), GroupLearnConfig()) == pytest.approx(np.sqrt(72))
    assert layer_scale((8, 8, 3, 3), GroupLearnConfig(layer_scaling="none")) == 1.0


def test_closed_form_gradients_match_tape(rng):
    w = rng.standard_normal((4, 3, 3, 3))
    alpha = rng.dirichlet(np.ones(2), size=4)
    wt, at = Tensor(w, requires_grad=True), Tensor(alpha, requires_grad=True)
    cfg = GroupLearnConfig(layer_scaling="none")
    T.backward(group_regularizer({"l": wt}, {"l": at}, cfg))
    assert rel_err(wt.grad, reg_grad_weight(w, alpha)) < 1e-12
    assert rel_err(at.grad, reg_grad_alpha(w, alpha)) < 1e-12
    num = numeric_grad(lambda: reg_value(w, alpha), alpha)
    assert rel_err(at.grad, num) < 1e-6


# -- one-step adaptation ---------------------------------------------------------


def test_adapt_zero_lr_is_identity():
    model, batch, params, cfg, r = tiny_setup(unroll_lr=0.0)
    alpha = sample_alpha(params, r).alpha
    res = one_step_adapt(model, alpha, cfg, batch)
    for k, p in model.params.items():
        assert res.adapted[k].data.tobytes() == p.data.tobytes()


def test_adapt_without_regulariser_is_sgd():
    model, batch, params, cfg, r = tiny_setup(lam=0.0)
    alpha = sample_alpha(params, r).alpha
    res = one_step_adapt(model, alpha, cfg, batch)
    for p in model.parameters():
        p.zero_grad()
    T.backward(T.softmax_cross_entropy(model.forward(batch[0], "train", update_stats=False), batch[1]))
    for k, p in model.params.items():
        np.testing.assert_array_equal(res.adapted[k].data, p.data - 0.1 * p.grad)


def test_adapt_two_pass_oracle():
    model, batch, params, cfg, r = tiny_setup()
    alpha = sample_alpha(params, r).alpha
    before = model.state()
    res = one_step_adapt(model, alpha, cfg, batch)
    # pass 1: task loss only
    for p in model.parameters():
        p.zero_grad()
    T.backward(T.softmax_cross_entropy(model.forward(batch[0], "train", update_stats=False), batch[1]))
    g_loss = {k: p.grad.copy() for k, p in model.params.items()}
    # pass 2: regulariser only
    w = model.params["conv0.weight"]
    w.zero_grad()
    T.backward(group_regularizer({"conv0": w}, alpha, cfg))
    g_reg = w.grad.copy()
    for k in model.params:
        expect = before[k] - cfg.unroll_lr * g_loss[k]
        if k == "conv0.weight":
            expect = expect - cfg.unroll_lr * cfg.lam * g_reg
        np.testing.assert_allclose(res.adapted[k].data, expect, rtol=0, atol=1e-12)
        assert model.params[k].data.tobytes() == before[k].tobytes()


# -- alpha gradient --------------------------------------------------------------


def _objective(model, params, gumbel, cfg, batch):
    alpha = sample_alpha(params, gumbel=gumbel).alpha
    res = one_step_adapt(model, alpha, cfg, batch)
    with T.no_grad():
        return upper_objective(model, res.adapted, alpha, cfg, batch).item()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_alpha_gradient_matches_finite_differences(seed):
    model, batch, params, cfg, r = tiny_setup(seed)
    sample = sample_alpha(params, r, differentiable=True)
    got = alpha_gradient(model, params, sample, cfg, batch).pi_grad["conv0"]
    pi = params.logits["conv0"]
    num = numeric_grad(lambda: _objective(model, params, sample.gumbel, cfg, batch), pi, h=1e-5)
    assert rel_err(got, num) < 1e-4


def test_alpha_gradient_without_unrolling_is_regulariser_gradient():
    model, batch, params, cfg, r = tiny_setup(unroll_lr=0.0)
    sample = sample_alpha(params, r, differentiable=True)
    res = alpha_gradient(model, params, sample, cfg, batch)
    w = model.params["conv0.weight"].data
    expect = cfg.lam * layer_scale(w.shape, cfg) * reg_grad_alpha(w, sample.alpha["conv0"])
    np.testing.assert_allclose(res.alpha_grad["conv0"], expect, rtol=1e-13, atol=1e-16)


def test_alpha_gradient_zero_without_regulariser():
    model, batch, params, cfg, r = tiny_setup(lam=0.0)
    res = alpha_gradient(model, params, sample_alpha(params, r, differentiable=True), cfg, batch)
    assert not np.any(res.pi_grad["conv0"])


# -- training loop ---------------------------------------------------------------


def _toy_data(seed=0, n=96):
    r = np.random.default_rng(seed)
    return r.standard_normal((n, 3, 6, 6)), r.integers(0, 5, size=n)


def test_group_learning_is_deterministic():
    def run():
        model, _, _, _, _ = tiny_setup(3)
        cfg = GroupLearnConfig(epochs=2, batch_size=32, seed=5)
        m, p, h = group_learning_phase(model, _toy_data(), cfg)
        return m.state(), p.logits, h

    (s1, l1, h1), (s2, l2, h2) = run(), run()
    assert all(s1[k].tobytes() == s2[k].tobytes() for k in s1)
    assert l1["conv0"].tobytes() == l2["conv0"].tobytes()
    assert h1 == h2


def test_group_learning_history_and_positivity():
    model, _, _, _, _ = tiny_setup(4)
    cfg = GroupLearnConfig(epochs=2, batch_size=32)
    _, p, hist = group_learning_phase(model, _toy_data(), cfg)
    assert [row["epoch"] for row in hist] == [1, 2]
    assert {"loss", "reg", "lr", "entropy.conv0"} <= set(hist[0])
    assert hist[1]["lr"] == pytest.approx(0.09)
    assert np.all(p.logits["conv0"] > 0)


def test_group_learning_without_regulariser_matches_plain_sgd():
    from dynprune.optim import MomentumSGD

    x, y = _toy_data()
    cfg = GroupLearnConfig(lam=0.0, epochs=1, batch_size=32, seed=9)
    m1, _, _ = group_learning_phase(tiny_setup(6)[0], (x, y), cfg)

    m2 = tiny_setup(6)[0]
    rng = np.random.default_rng(9)
    opt = MomentumSGD(0.1, 0.9)
    order = rng.permutation(len(y))
    for s in range(0, len(y), 32):
        idx = order[s : s + 32]
        rng.gumbel(size=(4, 2))  # the loop draws noise each step
        for p in m2.parameters():
            p.zero_grad()
        T.backward(T.softmax_cross_entropy(m2.forward(x[idx], "train"), y[idx]))
        opt.step(m2.params, {k: p.grad for k, p in m2.params.items()})
    for k in m1.params:
        np.testing.assert_allclose(m1.params[k].data, m2.params[k].data, rtol=0, atol=1e-12)


def test_config_validation():
    with pytest.raises(ConfigError):
        GroupLearnConfig(lam=-1).validate()
    with pytest.raises(ConfigError):
        GroupLearnConfig(tau=0).validate()
    with pytest.raises(ConfigError):
        GroupLearnConfig(quasi_norm="cube").validate()
