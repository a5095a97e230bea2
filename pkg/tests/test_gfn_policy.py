import io
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from retention_lab.exceptions import CheckpointError, NonFiniteError
from retention_lab.gfn_policy import (
    FlowPolicy,
    GaussianParams,
    Hyper,
    Transition,
    action_to_slate,
    backward_prob,
    batch_db_loss,
    build_networks,
    check_finite_grads,
    db_loss,
    decomposed_residual,
    flow_value,
    forward_log_density,
    forward_policy,
    immediate_flow,
    load_checkpoint,
    make_optimizers,
    reward_integrate,
    sample_action,
    save_checkpoint,
    train_step,
)
from retention_lab.nn_core import ParamSet, gradient_check
from retention_lab.state_encoder import encode_state


def _zero(params: ParamSet) -> None:
    for _, value, _ in params.items():
        value[...] = 0.0


def _zeroed(nets):
    for name in ("forward", "backward", "flow"):
        _zero(getattr(nets, name))
    return nets


# --- forward policy -------------------------------------------------

def test_zero_sigma_head(nets, encoder_spec):
    _zero(nets.forward)
    g = forward_policy(np.ones(encoder_spec.state_dim), nets.forward, sigma_min=0.05)
    np.testing.assert_allclose(g.sigma, math.log(2.0) + 0.05)
    np.testing.assert_array_equal(g.mu, 0.0)


def test_sigma_floor_and_determinism(nets, encoder_spec, rng):
    states = 20.0 * rng.standard_normal((1000, encoder_spec.state_dim))
    g = forward_policy(states, nets.forward, sigma_min=0.05)
    assert np.all(g.sigma >= 0.05)
    again = forward_policy(states, nets.forward, sigma_min=0.05)
    np.testing.assert_array_equal(g.mu, again.mu)


def test_sample_action_reparameterized(rng):
    g = GaussianParams(mu=np.array([0.3, -1.0]), sigma=np.array([0.5, 2.0]))
    np.testing.assert_array_equal(sample_action(g, rng, z=np.zeros(2)), g.mu)
    draws = np.stack([sample_action(g, rng) for _ in range(100_000)])
    assert np.all(np.abs(draws.mean(axis=0) - g.mu) <= 4 * g.sigma / np.sqrt(100_000))


def test_sample_action_deterministic_per_seed():
    g = GaussianParams(mu=np.zeros(3), sigma=np.ones(3))
    a = [sample_action(g, np.random.default_rng(4)) for _ in range(2)]
    np.testing.assert_array_equal(a[0], a[1])


# --- slates ---------------------------------------------------------

def test_top_k_example():
    items = np.array([[0.9, 0.0], [0.5, 0.5], [0.1, 1.0]])
    assert action_to_slate(np.array([1.0, 0.0]), items, 2) == [0, 1]


def test_zero_action_ties_break_on_smaller_id(rng):
    items = rng.standard_normal((10, 4))
    assert action_to_slate(np.zeros(4), items, 3) == [0, 1, 2]


def test_slate_larger_than_catalog():
    with pytest.raises(ValueError):
        action_to_slate(np.ones(2), np.ones((3, 2)), 4)


@given(st.integers(-6, 6), st.integers(0, 2**32 - 1))
def test_slate_invariant_under_positive_scaling(exponent, seed):
    rng = np.random.default_rng(seed)
    items = rng.standard_normal((25, 4))
    a = rng.standard_normal(4)
    assert action_to_slate(a, items, 5) == action_to_slate(a * 2.0 ** exponent, items, 5)


# --- Gaussian density -----------------------------------------------

def test_standard_normal_log_density_at_mean():
    g = GaussianParams(mu=np.array([1.3]), sigma=np.array([1.0]))
    assert forward_log_density(g, np.array([1.3])) == pytest.approx(-0.918939, abs=1e-6)
    assert math.exp(forward_log_density(g, np.array([1.3]))) == pytest.approx(0.398942, abs=1e-6)


def test_log_density_at_mean_any_sigma():
    sigma = np.array([0.2, 1.5, 3.0])
    g = GaussianParams(mu=np.array([1.0, 2.0, 3.0]), sigma=sigma)
    expected = -np.sum(np.log(sigma * np.sqrt(2.0 * np.pi)))
    assert forward_log_density(g, g.mu) == pytest.approx(expected, abs=1e-12)


def test_density_integrates_to_one():
    mu, sigma, n = 0.4, 0.7, 160_000
    width = 16.0 * sigma / n
    grid = mu - 8.0 * sigma + width * (np.arange(n) + 0.5)
    g = GaussianParams(mu=np.full((n, 1), mu), sigma=np.full((n, 1), sigma))
    total = np.exp(forward_log_density(g, grid[:, None])).sum() * width
    assert total == pytest.approx(1.0, abs=1e-6)


def test_log_density_matches_scalar_formula(rng):
    for _ in range(100):
        mu = rng.standard_normal(3)
        sigma = rng.uniform(0.05, 3.0, size=3)
        a = rng.standard_normal(3) * 2
        expected = math.fsum(
            -0.5 * ((x - m) / s) ** 2 - math.log(s) - 0.5 * math.log(2 * math.pi)
            for x, m, s in zip(a, mu, sigma)
        )
        assert forward_log_density(GaussianParams(mu, sigma), a) == pytest.approx(expected, abs=1e-10)


# --- flow and backward estimators -----------------------------------

def test_zero_flow_network(nets, encoder_spec):
    _zero(nets.flow)
    assert flow_value(np.ones(encoder_spec.state_dim), nets.flow) == 0.5


def test_flow_in_open_interval(nets, encoder_spec, rng):
    values = flow_value(rng.standard_normal((1000, encoder_spec.state_dim)), nets.flow)
    assert np.all((values > 0.0) & (values < 1.0))


def test_flow_clamp_keeps_log_finite(nets, encoder_spec):
    last = max(n for n in nets.flow.names() if n.startswith("b"))
    nets.flow.value(last)[...] = -1000.0
    value = flow_value(np.zeros(encoder_spec.state_dim), nets.flow)
    assert value > 0.0 and np.isfinite(np.log(value))


def test_backward_prob_zero_and_batch_order(nets, encoder_spec, hyper, rng):
    s = rng.standard_normal((5, encoder_spec.state_dim))
    a = rng.standard_normal((5, hyper.d_action))
    s2 = rng.standard_normal((5, encoder_spec.state_dim))
    forward = backward_prob(s, a, s2, nets.backward)
    order = np.array([3, 0, 4, 1, 2])
    np.testing.assert_allclose(backward_prob(s[order], a[order], s2[order], nets.backward), forward[order])
    _zero(nets.backward)
    assert backward_prob(s[0], a[0], s2[0], nets.backward) == 0.5


# --- reward integration ---------------------------------------------

def test_reward_integrate_examples():
    assert reward_integrate(0.5, [0.2, 0.3], 1.0) == pytest.approx(0.5 * math.exp(0.5), abs=1e-9)
    assert reward_integrate(0.5, [0.2, 0.3], 1.0) == pytest.approx(0.824361, abs=1e-6)
    assert reward_integrate(0.25, [0.2, 0.3], 0.0) == 0.25
    assert reward_integrate(0.25, [0.0, 0.0], 1.0) == 0.25


def test_reward_integrate_large_exponent():
    assert np.isfinite(reward_integrate(0.5, [300.0, 300.0], 1.0))
    with pytest.raises(NonFiniteError):
        reward_integrate(0.5, [400.0, 400.0], 1.0)


def test_immediate_flow_examples():
    assert immediate_flow([]) == 1.0
    assert immediate_flow([math.log(2), math.log(3)]) == pytest.approx(6.0, rel=1e-12)
    assert 0.5 * immediate_flow([math.log(2)]) ** 1.0 == pytest.approx(1.0, rel=1e-12)


# --- transitions and the detailed-balance loss ----------------------

def test_transition_validation(transitions):
    t = transitions[0]
    with pytest.raises(ValueError):
        replace(t, reward=-0.1)
    with pytest.raises(ValueError):
        replace(t, is_terminal=not t.is_terminal)


def _balanced_hyper(hyper, action):
    """beta_B chosen so that P_F + beta_F == P_B + beta_B for zeroed networks."""
    g = GaussianParams(np.zeros(hyper.d_action), np.full(hyper.d_action, math.log(2.0) + hyper.sigma_min))
    density = math.exp(forward_log_density(g, action))
    return replace(hyper, beta_F=1.0, beta_B=0.5 + density)


def test_balanced_transition_has_zero_loss(nets, hyper, transitions):
    _zeroed(nets)
    t = next(t for t in transitions if not t.is_terminal)
    t = replace(t, action=np.zeros(hyper.d_action), reward=0.0)
    h = _balanced_hyper(hyper, t.action)
    assert db_loss(t, nets, h) == pytest.approx(0.0, abs=1e-20)
    assert db_loss(replace(t, reward=0.3), nets, h) == pytest.approx(0.09, abs=1e-12)


def test_terminal_loss_example(nets, hyper, transitions):
    _zeroed(nets)
    t = replace(next(t for t in transitions if t.is_terminal), retention=0.5)
    assert db_loss(t, nets, replace(hyper, beta_r=0.5)) == pytest.approx(0.480453, abs=1e-6)


def _retention_only_residual(t, nets, hyper):
    spec = nets.encoder_spec
    s = encode_state(t.request.features, t.request.history, nets.encoder, spec)
    log_flow = math.log(flow_value(s, nets.flow))
    if t.is_terminal:
        return log_flow - math.log(t.retention + hyper.beta_r)
    s_next = encode_state(t.next_request.features, t.next_request.history, nets.encoder, spec)
    density = math.exp(forward_log_density(forward_policy(s, nets.forward, hyper.sigma_min), t.action))
    p_b = backward_prob(s, t.action, s_next, nets.backward)
    return (
        log_flow
        + math.log(density + hyper.beta_F)
        - math.log(flow_value(s_next, nets.flow))
        - math.log(p_b + hyper.beta_B)
    )


def test_alpha_zero_is_retention_only_loss(nets, hyper, random_transitions):
    h = replace(hyper, alpha=0.0)
    result = batch_db_loss(random_transitions, nets, h)
    expected = np.array([_retention_only_residual(t, nets, h) for t in random_transitions])
    np.testing.assert_allclose(result.residuals, expected, atol=1e-12, rtol=0)
    np.testing.assert_allclose(result.losses, expected ** 2, atol=1e-12, rtol=0)


def test_decomposed_flow_matches_residual(nets, hyper, random_transitions):
    result = batch_db_loss(random_transitions, nets, hyper)
    steps = [i for i, t in enumerate(random_transitions) if not t.is_terminal]
    decomposed = np.array([decomposed_residual(random_transitions[i], nets, hyper) for i in steps])
    np.testing.assert_allclose(decomposed, result.residuals[steps], atol=1e-12, rtol=0)


def test_decomposed_residual_tracks_the_networks(nets, hyper, transitions):
    t = next(t for t in transitions if not t.is_terminal)
    before = decomposed_residual(t, nets, hyper)
    nets.backward.value("b1")[...] += 0.5
    assert decomposed_residual(t, nets, hyper) != before


def test_sif_moves_rewards_to_terminal(nets, hyper, transitions):
    plain = batch_db_loss(transitions, nets, hyper)
    sif = batch_db_loss(transitions, nets, replace(hyper, sif=True))
    for i, t in enumerate(transitions):
        if t.is_terminal:
            target = np.logaddexp(math.log(t.retention) + hyper.alpha * t.session_reward, math.log(hyper.beta_r))
            assert sif.residuals[i] == pytest.approx(sif.terms["log_flow_t"][i] - target, abs=1e-12)
        else:
            assert sif.residuals[i] == pytest.approx(plain.residuals[i] + hyper.alpha * t.reward, abs=1e-12)


def test_non_finite_residual_names_transition(nets, hyper, transitions):
    batch = list(transitions[:4])
    batch[2] = replace(batch[2], reward=float("nan"))
    with pytest.raises(NonFiniteError) as info:
        batch_db_loss(batch, nets, hyper)
    assert info.value.index == 2


@pytest.mark.parametrize("sif", [False, True])
def test_all_networks_pass_gradient_check(nets, hyper, transitions, sif):
    h = replace(hyper, sif=sif)

    def loss() -> float:
        nets.zero_grad()
        return batch_db_loss(transitions, nets, h, compute_grad=True).mean_loss

    for name, params in nets.all().items():
        report = gradient_check(loss, params)
        assert report.passed, (name, report)


def test_backward_network_receives_gradient(nets, hyper, transitions):
    nets.zero_grad()
    batch_db_loss(transitions, nets, hyper, compute_grad=True)
    assert any(grad.any() for _, _, grad in nets.backward.items())


# --- training -------------------------------------------------------

def test_train_step_is_deterministic(nets, hyper, transitions):
    batch = transitions[: hyper.batch_size]
    a, b = nets.copy(), nets.copy()
    loss_a = train_step(batch, a, make_optimizers(a), hyper)
    loss_b = train_step(batch, b, make_optimizers(b), hyper)
    assert loss_a == loss_b


def test_zero_learning_rates_freeze_parameters(nets, hyper, transitions):
    h = replace(hyper, lr_flow=0.0, lr_forward=0.0, lr_backward=0.0)
    batch = transitions[: h.batch_size]
    before = nets.copy()
    loss = train_step(batch, nets, make_optimizers(nets), h)
    assert loss == batch_db_loss(batch, nets, h).mean_loss
    for name, params in nets.all().items():
        for key, value, _ in params.items():
            np.testing.assert_array_equal(value, before.all()[name].value(key))


def test_train_step_batch_checks(nets, hyper, transitions):
    with pytest.raises(ValueError):
        train_step([], nets, make_optimizers(nets), hyper)
    with pytest.raises(ValueError):
        train_step(transitions[: hyper.batch_size - 1], nets, make_optimizers(nets), hyper)


def test_training_reduces_loss_on_fixed_batch(nets, hyper, transitions):
    h = replace(hyper, lr_flow=0.01, lr_forward=0.01, lr_backward=0.01)
    batch = transitions[: h.batch_size]
    opt = make_optimizers(nets)
    first = batch_db_loss(batch, nets, h).mean_loss
    for _ in range(300):
        last = train_step(batch, nets, opt, h)
    assert last <= 0.5 * first


def test_ncd_context_parameters_stay_fixed(encoder_spec, hyper, transitions):
    nets = build_networks(replace(encoder_spec, ncd=True), hyper, np.random.default_rng(2))
    before = {n: v.copy() for n, v, _ in nets.encoder.items() if n.startswith("ctx_")}
    train_step(transitions[: hyper.batch_size], nets, make_optimizers(nets), hyper)
    for name, value in before.items():
        np.testing.assert_array_equal(nets.encoder.value(name), value)


# --- acting and checkpoints -----------------------------------------

def test_flow_policy_action_shape(nets, hyper, transitions, rng):
    action = FlowPolicy(nets).act(transitions[0].request, rng)
    assert action.shape == (hyper.d_action,)


def test_checkpoint_round_trip(nets, encoder_spec, hyper):
    buffer = io.StringIO()
    save_checkpoint(buffer, nets)
    fresh = build_networks(encoder_spec, hyper, np.random.default_rng(99))
    load_checkpoint(io.StringIO(buffer.getvalue()), fresh)
    for name, params in nets.all().items():
        for key, value, _ in params.items():
            np.testing.assert_array_equal(fresh.all()[name].value(key), value)


def test_checkpoint_dimension_mismatch(nets, encoder_spec, hyper):
    buffer = io.StringIO()
    save_checkpoint(buffer, nets)
    other = build_networks(encoder_spec, replace(hyper, slate_size=hyper.slate_size + 1), np.random.default_rng(0))
    with pytest.raises(CheckpointError):
        load_checkpoint(io.StringIO(buffer.getvalue()), other)


def test_hyper_validation():
    with pytest.raises(ValueError):
        Hyper(alpha=-1.0)
    with pytest.raises(ValueError):
        Hyper(beta_F=0.0)


def test_failed_step_leaves_networks_untouched(nets, hyper, transitions):
    batch = list(transitions[:4])
    batch[1] = replace(batch[1], reward=float("nan"))
    before = {name: params.copy() for name, params in nets.all().items()}
    with pytest.raises(NonFiniteError):
        train_step(batch, nets, make_optimizers(nets), hyper)
    for name, params in nets.all().items():
        for key, value, _ in params.items():
            np.testing.assert_array_equal(value, before[name].value(key))


def test_non_finite_gradient_is_named(nets):
    nets.flow.grad("W0")[0, 0] = np.inf
    with pytest.raises(NonFiniteError) as info:
        check_finite_grads(nets)
    assert info.value.name == "flow.W0"
