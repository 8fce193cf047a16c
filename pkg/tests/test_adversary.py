import numpy as np
import pytest

from romfac import diffcore as dc
from romfac import mfac
from romfac.adversary import AttackConfig, action_label, action_loss, pgd_attack, project

OBS, ACT = 7, 4


@pytest.fixture
def nets(rng):
    return mfac.AgentNets.create(OBS, ACT, rng, (16,), "tanh")


def linear_nets(rng):
    """Actor with no hidden layer so logits = [obs, mean] @ W + b."""
    n = mfac.AgentNets.create(OBS, ACT, rng, (), "relu")
    n.actor.weights[0][...] = rng.normal(0, 2.0, size=n.actor.weights[0].shape)
    return n


@pytest.mark.parametrize(
    "kwargs",
    [dict(epsilon=-0.1), dict(epsilon=np.inf), dict(steps=65), dict(steps=-1), dict(step_size=0.0), dict(clip_low=1.0)],
)
def test_config_validation(kwargs):
    with pytest.raises(dc.ConfigurationError):
        AttackConfig(**kwargs)


def test_default_step_size():
    assert AttackConfig(0.08, 10).beta == pytest.approx(0.02)
    assert AttackConfig(0.08, 10, step_size=0.5).beta == 0.5
    assert AttackConfig(0.08, 0).beta == 0.0


def test_label_tie_rule_and_one_hot():
    z = mfac.AgentNets.zeros(OBS, ACT)
    assert action_label(z, np.zeros(OBS), mfac.uniform(ACT)) == 0
    z.actor.biases[-1][2] = 50.0
    assert action_label(z, np.zeros(OBS), mfac.uniform(ACT)) == 2


def test_label_matches_recomputed_argmax(nets, rng):
    obs, mean = rng.random((30, OBS)), rng.dirichlet(np.ones(ACT), 30)
    logits = dc.forward(nets.actor, np.concatenate([obs, mean], axis=1)).data
    np.testing.assert_array_equal(action_label(nets, obs, mean), logits.argmax(axis=1))


def test_action_loss_examples(nets, rng):
    z = mfac.AgentNets.zeros(OBS, 8)
    assert action_loss(z, np.zeros(OBS), mfac.uniform(8), 5).item() == pytest.approx(np.log(8))
    z.actor.biases[-1][3] = 800.0
    assert action_loss(z, np.zeros(OBS), mfac.uniform(8), 3).item() == pytest.approx(0.0, abs=1e-12)
    obs, mean = rng.random(OBS), rng.dirichlet(np.ones(ACT))
    probs = mfac.actor_distribution(nets, obs, mean).data
    assert action_loss(nets, obs, mean, 1).item() == pytest.approx(-np.log(probs[1]), rel=1e-13)


def test_action_loss_differentiable_in_params_and_input(nets, rng):
    obs, mean = rng.random(OBS), rng.dirichlet(np.ones(ACT))
    tape = dc.GradientTape()
    x = tape.input(obs)
    params = tape.parameters(nets.actor)
    grads = tape.backward(action_loss(nets, x, mean, 2, params=params))
    numeric = dc.numeric_gradient(lambda: action_loss(nets, obs, mean, 2).item(), obs)
    np.testing.assert_allclose(grads[x], numeric, rtol=1e-6, atol=1e-9)
    assert any(grads[p].any() for p in params)


def test_zero_steps_or_zero_budget_is_identity(nets, rng):
    obs, mean = rng.random(OBS), mfac.uniform(ACT)
    for cfg in (AttackConfig(0.1, 0), AttackConfig(0.0, 10)):
        state = pgd_attack(nets, obs, mean, cfg)
        np.testing.assert_array_equal(state.perturbed, obs)
        assert not state.delta.any()


def test_single_step_matches_analytic_gradient(rng):
    n = linear_nets(rng)
    obs, mean = rng.uniform(0.3, 0.7, OBS), rng.dirichlet(np.ones(ACT))
    cfg = AttackConfig(0.1, 1, step_size=0.01)
    W = n.actor.weights[0][:OBS]
    logits = np.concatenate([obs, mean]) @ n.actor.weights[0] + n.actor.biases[0]
    p = np.exp(logits - logits.max())
    p /= p.sum()
    label = int(p.argmax())
    g = W @ (p - np.eye(ACT)[label])
    state = pgd_attack(n, obs, mean, cfg)
    np.testing.assert_allclose(state.delta, 0.01 * np.sign(g), atol=1e-15)


def test_ball_and_range_invariants(nets, rng):
    for _ in range(40):
        eps = rng.uniform(0, 0.3)
        cfg = AttackConfig(eps, int(rng.integers(1, 12)))
        obs = rng.choice([0.0, 1.0, 0.5], size=OBS) + rng.uniform(-0.05, 0.05, OBS) * (rng.random(OBS) < 0.5)
        obs = np.clip(obs, 0, 1)
        state = pgd_attack(nets, obs, rng.dirichlet(np.ones(ACT)), cfg)
        assert np.abs(state.delta).max() <= eps + 1e-12
        assert state.perturbed.min() >= 0.0 and state.perturbed.max() <= 1.0


def test_deterministic(nets, rng):
    obs, mean = rng.random((5, OBS)), rng.dirichlet(np.ones(ACT), 5)
    cfg = AttackConfig(0.075, 10)
    a = pgd_attack(nets, obs, mean, cfg).perturbed
    b = pgd_attack(nets, obs, mean, cfg).perturbed
    assert a.tobytes() == b.tobytes()


def test_batch_rows_are_attacked_independently(nets, rng):
    obs, mean = rng.random((4, OBS)), rng.dirichlet(np.ones(ACT), 4)
    cfg = AttackConfig(0.075, 5)
    batch = pgd_attack(nets, obs, mean, cfg).perturbed
    for i in range(4):
        np.testing.assert_allclose(batch[i], pgd_attack(nets, obs[i], mean[i], cfg).perturbed, atol=1e-15)


def test_attack_increases_action_loss_on_average(rng):
    clean, attacked = [], []
    cfg = AttackConfig(0.075, 10)
    for _ in range(100):
        n = mfac.AgentNets.create(OBS, ACT, rng, (16,), "tanh")
        obs, mean = rng.random(OBS), rng.dirichlet(np.ones(ACT))
        label = action_label(n, obs, mean)
        clean.append(action_loss(n, obs, mean, label).item())
        attacked.append(action_loss(n, pgd_attack(n, obs, mean, cfg).perturbed, mean, label).item())
    assert np.mean(attacked) >= np.mean(clean)


def test_constant_policy_is_a_fixed_point(rng):
    z = mfac.AgentNets.zeros(OBS, ACT)
    obs = rng.uniform(-0.2, 1.2, OBS)
    state = pgd_attack(z, obs, mfac.uniform(ACT), AttackConfig(0.1, 10))
    np.testing.assert_array_equal(state.perturbed, np.clip(obs, 0, 1))


def test_attack_uses_clean_mean_action(nets, rng):
    obs, mean = rng.random(OBS), rng.dirichlet(np.ones(ACT))
    cfg = AttackConfig(0.075, 3)
    label = action_label(nets, obs, mean)
    adv = pgd_attack(nets, obs, mean, cfg).perturbed
    # replay the iteration by hand with the same mean at every step
    x = obs.copy()
    for _ in range(3):
        tape = dc.GradientTape()
        xt = tape.input(x)
        g = tape.backward(action_loss(nets, xt, mean, label))[xt]
        x = project(x + cfg.beta * np.sign(g), obs, cfg)
    np.testing.assert_array_equal(adv, x)
