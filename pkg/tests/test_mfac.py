import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from romfac import diffcore as dc
from romfac import mfac
from romfac.diffcore import GradientTape

OBS, ACT = 6, 3


@pytest.fixture
def nets(rng):
    n = mfac.AgentNets.create(OBS, ACT, rng, (8,), "tanh")
    # targets differ from the live nets so mixing them up is detectable
    for p in n.target_actor.params() + n.target_critic.params():
        p += rng.normal(0, 0.3, size=p.shape)
    return n


def batch(rng, n=5):
    return mfac.Experience(
        rng.random((n, OBS)),
        rng.integers(0, ACT, n),
        rng.normal(size=n),
        rng.random((n, OBS)),
        rng.dirichlet(np.ones(ACT), n),
        rng.dirichlet(np.ones(ACT), n),
        (rng.random(n) < 0.3).astype(float),
    )


def test_mean_action_examples():
    eye = np.eye(3)
    np.testing.assert_array_equal(mfac.mean_action([eye[2], eye[2]]), eye[2])
    np.testing.assert_array_equal(mfac.mean_action([eye[0], eye[1]]), [0.5, 0.5, 0.0])
    np.testing.assert_allclose(mfac.mean_action([], 4), np.full(4, 0.25))
    with pytest.raises(dc.ConfigurationError):
        mfac.mean_action([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=12), st.randoms())
def test_mean_action_is_a_permutation_invariant_distribution(actions, shuffler):
    vecs = list(mfac.one_hot(actions, 5))
    m = mfac.mean_action(vecs, 5)
    assert m.min() >= 0 and abs(m.sum() - 1) < 1e-12
    shuffler.shuffle(vecs)
    np.testing.assert_allclose(mfac.mean_action(vecs, 5), m, atol=1e-15)


def test_zero_nets_give_uniform_policy_and_zero_q():
    z = mfac.AgentNets.zeros(OBS, ACT)
    obs = np.ones(OBS)
    np.testing.assert_allclose(mfac.actor_distribution(z, obs, mfac.uniform(ACT)).data, np.full(ACT, 1 / 3))
    assert mfac.critic_q(z, obs, np.eye(ACT)[0], mfac.uniform(ACT)).item() == 0.0


def test_actor_and_critic_match_forward_oracle(nets, rng):
    obs, mean = rng.random(OBS), rng.dirichlet(np.ones(ACT))
    logits = dc.forward(nets.actor, np.concatenate([obs, mean])).data
    expected = np.exp(logits - logits.max())
    np.testing.assert_allclose(mfac.actor_distribution(nets, obs, mean).data, expected / expected.sum(), rtol=1e-14)
    a = np.eye(ACT)[1]
    q = dc.forward(nets.target_critic, np.concatenate([obs, a, mean])).data[0]
    assert mfac.critic_q(nets, obs, a, mean, use_target=True).item() == pytest.approx(q, rel=1e-14)
    assert mfac.critic_q(nets, obs, a, mean).item() != mfac.critic_q(nets, obs, np.eye(ACT)[2], mean).item()


def test_target_sync_gives_identical_distributions(nets, rng):
    mfac.soft_update(nets, 1.0, 1.0)
    obs, mean = rng.random((4, OBS)), rng.dirichlet(np.ones(ACT), 4)
    np.testing.assert_array_equal(
        mfac.actor_distribution(nets, obs, mean).data, mfac.actor_distribution(nets, obs, mean, use_target=True).data
    )


def test_shape_mismatch_is_a_config_error(nets):
    with pytest.raises(dc.ConfigurationError):
        mfac.actor_distribution(nets, np.zeros(OBS + 1), mfac.uniform(ACT))
    with pytest.raises(dc.ConfigurationError):
        mfac.critic_q(nets, np.zeros(OBS), np.zeros(ACT + 1), mfac.uniform(ACT))


def test_value_estimate_matches_enumeration(nets, rng):
    obs, mean = rng.random((4, OBS)), rng.dirichlet(np.ones(ACT), 4)
    probs = mfac.actor_distribution(nets, obs, mean, use_target=True).data
    explicit = np.zeros(4)
    for a in range(ACT):
        explicit += probs[:, a] * mfac.critic_q(nets, obs, np.eye(ACT)[a], mean, use_target=True).data
    np.testing.assert_allclose(mfac.value_estimate(nets, obs, mean), explicit, rtol=0, atol=1e-12)


def test_value_estimate_uniform_two_actions():
    z = mfac.AgentNets.zeros(2, 2, hidden=(1,))
    # critic output = 3 * onehot[0] + 5 * onehot[1]
    z.target_critic.weights[1][0, 0] = 1.0
    z.target_critic.weights[0][2, 0] = 3.0
    z.target_critic.weights[0][3, 0] = 5.0
    assert mfac.value_estimate(z, np.zeros(2), mfac.uniform(2)) == pytest.approx(4.0)


def test_critic_loss_examples():
    z = mfac.AgentNets.zeros(2, 2, hidden=(1,))
    one = mfac.Experience(np.zeros((1, 2)), np.array([0]), np.array([1.0]), np.zeros((1, 2)), np.full((1, 2), 0.5), np.full((1, 2), 0.5), np.zeros(1))
    assert mfac.critic_loss(z, one, 0.0).item() == pytest.approx(1.0)
    zero = mfac.Experience(one.obs, one.action, np.zeros(1), one.next_obs, one.mean, one.mean_prev, one.done)
    assert mfac.critic_loss(z, zero, 0.9).item() == 0.0
    with pytest.raises(dc.ConfigurationError):
        mfac.critic_loss(z, one, 1.0)


def test_critic_loss_matches_scalar_oracle(nets, rng):
    exp = batch(rng)
    gamma = 0.9
    total = 0.0
    for i in range(len(exp)):
        probs = mfac.actor_distribution(nets, exp.next_obs[i], exp.mean[i], use_target=True).data
        v = sum(
            probs[a] * mfac.critic_q(nets, exp.next_obs[i], np.eye(ACT)[a], exp.mean[i], use_target=True).item()
            for a in range(ACT)
        )
        y = exp.reward[i] + gamma * (1 - exp.done[i]) * v
        q = mfac.critic_q(nets, exp.obs[i], np.eye(ACT)[exp.action[i]], exp.mean[i]).item()
        total += (y - q) ** 2
    assert mfac.critic_loss(nets, exp, gamma).item() == pytest.approx(total / len(exp), rel=1e-12)


def test_no_gradient_reaches_target_networks(nets, rng):
    exp = batch(rng)
    tape = GradientTape()
    targets = tape.parameters(nets.target_critic) + tape.parameters(nets.target_actor)
    live = tape.parameters(nets.critic)
    grads = tape.backward(mfac.critic_loss(nets, exp, 0.9, live))
    assert all(not grads[t].any() for t in targets)
    assert any(grads[p].any() for p in live)
    tape = GradientTape()
    targets = tape.parameters(nets.target_critic) + tape.parameters(nets.target_actor)
    live = tape.parameters(nets.actor)
    grads = tape.backward(mfac.policy_gradient_loss(nets, exp, np.random.default_rng(0), live))
    assert all(not grads[t].any() for t in targets)


def test_policy_gradient_zero_weight_and_certain_action(nets, rng):
    exp = batch(rng, 3)
    acts = np.array([0, 1, 2])
    tape = GradientTape()
    params = tape.parameters(nets.actor)
    loss = mfac.policy_gradient_loss(nets, exp, params=params, actions=acts, weights=np.zeros(3))
    assert loss.item() == 0.0
    assert all(not g.any() for g in tape.backward(loss).values())
    certain = mfac.AgentNets.zeros(OBS, ACT)
    certain.actor.biases[-1][:] = [200.0, 0.0, 0.0]
    loss = mfac.policy_gradient_loss(certain, exp, actions=np.zeros(3, dtype=int), weights=np.ones(3))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_policy_gradient_matches_finite_differences(nets, rng):
    exp = batch(rng, 4)
    acts, weights = mfac.policy_gradient_weights(nets, exp, np.random.default_rng(5))
    tape = GradientTape()
    params = tape.parameters(nets.actor)
    grads = tape.backward(mfac.policy_gradient_loss(nets, exp, params=params, actions=acts, weights=weights))

    def value():
        return mfac.policy_gradient_loss(nets, exp, actions=acts, weights=weights).item()

    for leaf, arr in zip(params, nets.actor.params()):
        numeric = dc.numeric_gradient(value, arr)
        np.testing.assert_allclose(grads[leaf], numeric, rtol=1e-5, atol=1e-8)


def test_printed_weights_use_target_nets_at_next_state(nets, rng):
    exp = batch(rng, 4)
    acts, weights = mfac.policy_gradient_weights(nets, exp, np.random.default_rng(2), "printed")
    probs = mfac.actor_distribution(nets, exp.obs, exp.mean_prev, use_target=True).data
    expected_acts = mfac.sample_actions(probs, np.random.default_rng(2))
    np.testing.assert_array_equal(acts, expected_acts)
    q = mfac.critic_q(nets, exp.next_obs, mfac.one_hot(acts, ACT), exp.mean_prev, use_target=True).data
    np.testing.assert_allclose(weights, (1 - exp.done) * q)


def test_advantage_weights(nets, rng):
    exp = batch(rng, 4)
    acts, weights = mfac.policy_gradient_weights(nets, exp, mode="advantage", gamma=0.8)
    np.testing.assert_array_equal(acts, exp.action)
    expected = mfac.td_target(nets, exp, 0.8) - mfac.value_estimate(nets, exp.obs, exp.mean_prev)
    np.testing.assert_allclose(weights, expected)
    with pytest.raises(dc.ConfigurationError):
        mfac.policy_gradient_weights(nets, exp, mode="other")


def test_soft_update_examples(nets):
    live = nets.critic.params()[0]
    target = nets.target_critic.params()[0]
    live[...] = 2.0
    target[...] = 0.0
    mfac.soft_update(nets, 0.0, 0.5)
    np.testing.assert_array_equal(target, np.ones_like(target))
    before = [p.copy() for p in nets.target_actor.params()]
    mfac.soft_update(nets, 0.0, 0.0)
    assert all(np.array_equal(a, b) for a, b in zip(before, nets.target_actor.params()))
    with pytest.raises(dc.ConfigurationError):
        mfac.soft_update(nets, 1.5, 0.0)


@pytest.mark.parametrize("tau", [0.1, 0.5, 0.9])
def test_soft_update_contracts_toward_live(nets, tau):
    gap = max(np.abs(t - l).max() for t, l in zip(nets.target_actor.params(), nets.actor.params()))
    mfac.soft_update(nets, tau, tau)
    new_gap = max(np.abs(t - l).max() for t, l in zip(nets.target_actor.params(), nets.actor.params()))
    assert new_gap == pytest.approx((1 - tau) * gap, rel=1e-12)


def test_sample_actions_follow_probabilities():
    rng = np.random.default_rng(0)
    probs = np.tile([0.2, 0.5, 0.3], (20000, 1))
    counts = np.bincount(mfac.sample_actions(probs, rng), minlength=3) / 20000
    np.testing.assert_allclose(counts, [0.2, 0.5, 0.3], atol=0.015)


def test_nets_bundle_round_trip(nets, rng):
    back = mfac.AgentNets.from_bytes(nets.to_bytes())
    obs, mean = rng.random(OBS), rng.dirichlet(np.ones(ACT))
    for a, b in zip(back.networks(), nets.networks()):
        assert np.array_equal(a(np.concatenate([obs, mean]) if a.n_inputs == OBS + ACT else np.concatenate([obs, mean, mean])).data,
                              b(np.concatenate([obs, mean]) if b.n_inputs == OBS + ACT else np.concatenate([obs, mean, mean])).data)
    with pytest.raises(dc.FormatError):
        mfac.AgentNets.from_bytes(nets.to_bytes() + b"x")


def test_entropy_of_uniform_policy():
    z = mfac.AgentNets.zeros(OBS, ACT)
    ent = mfac.policy_entropy(z, np.zeros((2, OBS)), np.tile(mfac.uniform(ACT), (2, 1)))
    assert ent.item() == pytest.approx(np.log(ACT))


def test_expected_weights_are_centred_advantages(nets, rng):
    exp = batch(rng, 4)
    acts, weights = mfac.policy_gradient_weights(nets, exp, mode="expected")
    assert acts is None and weights.shape == (4, ACT)
    q = np.stack([mfac.critic_q(nets, exp.obs, np.tile(np.eye(ACT)[a], (4, 1)), exp.mean, use_target=True).data
                  for a in range(ACT)], axis=1)
    probs = mfac.actor_distribution(nets, exp.obs, exp.mean_prev, use_target=True).data
    np.testing.assert_allclose(weights, q - (probs * q).sum(axis=1, keepdims=True), atol=1e-14)
    np.testing.assert_allclose((probs * weights).sum(axis=1), 0.0, atol=1e-12)


def test_expected_loss_matches_finite_differences(nets, rng):
    exp = batch(rng, 4)
    _, weights = mfac.policy_gradient_weights(nets, exp, mode="expected")
    tape = GradientTape()
    params = tape.parameters(nets.actor)
    loss = mfac.policy_gradient_loss(nets, exp, params=params, weights=weights)
    probs = mfac.actor_distribution(nets, exp.obs, exp.mean_prev).data
    assert loss.item() == pytest.approx(-np.mean((probs * weights).sum(axis=1)), rel=1e-13)
    grads = tape.backward(loss)

    def value():
        return mfac.policy_gradient_loss(nets, exp, weights=weights).item()

    for leaf, arr in zip(params, nets.actor.params()):
        np.testing.assert_allclose(grads[leaf], dc.numeric_gradient(value, arr), rtol=1e-5, atol=1e-8)


def test_expected_mode_with_flat_critic_has_no_gradient(rng):
    z = mfac.AgentNets.create(OBS, ACT, rng, (8,), "tanh")
    for p in z.target_critic.params():
        p[...] = 0.0
    exp = batch(rng, 3)
    tape = GradientTape()
    params = tape.parameters(z.actor)
    grads = tape.backward(mfac.policy_gradient_loss(z, exp, params=params, mode="expected"))
    assert all(not g.any() for g in grads.values())
