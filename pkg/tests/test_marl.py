import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vslmarl.corridor import SPEED_LIMITS
from vslmarl.marl import (MLP, ActorCritic, Adam, Batch, Hyperparams, RewardWeights, VSLEnv,
                          compute_gae, mappo_update, masked_log_softmax, policy_forward, ppo_loss,
                          reward, reward_terms, run_episode, train)
from vslmarl.marl.env import select_joint_action
from vslmarl.marl.nets import critic_input
from vslmarl.marl.ppo import NonFiniteLoss, normalize
from vslmarl.marl.train import rollouts_to_batch
from vslmarl.sim import SimConfig, training_spec


def short_spec(horizon=600.0):
    spec = training_spec()
    spec.config = SimConfig(sensor_interval=60.0, horizon=horizon)
    return spec


# policy ---------------------------------------------------------------------

def test_uniform_logits_with_mask():
    actor = MLP((5, 5))
    actor.params = [np.zeros((5, 5)), np.zeros(5)]
    p = policy_forward(actor, np.zeros(5), [True, True, True, True, False])
    np.testing.assert_allclose(p, [0.25, 0.25, 0.25, 0.25, 0.0])
    assert p[4] == 0.0


def test_single_valid_action():
    ac = ActorCritic.init(8, (16,), seed=1)
    p = policy_forward(ac.actor, np.full(5, 0.3), [True, False, False, False, False])
    assert p.tolist() == [1.0, 0.0, 0.0, 0.0, 0.0]


def test_empty_mask_rejected():
    ac = ActorCritic.init(8, (16,), seed=1)
    with pytest.raises(ValueError):
        policy_forward(ac.actor, np.zeros(5), [False] * 5)


def test_probabilities_sum_to_one():
    ac = ActorCritic.init(8, (32, 32), seed=2)
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = policy_forward(ac.actor, rng.uniform(size=5), np.ones(5, bool))
        assert abs(p.sum() - 1.0) < 1e-9 and np.all(p >= 0)


def test_masked_sampling_never_invalid():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(2000, 5)) * 3
    masks = rng.uniform(size=(2000, 5)) < 0.5
    masks[np.arange(2000), rng.integers(0, 5, 2000)] = True
    probs = np.exp(masked_log_softmax(logits, masks))
    picks = np.array([rng.choice(5, p=p) for p in probs])
    assert masks[np.arange(2000), picks].all()


def test_shared_parameters_across_agents():
    ac = ActorCritic.init(8, seed=0)
    obs = np.random.default_rng(1).uniform(size=5)
    assert all(np.array_equal(ac(obs, 0), ac(obs, i)) for i in range(8))


def test_critic_input_layout():
    g = np.arange(40.0).reshape(8, 5)
    x = critic_input(g, 3, 8)
    assert x.shape == (48,)
    assert x[:40].tolist() == list(range(40)) and x[40:].tolist() == [0, 0, 0, 1, 0, 0, 0, 0]


# reward ---------------------------------------------------------------------

def test_reward_free_flow():
    assert reward_terms(70, 70, 70, 0.05) == (0.0, 0.0, 1.0)
    assert reward(70, 70, 70, 0.05, RewardWeights(1, 1, 0.5)) == 0.5


def test_reward_congestion_penalty():
    r_a, r_s, r_m = reward_terms(70, 70, 10, 0.5)
    assert r_a == -1.0 and r_m == 0.0 and r_s == 0.0
    assert reward_terms(50, 70, 40, 0.5)[0] == pytest.approx(-0.25)


def test_reward_step_down_boundary():
    assert reward_terms(50, 40, 70, 0.0)[1] == 0.0
    assert reward_terms(70, 40, 70, 0.0)[1] == pytest.approx(-0.5)


def test_reward_weights_validated():
    with pytest.raises(ValueError):
        RewardWeights(0, 0, 0)
    with pytest.raises(ValueError):
        RewardWeights(-1, 1, 1)


@given(st.sampled_from(SPEED_LIMITS), st.sampled_from(SPEED_LIMITS), st.floats(0, 100),
       st.floats(0, 1), st.floats(0, 3), st.floats(0, 3), st.floats(0.01, 3))
def test_reward_bounded(a, d, v, o, wa, ws, wm):
    w = RewardWeights(wa, ws, wm)
    terms = reward_terms(a, d, v, o)
    assert all(-1 <= t <= 1 for t in terms)
    assert abs(reward(a, d, v, o, w)) <= wa + ws + wm + 1e-12


# GAE ------------------------------------------------------------------------

def test_gae_single_step():
    adv, ret = compute_gae([1.0], [0.0], [True], 1.0, 1.0)
    assert adv.tolist() == [1.0] and ret.tolist() == [1.0]


def test_gae_zero():
    adv, _ = compute_gae(np.zeros(6), np.zeros(6), [False] * 5 + [True], 0.99, 0.95)
    assert np.all(adv == 0)


def test_gae_two_step_hand_unroll():
    r, v, g, lam = [1.0, 2.0], [0.5, -0.25], 0.5, 0.8
    d1 = r[1] - v[1]
    d0 = r[0] + g * v[1] - v[0]
    adv, ret = compute_gae(r, v, [False, True], g, lam)
    np.testing.assert_allclose(adv, [d0 + g * lam * d1, d1])
    np.testing.assert_allclose(ret, np.array(adv) + v)


def test_gae_done_cuts_bootstrap():
    adv, _ = compute_gae([0.0, 1.0], [0.0, 5.0], [True, False], 0.9, 0.9, last_value=2.0)
    assert adv[0] == 0.0
    assert adv[1] == pytest.approx(1.0 + 0.9 * 2.0 - 5.0)


def test_gae_empty_rejected():
    with pytest.raises(ValueError):
        compute_gae([], [], [], 0.9, 0.9)


def test_normalize():
    x = normalize(np.array([1.0, 2.0, 3.0, 10.0]))
    assert abs(x.mean()) < 1e-12 and x.std() == pytest.approx(1.0, abs=1e-6)


# PPO loss and update -------------------------------------------------------------

def tiny_batch(ac, rng, B=16, n_agents=2):
    obs = rng.uniform(size=(B, 5))
    masks = rng.uniform(size=(B, 5)) < 0.7
    masks[:, 0] = True
    lp = masked_log_softmax(ac.actor(obs), masks)
    acts = np.array([rng.choice(5, p=np.exp(row)) for row in lp])
    # old log-probs near the current ones keep every ratio strictly inside the clip band
    logp_old = lp[np.arange(B), acts] + rng.uniform(-0.05, 0.05, B)
    cin = rng.uniform(size=(B, 5 * n_agents + n_agents))
    return Batch(obs, masks, acts, logp_old, rng.normal(size=B), rng.normal(size=B), cin)


def finite_difference_check(ac, batch, ent_coef):
    _, g_a, g_c, _ = ppo_loss(ac, batch, 0.2, 0.5, ent_coef)
    worst = 0.0
    h = 1e-6
    for net, grads in ((ac.actor, g_a), (ac.critic, g_c)):
        for p, g in zip(net.params, grads):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                lp = ppo_loss(ac, batch, 0.2, 0.5, ent_coef)[0]
                p[idx] = old - h
                lm = ppo_loss(ac, batch, 0.2, 0.5, ent_coef)[0]
                p[idx] = old
                num = (lp - lm) / (2 * h)
                denom = max(abs(num), abs(g[idx]), 1e-6)
                worst = max(worst, abs(num - g[idx]) / denom)
    return worst


def small_net(seed=0):
    rng = np.random.default_rng(seed)
    actor = MLP((5, 2, 5), rng, out_gain=1.0)
    critic = MLP((12, 2, 1), rng)
    return ActorCritic(actor, critic, 2)


def test_gradient_matches_finite_differences():
    ac = small_net(0)
    batch = tiny_batch(ac, np.random.default_rng(1))
    assert finite_difference_check(ac, batch, ent_coef=0.01) < 1e-4


def test_zero_advantage_gives_zero_actor_gradient():
    ac = small_net(3)
    b = tiny_batch(ac, np.random.default_rng(4))
    b.advantages = np.zeros(len(b))
    _, g_a, _, _ = ppo_loss(ac, b, 0.2, 0.5, 0.0)
    assert max(np.abs(g).max() for g in g_a) < 1e-12


def test_bandit_converges_to_rewarded_action():
    ac = ActorCritic.init(1, (16,), seed=0)
    hyper = Hyperparams(lr=3e-3, epochs=4, minibatch=64, ent_coef=0.0)
    a_opt, c_opt = Adam(ac.actor.params, hyper.lr), Adam(ac.critic.params, hyper.lr)
    rng = np.random.default_rng(0)
    obs = np.full((128, 5), 0.5)
    masks = np.ones((128, 5), bool)
    for _ in range(60):
        lp = masked_log_softmax(ac.actor(obs), masks)
        acts = np.array([rng.choice(5, p=np.exp(row)) for row in lp])
        r = (acts == 2).astype(float)
        batch = Batch(obs, masks, acts, lp[np.arange(128), acts], normalize(r - r.mean()), r,
                      np.ones((128, 6)))
        mappo_update(ac, batch, hyper, a_opt, c_opt, rng)
    p = policy_forward(ac.actor, obs[0], masks[0])
    assert p[2] > 0.95


def test_non_finite_loss_aborts():
    ac = small_net(0)
    b = tiny_batch(ac, np.random.default_rng(1))
    b.returns = np.full(len(b), np.inf)
    hyper = Hyperparams()
    with pytest.raises(NonFiniteLoss):
        mappo_update(ac, b, hyper, Adam(ac.actor.params), Adam(ac.critic.params),
                     np.random.default_rng(0))


def test_update_diagnostics_finite():
    ac = small_net(0)
    info = mappo_update(ac, tiny_batch(ac, np.random.default_rng(1), B=64), Hyperparams(minibatch=16),
                        Adam(ac.actor.params), Adam(ac.critic.params), np.random.default_rng(0))
    assert set(info) >= {"loss", "kl", "clip_frac", "entropy"}
    assert all(np.isfinite(v) for v in info.values())


def test_hyperparam_ranges():
    with pytest.raises(ValueError):
        Hyperparams(gamma=0.0)
    with pytest.raises(ValueError):
        Hyperparams(lam=1.5)


# environment and training -----------------------------------------------------------

def test_joint_action_respects_mask():
    env = VSLEnv(short_spec())
    env.reset()
    ac = ActorCritic.init(env.n_agents, (16,), seed=0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        _, masks, idx, _ = select_joint_action(ac, env, rng)
        limits = [70] + [SPEED_LIMITS[i] for i in idx]
        assert all(b <= a + 10 for a, b in zip(limits, limits[1:]))
        assert masks[np.arange(env.n_agents), idx].all()


def test_episode_shapes_and_batch():
    env = VSLEnv(short_spec())
    ac = ActorCritic.init(env.n_agents, (16,), seed=0)
    ro = run_episode(ac, env, np.random.default_rng(0))
    assert ro.obs.shape == (10, 8, 5) and ro.critic_in.shape == (10, 8, 48)
    assert np.all((ro.obs >= 0) & (ro.obs <= 1))
    batch = rollouts_to_batch([ro, ro], Hyperparams())
    assert len(batch) == 2 * 10 * 8


def test_zero_iterations_returns_initialization(tmp_path):
    hyper = Hyperparams(iterations=0, hidden=(16,), seed=3)
    ac, curves = train(short_spec(), hyper, out_dir=tmp_path)
    init = ActorCritic.init(8, (16,), seed=3)
    assert curves == []
    for a, b in zip(ac.actor.params + ac.critic.params, init.actor.params + init.critic.params):
        assert np.array_equal(a, b)
    loaded = ActorCritic.load(tmp_path / "checkpoint.npz")
    assert all(np.array_equal(a, b) for a, b in zip(loaded.actor.params, init.actor.params))


def test_training_reproducible(tmp_path):
    hyper = Hyperparams(iterations=2, episodes_per_iter=1, hidden=(16,), eval_every=0)
    train(short_spec(), hyper, out_dir=tmp_path / "a")
    train(short_spec(), hyper, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "curves.csv").read_bytes() == (tmp_path / "b" / "curves.csv").read_bytes()
    header = (tmp_path / "a" / "curves.csv").read_text().splitlines()[0]
    assert header.split(",")[:3] == ["iteration", "mean_reward", "eval_reward"]


def test_checkpoint_header_and_version(tmp_path):
    ac = ActorCritic.init(8, (8,), seed=0)
    path = tmp_path / "c.npz"
    ac.save(path, {"note": "x"})
    with np.load(path) as data:
        header = json.loads(str(data["__header__"]))
    assert header["format_version"] == 1 and header["actions"] == list(SPEED_LIMITS)
    assert header["actor_sizes"] == [5, 8, 5]
    arrays = dict(np.load(path))
    arrays["__header__"] = np.array(json.dumps({**header, "format_version": 99}))
    np.savez(tmp_path / "bad.npz", **arrays)
    with pytest.raises(ValueError):
        ActorCritic.load(tmp_path / "bad.npz")
