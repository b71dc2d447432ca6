"""Policy-gradient machinery: gradients vs finite differences, trust-region
update invariants, checkpoints, evaluation."""
import json

import numpy as np
import pytest

from ctaplab.agent import (GaussianPolicy, RolloutBatch, TrpoConfig,
                           ValueFunction, apply_smoothing, compute_gae,
                           discounted_advantages, evaluate,
                           evaluate_schedule, load_checkpoint,
                           load_trpo_config, make_checkpoint,
                           mean_kl_and_gradient, parse_trpo_config,
                           policy_from_checkpoint, rollout_schedule,
                           sample_action, save_checkpoint,
                           surrogate_loss_and_gradient, train,
                           training_log_to_csv, trpo_update,
                           value_from_checkpoint)
from ctaplab.env import ScenarioConfig
from ctaplab.errors import ArgumentError, ConfigError
from ctaplab.linalg import Rng
from ctaplab.pulses import OMEGA_MAX, gaussian_ctap_pair, moving_average, \
    spline_resample


def small_policy(seed=0, obs_dim=4, hidden=(5,), act_dim=2):
    return GaussianPolicy(obs_dim, hidden, act_dim, Rng(seed))


def random_batch(policy, n=12, seed=1):
    rng = Rng(seed)
    obs = rng.normal((n, policy.obs_dim))
    mean, _ = policy.means(obs)
    actions = mean + 0.3 * rng.normal((n, policy.act_dim))
    old_log_probs = policy.log_prob(mean, actions)
    adv = rng.normal(n)
    return obs, actions, old_log_probs, adv


# ----------------------------------------------------------------- policy
def test_policy_means_bounded_and_batched():
    pol = small_policy()
    obs = Rng(2).normal((10, 4)) * 5.0
    mean, _ = pol.means(obs)
    assert mean.shape == (10, 2)
    assert mean.min() > 0.0
    assert mean.max() < OMEGA_MAX
    with pytest.raises(ArgumentError):
        pol.means(np.zeros((3, 7)))


def test_log_prob_matches_gaussian_density():
    pol = small_policy()
    rng = Rng(3)
    means = rng.uniform((6, 2))
    actions = means + 0.1 * rng.normal((6, 2))
    got = pol.log_prob(means, actions)
    std = np.exp(pol.log_std)
    want = (-0.5 * ((actions - means) / std) ** 2
            - np.log(std) - 0.5 * np.log(2.0 * np.pi)).sum(axis=1)
    assert np.abs(got - want).max() < 1e-12


def test_policy_flat_round_trip():
    pol = small_policy(seed=4)
    theta = pol.flat()
    assert theta.size == pol.n_params()
    pol2 = small_policy(seed=5)
    pol2.set_flat(theta)
    obs = Rng(6).normal((3, 4))
    assert np.abs(pol.means(obs)[0] - pol2.means(obs)[0]).max() == 0.0
    assert np.abs(pol.log_std - pol2.log_std).max() == 0.0
    with pytest.raises(ArgumentError):
        pol.set_flat(theta[:-1])


def test_sample_action_reproducible_and_scored():
    pol = small_policy(seed=7)
    obs = Rng(8).normal(4)
    a1, lp1 = sample_action(pol, obs, Rng(42))
    a2, lp2 = sample_action(pol, obs, Rng(42))
    assert np.abs(a1 - a2).max() == 0.0 and lp1 == lp2
    mean, _ = pol.means(obs[None])
    assert lp1 == pytest.approx(float(pol.log_prob(mean, a1[None])[0]))


# ------------------------------------------------------------- advantages
def test_gae_recursion_small_case_oracle():
    rewards = np.array([1.0, 0.5, -0.25])
    values = np.array([0.2, 0.1, 0.3, 0.0])
    discount, lam = 0.9, 0.8
    deltas = rewards + discount * values[1:] - values[:-1]
    a2 = deltas[2]
    a1 = deltas[1] + discount * lam * a2
    a0 = deltas[0] + discount * lam * a1
    adv, ret = discounted_advantages(rewards, values, discount, lam)
    assert np.abs(adv - np.array([a0, a1, a2])).max() < 1e-14
    assert np.abs(ret - (adv + values[:-1])).max() < 1e-14
    with pytest.raises(ArgumentError):
        discounted_advantages(rewards, values[:-1], discount, lam)


def test_gae_lambda_one_is_discounted_return_minus_value():
    rng = np.random.default_rng(9)
    rewards = rng.normal(size=7)
    values = rng.normal(size=8)
    values[-1] = 0.0
    adv, _ = discounted_advantages(rewards, values, 0.95, 1.0)
    disc_returns = np.array([
        sum(0.95 ** (j - t) * rewards[j] for j in range(t, 7))
        for t in range(7)])
    assert np.abs(adv - (disc_returns - values[:-1])).max() < 1e-12


def test_compute_gae_normalizes_batch():
    rng = np.random.default_rng(10)
    eps = [(rng.normal(size=5), np.append(rng.normal(size=5), 0.0))
           for _ in range(4)]
    adv, ret = compute_gae(eps, 0.99, 0.97)
    assert adv.shape == (20,)
    assert abs(adv.mean()) < 1e-12
    assert abs(adv.std() - 1.0) < 1e-12
    assert ret.shape == (20,)
    with pytest.raises(ArgumentError):
        compute_gae([], 0.99, 0.97)


# ---------------------------------------------------------- exact gradients
def flat_fd_gradient(policy, fn, eps=1e-6):
    theta0 = policy.flat()
    probe = GaussianPolicy(policy.obs_dim, policy.net.layer_dims[1:-1],
                           policy.act_dim)
    fd = np.empty_like(theta0)
    for k in range(theta0.size):
        hi_t = theta0.copy()
        hi_t[k] += eps
        probe.set_flat(hi_t)
        hi = fn(probe)
        lo_t = theta0.copy()
        lo_t[k] -= eps
        probe.set_flat(lo_t)
        lo = fn(probe)
        fd[k] = (hi - lo) / (2.0 * eps)
    return fd


def test_surrogate_gradient_matches_finite_differences():
    pol = small_policy(seed=11)
    obs, actions, old_lp, adv = random_batch(pol, n=10, seed=12)
    # evaluate away from the reference point so the ratio is not trivially 1
    pol.set_flat(pol.flat() + 0.05 * Rng(13).normal(pol.n_params()))
    loss, grad = surrogate_loss_and_gradient(pol, obs, actions, old_lp, adv)
    fd = flat_fd_gradient(
        pol, lambda p: surrogate_loss_and_gradient(p, obs, actions,
                                                   old_lp, adv)[0])
    scale = max(1.0, np.abs(fd).max())
    assert np.abs(grad - fd).max() / scale < 1e-6


def test_surrogate_at_reference_point_is_mean_advantage():
    pol = small_policy(seed=14)
    obs, actions, old_lp, adv = random_batch(pol, n=8, seed=15)
    loss, _ = surrogate_loss_and_gradient(pol, obs, actions, old_lp, adv)
    assert loss == pytest.approx(float(adv.mean()), rel=1e-12)


def test_kl_gradient_matches_finite_differences():
    pol = small_policy(seed=16)
    obs = Rng(17).normal((9, 4))
    old_means, _ = pol.means(obs)
    old_log_std = pol.log_std.copy()
    pol.set_flat(pol.flat() + 0.1 * Rng(18).normal(pol.n_params()))
    kl, grad = mean_kl_and_gradient(pol, obs, old_means, old_log_std)
    assert kl > 0.0
    fd = flat_fd_gradient(
        pol, lambda p: mean_kl_and_gradient(p, obs, old_means,
                                            old_log_std)[0])
    scale = max(1.0, np.abs(fd).max())
    assert np.abs(grad - fd).max() / scale < 1e-6


def test_kl_zero_at_reference_point():
    pol = small_policy(seed=19)
    obs = Rng(20).normal((6, 4))
    old_means, _ = pol.means(obs)
    kl, grad = mean_kl_and_gradient(pol, obs, old_means, pol.log_std)
    assert abs(kl) < 1e-14
    # the reference point minimizes KL, so the gradient vanishes there
    assert np.abs(grad).max() < 1e-12


# ------------------------------------------------------------ trust region
def batch_from_arrays(obs, actions, old_lp, adv, returns):
    return RolloutBatch(observations=obs, actions=actions, log_probs=old_lp,
                        advantages=adv, returns=returns,
                        episode_returns=np.array([returns.sum()]),
                        final_target_pops=np.array([0.0]), max_rho22=0.0)


def test_trpo_update_respects_kl_bound_and_improves():
    pol = small_policy(seed=21)
    value_fn = ValueFunction((4, 5, 1), Rng(22))
    obs, actions, old_lp, adv = random_batch(pol, n=40, seed=23)
    adv = (adv - adv.mean()) / adv.std()
    old_means, _ = pol.means(obs)
    old_log_std = pol.log_std.copy()
    cfg = TrpoConfig(max_kl=0.01, total_epochs=0)
    batch = batch_from_arrays(obs, actions, old_lp, adv,
                              returns=Rng(24).normal(40))
    stats = trpo_update(pol, value_fn, batch, cfg, Rng(25))
    assert stats.accepted
    assert stats.improvement > 0.0
    kl, _ = mean_kl_and_gradient(pol, obs, old_means, old_log_std)
    assert kl <= cfg.max_kl + 1e-12
    assert stats.kl == pytest.approx(kl, rel=1e-9)


def test_trpo_update_fits_value_function():
    pol = small_policy(seed=26)
    value_fn = ValueFunction((4, 5, 1), Rng(27))
    obs, actions, old_lp, adv = random_batch(pol, n=30, seed=28)
    returns = Rng(29).normal(30) + 5.0
    batch = batch_from_arrays(obs, actions, old_lp, adv, returns)
    assert value_fn.ret_mean == 0.0
    trpo_update(pol, value_fn, batch, TrpoConfig(total_epochs=0), Rng(30))
    assert value_fn.ret_mean == pytest.approx(float(returns.mean()))
    assert value_fn.ret_std == pytest.approx(float(returns.std()))


def test_zero_advantage_batch_leaves_policy_unchanged():
    pol = small_policy(seed=31)
    theta0 = pol.flat().copy()
    value_fn = ValueFunction((4, 5, 1), Rng(32))
    obs, actions, old_lp, _ = random_batch(pol, n=15, seed=33)
    batch = batch_from_arrays(obs, actions, old_lp, np.zeros(15),
                              returns=Rng(34).normal(15))
    stats = trpo_update(pol, value_fn, batch, TrpoConfig(total_epochs=0),
                        Rng(35))
    assert not stats.accepted
    assert np.abs(pol.flat() - theta0).max() == 0.0


# -------------------------------------------------------------- value net
def test_value_function_learns_linear_map():
    rng = Rng(36)
    obs = rng.normal((256, 3))
    returns = 2.0 * obs[:, 0] - obs[:, 1] + 10.0
    vf = ValueFunction((3, 32, 1), Rng(37), lr=1e-2)
    before = float(np.mean((vf.predict(obs) - returns) ** 2))
    for _ in range(30):
        vf.fit(obs, returns, epochs=5, rng=rng)
    after = float(np.mean((vf.predict(obs) - returns) ** 2))
    assert after < before * 0.05
    assert after < 0.5


# ----------------------------------------------------------------- config
def test_trpo_config_defaults_and_validation():
    cfg = TrpoConfig()
    assert cfg.discount == 0.99
    assert cfg.gae_lambda == 0.97
    assert cfg.max_kl == 0.01
    assert cfg.episodes_per_batch == 20
    for bad in (dict(discount=0.0), dict(gae_lambda=1.5),
                dict(max_kl=0.0), dict(cg_damping=-0.1),
                dict(backtrack_ratio=1.0), dict(cg_iters=0),
                dict(value_lr=0.0), dict(total_epochs=-1)):
        with pytest.raises(ArgumentError):
            TrpoConfig(**bad)


def test_parse_trpo_config(tmp_path):
    cfg = parse_trpo_config("max_kl = 0.02  # wider region\nseed = 3\n")
    assert cfg.max_kl == 0.02
    assert cfg.seed == 3
    with pytest.raises(ConfigError):
        parse_trpo_config("learning_rate = 1")
    with pytest.raises(ConfigError):
        parse_trpo_config("seed = 1\nseed = 2")
    with pytest.raises(ConfigError):
        parse_trpo_config("cg_iters = few")
    with pytest.raises(ConfigError):
        parse_trpo_config("discount = 2.0")
    p = tmp_path / "trpo.cfg"
    p.write_text("total_epochs = 11\n")
    assert load_trpo_config(p).total_epochs == 11


def test_training_log_csv_format():
    rows = [{"epoch": 0, "mean_return": -55.5, "mean_final_rho33": 0.25,
             "max_rho22": 0.5, "kl": 0.009, "accepted": 1}]
    text = training_log_to_csv(rows)
    lines = text.strip().split("\n")
    assert lines[0] == "epoch,mean_return,mean_final_rho33,max_rho22,kl," \
                       "accepted"
    assert lines[1].startswith("0,-55.5,0.25,0.5,0.009,1")


# ------------------------------------------------------------- checkpoints
def test_checkpoint_round_trip_is_exact(tmp_path):
    pol = small_policy(seed=38, obs_dim=11, hidden=(16,), act_dim=2)
    vf = ValueFunction((11, 16, 1), Rng(39))
    vf.ret_mean, vf.ret_std = -3.25, 7.5
    cfg = ScenarioConfig()
    ck = make_checkpoint(pol, vf, cfg, seed=5, epoch=17,
                         metrics={"mean_return": -12.0})
    path = tmp_path / "ck.json"
    save_checkpoint(ck, path)
    loaded = load_checkpoint(path)
    pol2, cfg2 = policy_from_checkpoint(loaded)
    assert cfg2 == cfg
    obs = Rng(40).normal((6, 11))
    assert np.abs(pol.means(obs)[0] - pol2.means(obs)[0]).max() == 0.0
    assert np.abs(pol.log_std - pol2.log_std).max() == 0.0
    vf2 = value_from_checkpoint(loaded)
    assert np.abs(vf.predict(obs) - vf2.predict(obs)).max() == 0.0
    assert loaded["epoch"] == 17
    assert loaded["seed"] == 5


def test_checkpoint_version_and_shape_guards(tmp_path):
    pol = small_policy(seed=41)
    vf = ValueFunction((4, 5, 1), Rng(42))
    ck = make_checkpoint(pol, vf, ScenarioConfig(), 0, 0, {})
    bad = dict(ck)
    bad["version"] = "not-a-version"
    path = tmp_path / "bad.json"
    with open(path, "w") as fh:
        json.dump(bad, fh)
    with pytest.raises(ArgumentError):
        load_checkpoint(path)
    tampered = json.loads(json.dumps(ck))
    tampered["log_std"] = [0.0, 0.0, 0.0]
    with pytest.raises(ArgumentError):
        policy_from_checkpoint(tampered)


# -------------------------------------------------------------- evaluation
def test_apply_smoothing_dispatch():
    s = gaussian_ctap_pair(12 * np.pi, 50)
    assert apply_smoothing(s, "none") is s
    ma = apply_smoothing(s, "ma4")
    assert np.abs(ma.channels[0]
                  - moving_average(s, 4).channels[0]).max() == 0.0
    sp = apply_smoothing(s, "spline")
    assert sp.n_steps == 200
    assert np.abs(sp.channels[0]
                  - spline_resample(s, 200).channels[0]).max() == 0.0
    with pytest.raises(ArgumentError):
        apply_smoothing(s, "median")


def test_evaluate_schedule_metrics():
    cfg = ScenarioConfig()
    res = evaluate_schedule(gaussian_ctap_pair(12 * np.pi, 50), cfg)
    m = res.metrics
    assert m["final_fidelity"] >= 0.99
    assert m["t_reach_099"] is not None
    assert m["t_reach_090"] <= m["t_reach_099"]
    assert abs(m["final_trace"] - 1.0) < 1e-9
    assert 0.0 < m["max_rho22"] <= 1.0
    # an idle schedule never reaches the target
    from ctaplab.pulses import PulseSchedule
    idle = PulseSchedule(12 * np.pi, 50, [np.zeros(50), np.zeros(50)])
    res2 = evaluate_schedule(idle, cfg)
    assert res2.metrics["final_fidelity"] < 1e-12
    assert res2.metrics["t_reach_090"] is None


def test_rollout_schedule_ignores_early_stop_threshold():
    cfg = ScenarioConfig(rho33_threshold=0.5, patience=1, n_steps=16,
                         t_max_pi_units=4.0)
    pol = small_policy(seed=43, obs_dim=11, hidden=(8,), act_dim=2)
    sched, total_reward = rollout_schedule(pol, cfg)
    assert sched.n_steps == 16  # threshold removed for evaluation
    assert all(ch.min() >= 0.0 and ch.max() <= OMEGA_MAX
               for ch in sched.channels)
    assert np.isfinite(total_reward)


def test_evaluate_checkpoint_reproduces_policy_rollout(tmp_path):
    cfg = ScenarioConfig(n_steps=20, t_max_pi_units=4.0)
    pol = small_policy(seed=44, obs_dim=11, hidden=(8,), act_dim=2)
    vf = ValueFunction((11, 8, 1), Rng(45))
    ck = make_checkpoint(pol, vf, cfg, 0, 0, {})
    path = tmp_path / "ck.json"
    save_checkpoint(ck, path)
    direct = evaluate(pol, cfg)
    via_ckpt = evaluate(load_checkpoint(path))
    for a, b in zip(direct.schedule.channels, via_ckpt.schedule.channels):
        assert np.abs(a - b).max() == 0.0
    assert direct.metrics["final_fidelity"] \
        == via_ckpt.metrics["final_fidelity"]
    with pytest.raises(ArgumentError):
        evaluate(pol, ScenarioConfig(observation_mode="reduced"))


# ---------------------------------------------------------------- training
def tiny_setup():
    env = ScenarioConfig(observation_mode="reduced", n_steps=16,
                         t_max_pi_units=4.0)
    trpo = TrpoConfig(total_epochs=3, episodes_per_batch=4, seed=7,
                      value_fit_epochs=2)
    return env, trpo


def test_train_is_deterministic():
    env, trpo = tiny_setup()
    ck1, rows1 = train(env, trpo, hidden=(8,))
    ck2, rows2 = train(env, trpo, hidden=(8,))
    assert json.dumps(ck1, sort_keys=True) == json.dumps(ck2, sort_keys=True)
    assert training_log_to_csv(rows1) == training_log_to_csv(rows2)
    assert len(rows1) == 3
    assert [r["epoch"] for r in rows1] == [0, 1, 2]


def test_train_callback_stops_early_and_seed_changes_run():
    env, trpo = tiny_setup()
    _, rows = train(env, trpo, hidden=(8,),
                    callback=lambda epoch, row, p, v: epoch == 1)
    assert len(rows) == 2
    other = TrpoConfig(total_epochs=3, episodes_per_batch=4, seed=8,
                       value_fit_epochs=2)
    _, rows_other = train(env, other, hidden=(8,))
    assert training_log_to_csv(rows) != training_log_to_csv(rows_other)


def test_train_warm_start_and_mismatch_guard():
    env, trpo = tiny_setup()
    ck, _ = train(env, trpo, hidden=(8,))
    resumed, rows = train(env, TrpoConfig(total_epochs=1,
                                          episodes_per_batch=4, seed=7),
                          hidden=(8,), warm_start=ck)
    assert len(rows) == 1
    with pytest.raises(ArgumentError):
        train(env, TrpoConfig(total_epochs=1, episodes_per_batch=4),
              hidden=(12,), warm_start=ck)
    full_env = ScenarioConfig(n_steps=10, t_max_pi_units=4.0)
    with pytest.raises(ArgumentError):
        train(full_env, TrpoConfig(total_epochs=1, episodes_per_batch=4),
              hidden=(8,), warm_start=ck)


def test_train_multiworker_matches_episode_count():
    env, trpo = tiny_setup()
    ck, rows = train(env, trpo, hidden=(8,), n_workers=2)
    assert len(rows) == 3
    assert ck["env_config"]["observation_mode"] == "reduced"
