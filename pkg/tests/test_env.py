"""Episodic environment: configs, observations, rewards, termination."""
import numpy as np
import pytest

from ctaplab.env import (CtapEnv, ScenarioConfig, encode_observation,
                         load_scenario_config, parse_scenario_config,
                         reward_ctap3, reward_sctap5)
from ctaplab.errors import ArgumentError, ConfigError, ProtocolError
from ctaplab.pulses import PulseSchedule
from ctaplab.quantum import evolve


# ---------------------------------------------------------------- config
def test_config_defaults_and_derived():
    c = ScenarioConfig()
    assert c.n_dots == 3
    assert abs(c.t_max - 12 * np.pi) < 1e-12
    assert c.n_actions == 2
    assert c.observation_dim() == 11
    c5 = ScenarioConfig(n_dots=5, t_max_pi_units=21.0)
    assert c5.n_actions == 3
    assert c5.observation_dim() == 28
    assert ScenarioConfig(observation_mode="reduced").observation_dim() == 4


@pytest.mark.parametrize("kwargs", [
    dict(n_dots=4),
    dict(n_steps=1),
    dict(t_max_pi_units=0.0),
    dict(observation_mode="compact"),
    dict(n_dots=5, observation_mode="reduced"),
    dict(n_dots=5, delta12=0.1),
    dict(alpha=0.0),
    dict(beta=-1.0),
    dict(rho33_threshold=0.0),
    dict(rho33_threshold=1.5),
    dict(patience=0),
])
def test_config_validation(kwargs):
    with pytest.raises(ArgumentError):
        ScenarioConfig(**kwargs)


def test_config_detuning_is_cumulative():
    c = ScenarioConfig(delta12=0.1, delta23=0.25)
    m = c.model()
    assert np.abs(np.array(m.delta)
                  - np.array([0.0, 0.1, 0.35])).max() < 1e-15


def test_parse_scenario_config():
    text = """
    # a scenario with every field
    n_dots = 3
    t_max_pi_units = 10
    n_steps = 40          # trailing comment
    delta12 = 0.1
    delta23 = 0.05
    gamma_d = 0.01
    gamma_l = 0.0
    alpha = 2.0
    beta = 3.0
    rho33_threshold = 0.95
    patience = 7
    observation_mode = full
    """
    c = parse_scenario_config(text)
    assert c.n_steps == 40
    assert c.alpha == 2.0
    assert c.rho33_threshold == 0.95
    assert c.patience == 7
    assert parse_scenario_config("rho33_threshold = none") \
        .rho33_threshold is None
    assert parse_scenario_config("").n_dots == 3  # all defaults


@pytest.mark.parametrize("text,fragment", [
    ("frequency = 3", "unknown key"),
    ("n_dots = 3\nn_dots = 5", "duplicate"),
    ("n_steps = many", "bad value"),
    ("just words", "key = value"),
    ("n_dots = 4", "n_dots"),
])
def test_parse_errors(text, fragment):
    with pytest.raises(ConfigError) as err:
        parse_scenario_config(text)
    assert fragment in str(err.value)


def test_load_scenario_config(tmp_path):
    p = tmp_path / "scen.cfg"
    p.write_text("n_dots = 5\nt_max_pi_units = 21\nn_steps = 100\n")
    c = load_scenario_config(p)
    assert c.n_dots == 5
    assert c.n_steps == 100


# ---------------------------------------------------------- observations
def test_initial_observation_layouts():
    env = CtapEnv(ScenarioConfig())
    obs = env.reset()
    assert obs.shape == (11,)
    assert obs[0] == 1.0          # all population on dot 1
    assert np.abs(obs[1:]).max() == 0.0
    red = CtapEnv(ScenarioConfig(observation_mode="reduced"))
    obs_r = red.reset()
    assert obs_r.shape == (4,)
    assert np.abs(obs_r).max() == 0.0
    env5 = CtapEnv(ScenarioConfig(n_dots=5, t_max_pi_units=21.0))
    obs5 = env5.reset()
    assert obs5.shape == (28,)
    assert obs5[0] == 1.0


def test_observation_encodes_state_and_prev_action():
    cfg = ScenarioConfig()
    env = CtapEnv(cfg)
    env.reset()
    action = np.array([0.33, 0.77])
    res = env.step(action)
    # previous-action slots carry the applied (clipped) action
    assert np.abs(res.observation[-2:] - action).max() < 1e-15
    # population and coherence slots match the simulator state exactly
    block = env.rho
    want = [block[0, 0].real, block[1, 1].real, block[2, 2].real,
            block[0, 1].real, block[0, 1].imag,
            block[0, 2].real, block[0, 2].imag,
            block[1, 2].real, block[1, 2].imag]
    assert np.abs(res.observation[:9] - np.array(want)).max() < 1e-15


def test_reduced_observation_slots():
    cfg = ScenarioConfig(observation_mode="reduced")
    env = CtapEnv(cfg)
    env.reset()
    res = env.step(np.array([0.5, 0.25]))
    assert res.observation[0] == pytest.approx(env.rho[1, 1].real, abs=1e-15)
    assert res.observation[1] == pytest.approx(env.rho[2, 2].real, abs=1e-15)
    assert np.abs(res.observation[2:] - [0.5, 0.25]).max() < 1e-15


# ---------------------------------------------------------------- rewards
def test_reward_formulas():
    assert reward_ctap3(0.0, 0.0, 1.0, 4.0) == pytest.approx(-2.0)
    assert reward_ctap3(0.0, 1.0, 1.0, 4.0) == pytest.approx(-1.0)
    # middle-dot occupation is punished exponentially
    assert reward_ctap3(0.5, 0.5, 1.0, 4.0) \
        == pytest.approx(-1.0 - np.exp(2.0))
    assert reward_sctap5(1.0) == 0.0
    assert reward_sctap5(0.25) == pytest.approx(-0.75)


def test_step_reward_matches_formula_from_populations():
    cfg = ScenarioConfig(alpha=1.5, beta=2.5)
    env = CtapEnv(cfg)
    env.reset()
    rng = np.random.default_rng(7)
    for _ in range(5):
        res = env.step(rng.uniform(0.0, 1.0, 2))
        pops = res.info["populations"]
        want = 1.5 * (-1.0 + pops[2] - pops[1]) - np.exp(2.5 * pops[1])
        assert res.reward == pytest.approx(want, rel=1e-12)


def test_idle_action_keeps_state_and_pays_floor_reward():
    env = CtapEnv(ScenarioConfig())
    env.reset()
    res = env.step(np.zeros(2))
    assert res.reward == pytest.approx(-2.0)
    assert res.observation[0] == pytest.approx(1.0, abs=1e-12)


def test_reward_5dot():
    env = CtapEnv(ScenarioConfig(n_dots=5, t_max_pi_units=21.0,
                                 n_steps=100))
    env.reset()
    res = env.step(np.array([1.0, 1.0, 1.0]))
    pops = res.info["populations"]
    assert res.reward == pytest.approx(-(1.0 - pops[4]), rel=1e-12)


# ------------------------------------------------------------ termination
def test_protocol_errors():
    env = CtapEnv(ScenarioConfig())
    with pytest.raises(ProtocolError):
        env.step(np.zeros(2))
    env.reset()
    with pytest.raises(ArgumentError):
        env.step(np.zeros(3))
    with pytest.raises(ArgumentError):
        env.step(np.array([np.nan, 0.0]))


def test_episode_runs_exactly_n_steps():
    cfg = ScenarioConfig(n_steps=7)
    env = CtapEnv(cfg)
    env.reset()
    for k in range(7):
        res = env.step(np.array([0.3, 0.3]))
        assert res.done == (k == 6)
    with pytest.raises(ProtocolError):
        env.step(np.array([0.3, 0.3]))


def test_threshold_early_stop_uses_patience():
    # drive hard so the target population quickly exceeds a low threshold;
    # the episode must stop after exactly `patience` consecutive hits
    cfg = ScenarioConfig(rho33_threshold=0.001, patience=3)
    env = CtapEnv(cfg)
    env.reset()
    steps, hits = 0, 0
    while True:
        res = env.step(np.array([1.0, 1.0]))
        steps += 1
        if res.info["populations"][2] > 0.001:
            hits += 1
        else:
            hits = 0
        if res.done:
            break
    assert hits == 3
    assert steps < cfg.n_steps


def test_reset_restores_initial_state():
    env = CtapEnv(ScenarioConfig())
    env.reset()
    env.step(np.array([0.9, 0.1]))
    obs = env.reset()
    assert obs[0] == 1.0
    assert np.abs(obs[1:]).max() == 0.0
    assert env.step_index == 0
    assert env.done is False


# ------------------------------------------------------------ consistency
def test_env_matches_evolve_trajectory():
    cfg = ScenarioConfig(gamma_d=0.01, t_max_pi_units=5.0)
    env = CtapEnv(cfg)
    env.reset()
    rng = np.random.default_rng(11)
    actions = rng.uniform(0.0, 1.0, (10, 2))
    for a in actions:
        env.step(a)
    sched = PulseSchedule(cfg.t_max, cfg.n_steps,
                          [np.concatenate([actions[:, 0],
                                           np.zeros(cfg.n_steps - 10)]),
                           np.concatenate([actions[:, 1],
                                           np.zeros(cfg.n_steps - 10)])])
    traj = evolve(cfg.model(), sched)
    assert np.abs(env.rho - traj.states[10]).max() < 1e-13


def test_env_is_deterministic():
    cfg = ScenarioConfig(gamma_l=0.05, t_max_pi_units=10.0)
    rng = np.random.default_rng(13)
    actions = rng.uniform(0.0, 1.0, (20, 2))
    outs = []
    for _ in range(2):
        env = CtapEnv(cfg)
        env.reset()
        outs.append([env.step(a).observation for a in actions])
    for a, b in zip(*outs):
        assert np.abs(a - b).max() == 0.0


def test_loss_scenario_reports_vacuum():
    env = CtapEnv(ScenarioConfig(gamma_l=0.1, t_max_pi_units=10.0))
    env.reset()
    res = env.step(np.array([1.0, 1.0]))
    assert res.info["vacuum"] > 0.0
    assert res.info["trace"] == pytest.approx(1.0, abs=1e-9)
    assert res.observation.shape == (11,)  # vacuum row is not observed


def test_encode_observation_is_pure():
    cfg = ScenarioConfig()
    m = cfg.model()
    rho = np.zeros((3, 3), dtype=complex)
    rho[0, 0] = 0.25
    rho[1, 1] = 0.35
    rho[2, 2] = 0.40
    rho[0, 2] = 0.1 + 0.2j
    rho[2, 0] = 0.1 - 0.2j
    obs = encode_observation(rho, np.array([0.4, 0.8]), m, "full")
    assert obs[0] == 0.25 and obs[1] == 0.35 and obs[2] == 0.40
    assert obs[5] == 0.1 and obs[6] == 0.2
    assert obs[9] == 0.4 and obs[10] == 0.8
