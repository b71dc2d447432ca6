"""Episodic control environment wrapping the master-equation simulator.

One episode = one transfer attempt across the chain with piecewise-constant
controls chosen step by step. Observations expose density-matrix entries
(full mode) or just the two populations that matter plus the previous
action (reduced mode).
"""
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ConfigError, ProtocolError
from .quantum import (MasterEquationModel, OMEGA_MAX, Propagator,
                      initial_state)

_OBS_MODES = ("full", "reduced")


@dataclass
class ScenarioConfig:
    n_dots: int = 3
    t_max_pi_units: float = 12.0
    n_steps: int = 50
    delta12: float = 0.0
    delta23: float = 0.0
    gamma_d: float = 0.0
    gamma_l: float = 0.0
    alpha: float = 1.0
    beta: float = 4.0
    rho33_threshold: float = None
    patience: int = 5
    observation_mode: str = "full"

    def __post_init__(self):
        if self.n_dots not in (3, 5):
            raise ArgumentError("n_dots must be 3 or 5")
        if self.t_max_pi_units <= 0:
            raise ArgumentError("t_max_pi_units must be positive")
        if self.n_steps < 2:
            raise ArgumentError("n_steps must be >= 2")
        if self.observation_mode not in _OBS_MODES:
            raise ArgumentError(
                f"observation_mode must be one of {_OBS_MODES}")
        if self.n_dots == 5 and self.observation_mode == "reduced":
            raise ArgumentError("reduced observations are defined for the "
                                "3-dot chain only")
        if self.n_dots == 5 and (self.delta12 != 0 or self.delta23 != 0):
            raise ArgumentError("detuning is modeled for the 3-dot chain "
                                "only")
        if self.n_dots == 3 and (self.alpha <= 0 or self.beta <= 0):
            raise ArgumentError("alpha and beta must be positive")
        if self.rho33_threshold is not None \
                and not 0.0 < self.rho33_threshold <= 1.0:
            raise ArgumentError("rho33_threshold must lie in (0, 1]")
        if self.patience < 1:
            raise ArgumentError("patience must be >= 1")

    @property
    def t_max(self):
        """Episode length in natural time units."""
        return self.t_max_pi_units * np.pi

    @property
    def n_actions(self):
        return 2 if self.n_dots == 3 else 3

    def model(self):
        if self.n_dots == 3:
            delta = (0.0, self.delta12, self.delta12 + self.delta23)
        else:
            delta = (0.0,) * 5
        return MasterEquationModel(n_dots=self.n_dots, delta=delta,
                                   gamma_d=self.gamma_d,
                                   gamma_l=self.gamma_l)

    def observation_dim(self):
        if self.observation_mode == "reduced":
            return 4
        if self.n_dots == 3:
            return 11
        return 28


_CONFIG_FIELDS = {
    "n_dots": int,
    "t_max_pi_units": float,
    "n_steps": int,
    "delta12": float,
    "delta23": float,
    "gamma_d": float,
    "gamma_l": float,
    "alpha": float,
    "beta": float,
    "rho33_threshold": float,
    "patience": int,
    "observation_mode": str,
}


def parse_scenario_config(text):
    """Parse the flat key-value scenario format (used for config files)."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _CONFIG_FIELDS:
            raise ConfigError("unknown key", key=key, line=lineno)
        if key in values:
            raise ConfigError("duplicate key", key=key, line=lineno)
        caster = _CONFIG_FIELDS[key]
        if key == "rho33_threshold" and val.lower() == "none":
            values[key] = None
            continue
        try:
            values[key] = caster(val)
        except ValueError as exc:
            raise ConfigError(f"bad value {val!r}: {exc}", key=key,
                              line=lineno) from exc
    try:
        return ScenarioConfig(**values)
    except ArgumentError as exc:
        raise ConfigError(str(exc)) from exc


def load_scenario_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario_config(fh.read())


def reward_ctap3(rho22, rho33, alpha, beta):
    """Per-step reward for the 3-dot transfer: pushes population into the
    last dot while penalizing any occupation of the middle dot."""
    return alpha * (-1.0 + rho33 - rho22) - np.exp(beta * rho22)


def reward_sctap5(rho55):
    """Per-step reward for the 5-dot transfer: negative miss of the final
    population, maximal (zero) at perfect transfer."""
    return -(1.0 - rho55)


def _dot_block(rho, model):
    lo = 1 if model.include_vacuum else 0
    return rho[lo:lo + model.n_dots, lo:lo + model.n_dots]


def encode_observation(rho, prev_action, model, mode):
    """Fixed bijection from the dot-block state to the observation vector.

    Full mode lists populations first, then Re/Im pairs of the upper
    off-diagonals row by row, then the previous action normalized by
    Omega_max. Reduced mode keeps only the two populations the reward
    reads plus the previous action.
    """
    block = _dot_block(rho, model)
    prev = np.asarray(prev_action, dtype=float) / OMEGA_MAX
    if mode == "reduced":
        return np.array([block[1, 1].real, block[2, 2].real,
                         prev[0], prev[1]])
    n = model.n_dots
    vals = [block[i, i].real for i in range(n)]
    for i, j in [(i, j) for i in range(n) for j in range(i + 1, n)]:
        vals.append(block[i, j].real)
        vals.append(block[i, j].imag)
    return np.array(vals + list(prev))


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict


class CtapEnv:
    """Single-episode environment; one instance per rollout worker."""

    def __init__(self, config, n_substeps=20):
        self.config = config
        self.model = config.model()
        self.propagator = Propagator(self.model, n_substeps=n_substeps)
        self.dt = config.t_max / config.n_steps
        self.rho = None
        self.prev_action = np.zeros(config.n_actions)
        self.step_index = 0
        self.done = False
        self._streak = 0

    def reset(self, seed=None):
        # seed is accepted for forward compatibility; the dynamics and the
        # initial state are deterministic
        del seed
        self.rho = initial_state(self.model)
        self.prev_action = np.zeros(self.config.n_actions)
        self.step_index = 0
        self.done = False
        self._streak = 0
        return self._observe()

    def _observe(self):
        return encode_observation(self.rho, self.prev_action, self.model,
                                  self.config.observation_mode)

    def _populations(self):
        block = _dot_block(self.rho, self.model)
        return np.array([block[i, i].real for i in range(self.model.n_dots)])

    def step(self, action):
        if self.rho is None:
            raise ProtocolError("call reset before step")
        if self.done:
            raise ProtocolError("episode finished; call reset")
        action = np.asarray(action, dtype=float)
        if action.shape != (self.config.n_actions,):
            raise ArgumentError(
                f"expected {self.config.n_actions} action values")
        if not np.isfinite(action).all():
            raise ArgumentError("action contains non-finite values")
        clipped = np.clip(action, 0.0, OMEGA_MAX)
        self.rho = self.propagator.step(self.rho, clipped, self.dt,
                                        method="rk4",
                                        step_index=self.step_index)
        self.step_index += 1
        self.prev_action = clipped.copy()
        pops = self._populations()
        if self.config.n_dots == 3:
            reward = reward_ctap3(pops[1], pops[2], self.config.alpha,
                                  self.config.beta)
        else:
            reward = reward_sctap5(pops[4])
        target_pop = pops[-1]
        if self.config.rho33_threshold is not None \
                and target_pop > self.config.rho33_threshold:
            self._streak += 1
        else:
            self._streak = 0
        self.done = (self.step_index >= self.config.n_steps
                     or self._streak >= self.config.patience)
        info = {
            "step": self.step_index,
            "populations": pops,
            "trace": float(np.trace(self.rho).real),
            "vacuum": float(self.rho[0, 0].real)
            if self.model.include_vacuum else 0.0,
        }
        return StepResult(observation=self._observe(), reward=float(reward),
                          done=self.done, info=info)
