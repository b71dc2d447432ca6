"""Trust-region policy optimization for the pulse-design environment.

Everything is built on the manual-backprop multilayer perceptron from
:mod:`ctaplab.nets`: a squashed-Gaussian policy, a value baseline fit by
Adam, generalized advantage estimation, and a KL-constrained natural
gradient step computed with conjugate gradient plus a backtracking line
search.  No autodiff framework is involved, which keeps every gradient
auditable against finite differences.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .env import CtapEnv, ScenarioConfig
from .errors import ArgumentError, ConfigError, NumericalError
from .linalg import Rng, conjugate_gradient
from .nets import Adam, Mlp, sigmoid
from .pulses import PulseSchedule, moving_average, spline_resample
from .quantum import OMEGA_MAX, evolve

CHECKPOINT_VERSION = 1
SMOOTHING_MODES = ("none", "ma4", "spline")


# --------------------------------------------------------------- policy
class GaussianPolicy:
    """Diagonal Gaussian policy with a sigmoid-squashed mean network.

    The mean is ``Omega_max * sigmoid(raw)`` per action component, which
    keeps deterministic actions strictly inside the admissible coupling
    range while keeping a nonzero gradient everywhere.  The log standard
    deviation is a state-independent vector appended to the flattened
    parameters, so the natural-gradient step updates it jointly with the
    network weights.
    """

    def __init__(self, obs_dim, hidden, act_dim, rng=None,
                 log_std_init=math.log(0.3)):
        self.net = Mlp((int(obs_dim), *map(int, hidden), int(act_dim)), rng,
                       out_scale=0.01)
        self.log_std = np.full(int(act_dim), float(log_std_init))
        self.act_dim = int(act_dim)

    @property
    def obs_dim(self):
        return self.net.layer_dims[0]

    def means(self, obs_batch):
        """Batched mean actions plus the forward cache for backprop."""
        obs_batch = np.asarray(obs_batch, dtype=float)
        if obs_batch.ndim != 2 or obs_batch.shape[1] != self.obs_dim:
            raise ArgumentError(
                f"expected observations of width {self.obs_dim}")
        raw, cache = self.net.forward(obs_batch)
        return OMEGA_MAX * sigmoid(raw), cache

    def mean_action(self, obs):
        """Deterministic action for a single observation."""
        return self.means(np.asarray(obs, dtype=float)[None])[0][0]

    def log_prob(self, means, actions):
        var = np.exp(2.0 * self.log_std)
        return (-0.5 * (actions - means) ** 2 / var
                - self.log_std - 0.5 * math.log(2.0 * math.pi)).sum(axis=1)

    def n_params(self):
        return self.net.n_params() + self.act_dim

    def flat(self):
        return np.concatenate([self.net.flat(), self.log_std])

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params(),):
            raise ArgumentError("parameter vector has the wrong length")
        self.net.set_flat(vec[:-self.act_dim])
        self.log_std = vec[-self.act_dim:].copy()


def policy_forward(policy, obs):
    """Mean action and log-std for one observation vector."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (policy.obs_dim,):
        raise ArgumentError(
            f"expected an observation of length {policy.obs_dim}")
    mean, _ = policy.means(obs[None])
    return mean[0], policy.log_std.copy()


def sample_action(policy, obs, rng):
    """Draw an exploratory action; the env clips it, we never do."""
    mean, _ = policy_forward(policy, obs)
    action = mean + np.exp(policy.log_std) * rng.normal(policy.act_dim)
    log_prob = float(policy.log_prob(mean[None], action[None])[0])
    return action, log_prob


# ------------------------------------------------------------ value net
class ValueFunction:
    """MLP state-value baseline trained on normalized returns.

    Targets are standardized per refit; the normalization constants are
    retained so predictions stay calibrated between refits and survive
    checkpointing.
    """

    def __init__(self, layer_dims, rng=None, lr=1e-3):
        self.net = Mlp(layer_dims, rng)
        self.opt = Adam(self.net.n_params(), lr=lr)
        self.ret_mean = 0.0
        self.ret_std = 1.0

    def predict(self, obs_batch):
        out, _ = self.net.forward(np.asarray(obs_batch, dtype=float))
        return out[:, 0] * self.ret_std + self.ret_mean

    def fit(self, obs, returns, epochs, rng, minibatch=64):
        self.ret_mean = float(returns.mean())
        self.ret_std = float(max(returns.std(), 1e-8))
        targets = (returns - self.ret_mean) / self.ret_std
        params = self.net.flat()
        n = obs.shape[0]
        for _ in range(int(epochs)):
            order = rng.permutation(n)
            for lo in range(0, n, minibatch):
                idx = order[lo:lo + minibatch]
                pred, cache = self.net.forward(obs[idx])
                dout = 2.0 * (pred[:, 0] - targets[idx])[:, None] / idx.size
                grads_w, grads_b = self.net.backward(cache, dout)
                grad = np.concatenate([g.ravel()
                                       for g in grads_w + grads_b])
                params = self.opt.update(params, grad)
                self.net.set_flat(params)


# ----------------------------------------------------- advantage estimation
def discounted_advantages(rewards, values, discount, gae_lambda):
    """Per-episode GAE, pre-normalization.

    ``values`` must carry one extra entry: the bootstrap value of the
    state after the last transition (zero at a terminal horizon).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.shape != (rewards.size + 1,):
        raise ArgumentError("values must hold one bootstrap entry beyond "
                            "the rewards")
    deltas = rewards + discount * values[1:] - values[:-1]
    advantages = np.zeros_like(rewards)
    running = 0.0
    for t in reversed(range(rewards.size)):
        running = deltas[t] + discount * gae_lambda * running
        advantages[t] = running
    return advantages, advantages + values[:-1]


def compute_gae(episodes, discount, gae_lambda):
    """Batch advantages (normalized) and returns from (rewards, values).

    ``episodes`` is a sequence of per-episode pairs; the concatenated
    advantages are shifted and scaled to zero mean and unit variance so
    the surrogate gradient scale is batch-size independent.
    """
    if not episodes:
        raise ArgumentError("cannot compute advantages of an empty batch")
    adv_parts, ret_parts = [], []
    for rewards, values in episodes:
        adv, ret = discounted_advantages(rewards, values, discount,
                                         gae_lambda)
        adv_parts.append(adv)
        ret_parts.append(ret)
    advantages = np.concatenate(adv_parts)
    returns = np.concatenate(ret_parts)
    advantages = (advantages - advantages.mean()) \
        / max(advantages.std(), 1e-8)
    return advantages, returns


# ------------------------------------------------------------- rollouts
@dataclass
class RolloutBatch:
    observations: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    episode_returns: np.ndarray
    final_target_pops: np.ndarray
    max_rho22: float

    @property
    def mean_return(self):
        return float(self.episode_returns.mean())

    @property
    def mean_final_target(self):
        return float(self.final_target_pops.mean())


class RolloutWorker:
    """Owns one env instance and one exploration stream.

    Workers are the unit of determinism: each is seeded independently as
    ``seed + worker_index`` and their episodes are merged in worker-index
    order, so results do not depend on scheduling.
    """

    def __init__(self, env_config, seed, n_substeps=20):
        self.env = CtapEnv(env_config, n_substeps=n_substeps)
        self.rng = Rng(seed)

    def run_episodes(self, policy, value_fn, n_episodes):
        episodes = []
        for _ in range(n_episodes):
            obs_list, act_list, lp_list, rew_list = [], [], [], []
            final_pop, max_rho22 = 0.0, 0.0
            obs = self.env.reset()
            done = False
            while not done:
                action, log_prob = sample_action(policy, obs, self.rng)
                result = self.env.step(action)
                obs_list.append(obs)
                act_list.append(action)
                lp_list.append(log_prob)
                rew_list.append(result.reward)
                pops = result.info["populations"]
                final_pop = float(pops[-1])
                max_rho22 = max(max_rho22, float(pops[1]))
                obs = result.observation
                done = result.done
            observations = np.array(obs_list)
            values = np.append(value_fn.predict(observations), 0.0)
            episodes.append({
                "observations": observations,
                "actions": np.array(act_list),
                "log_probs": np.array(lp_list),
                "rewards": np.array(rew_list),
                "values": values,
                "final_target_pop": final_pop,
                "max_rho22": max_rho22,
            })
        return episodes


def collect_rollouts(policy, value_fn, workers, n_episodes, discount,
                     gae_lambda):
    """Gather a batch of episodes across workers and assemble tensors."""
    n_workers = len(workers)
    base, extra = divmod(n_episodes, n_workers)
    counts = [base + (1 if w < extra else 0) for w in range(n_workers)]
    if n_workers == 1:
        per_worker = [workers[0].run_episodes(policy, value_fn, counts[0])]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            futures = [pool.submit(w.run_episodes, policy, value_fn, c)
                       for w, c in zip(workers, counts)]
            per_worker = [f.result() for f in futures]
    episodes = [ep for worker_eps in per_worker for ep in worker_eps]
    advantages, returns = compute_gae(
        [(ep["rewards"], ep["values"]) for ep in episodes],
        discount, gae_lambda)
    return RolloutBatch(
        observations=np.concatenate([ep["observations"] for ep in episodes]),
        actions=np.concatenate([ep["actions"] for ep in episodes]),
        log_probs=np.concatenate([ep["log_probs"] for ep in episodes]),
        advantages=advantages,
        returns=returns,
        episode_returns=np.array([ep["rewards"].sum() for ep in episodes]),
        final_target_pops=np.array([ep["final_target_pop"]
                                    for ep in episodes]),
        max_rho22=max(ep["max_rho22"] for ep in episodes),
    )


# -------------------------------------------------------------- config
@dataclass
class TrpoConfig:
    discount: float = 0.99
    gae_lambda: float = 0.97
    max_kl: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtrack_ratio: float = 0.8
    max_backtracks: int = 10
    episodes_per_batch: int = 20
    value_fit_epochs: int = 5
    value_lr: float = 1e-3
    total_epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.discount <= 1.0:
            raise ArgumentError("discount must lie in (0, 1]")
        if not 0.0 < self.gae_lambda <= 1.0:
            raise ArgumentError("gae_lambda must lie in (0, 1]")
        if self.max_kl <= 0.0:
            raise ArgumentError("max_kl must be positive")
        if self.cg_damping < 0.0:
            raise ArgumentError("cg_damping must be >= 0")
        if not 0.0 < self.backtrack_ratio < 1.0:
            raise ArgumentError("backtrack_ratio must lie in (0, 1)")
        for name in ("cg_iters", "max_backtracks", "episodes_per_batch",
                     "value_fit_epochs"):
            if int(getattr(self, name)) < 1:
                raise ArgumentError(f"{name} must be a positive integer")
            setattr(self, name, int(getattr(self, name)))
        if self.value_lr <= 0.0:
            raise ArgumentError("value_lr must be positive")
        if int(self.total_epochs) < 0:
            raise ArgumentError("total_epochs must be >= 0")
        self.total_epochs = int(self.total_epochs)
        self.seed = int(self.seed)


_TRPO_FIELDS = {
    "discount": float,
    "gae_lambda": float,
    "max_kl": float,
    "cg_iters": int,
    "cg_damping": float,
    "backtrack_ratio": float,
    "max_backtracks": int,
    "episodes_per_batch": int,
    "value_fit_epochs": int,
    "value_lr": float,
    "total_epochs": int,
    "seed": int,
}


def parse_trpo_config(text):
    """Parse ``key = value`` lines (# comments allowed) into a TrpoConfig."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _TRPO_FIELDS:
            raise ConfigError(f"unknown option '{key}'", key=key,
                              line=lineno)
        if key in values:
            raise ConfigError(f"duplicate option '{key}'", key=key,
                              line=lineno)
        try:
            values[key] = _TRPO_FIELDS[key](val)
        except ValueError as exc:
            raise ConfigError(f"bad value for '{key}': {val}", key=key,
                              line=lineno) from exc
    try:
        return TrpoConfig(**values)
    except ArgumentError as exc:
        raise ConfigError(str(exc)) from exc


def load_trpo_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_trpo_config(fh.read())


# ------------------------------------------------------------ the update
@dataclass
class UpdateStats:
    kl: float
    accepted: bool
    improvement: float
    grad_norm: float


def surrogate_loss_and_gradient(policy, obs, actions, old_log_probs,
                                advantages):
    """Importance-ratio surrogate objective and its parameter gradient.

    Returns ``(loss, grad)`` where ``loss = mean(ratio * advantage)`` and
    ``grad`` is its gradient in the policy's flat parameter vector,
    evaluated at the current parameters.
    """
    n_samples = obs.shape[0]
    mean, cache = policy.means(obs)
    var = np.exp(2.0 * policy.log_std)
    log_probs = policy.log_prob(mean, actions)
    ratio = np.exp(log_probs - old_log_probs)
    loss = float((ratio * advantages).mean())
    coeff = (ratio * advantages)[:, None] / n_samples
    dmean = coeff * (actions - mean) / var
    dmean_draw = mean * (1.0 - mean / OMEGA_MAX)
    grads_w, grads_b = policy.net.backward(cache, dmean * dmean_draw)
    grad_log_std = (coeff * ((actions - mean) ** 2 / var - 1.0)).sum(axis=0)
    grad = np.concatenate([np.concatenate([g.ravel()
                                           for g in grads_w + grads_b]),
                           grad_log_std])
    return loss, grad


def mean_kl_and_gradient(policy, obs, old_means, old_log_std):
    """Average KL(old || current) over a batch, and its parameter gradient.

    ``old_means`` and ``old_log_std`` describe the fixed reference
    Gaussian per observation; the gradient is taken in the current
    policy's flat parameter vector.
    """
    n_samples = obs.shape[0]
    mean, cache = policy.means(obs)
    var = np.exp(2.0 * policy.log_std)
    var_old = np.exp(2.0 * np.asarray(old_log_std, dtype=float))
    diff = mean - old_means
    kl = float((policy.log_std - np.asarray(old_log_std, dtype=float)
                + (var_old + diff ** 2) / (2.0 * var)
                - 0.5).sum(axis=1).mean())
    dmean = diff / var / n_samples
    dmean_draw = mean * (1.0 - mean / OMEGA_MAX)
    grads_w, grads_b = policy.net.backward(cache, dmean * dmean_draw)
    grad_log_std = (1.0 - (var_old + diff ** 2) / var).mean(axis=0)
    grad = np.concatenate([np.concatenate([g.ravel()
                                           for g in grads_w + grads_b]),
                           grad_log_std])
    return kl, grad


def trpo_update(policy, value_fn, batch, cfg, rng):
    """One KL-constrained natural-gradient step plus a value refit.

    The Fisher-vector product uses the Gauss-Newton form for a diagonal
    Gaussian: a forward-mode sweep through the mean network, a diagonal
    metric 1/sigma^2, and a reverse sweep back, plus the exact 2*v block
    for the log-std coordinates.
    """
    obs = batch.observations
    actions = batch.actions
    old_log_probs = batch.log_probs
    adv = batch.advantages
    n_samples = obs.shape[0]

    mean_old, cache = policy.means(obs)
    var_old = np.exp(2.0 * policy.log_std)
    dmean_draw = mean_old * (1.0 - mean_old / OMEGA_MAX)

    surrogate_old, grad = surrogate_loss_and_gradient(
        policy, obs, actions, old_log_probs, adv)
    if not np.isfinite(grad).all():
        raise NumericalError("policy gradient contains non-finite entries; "
                             f"batch size {n_samples}, "
                             f"log_std {policy.log_std}")

    grad_norm = float(np.linalg.norm(grad))
    if grad_norm < 1e-12:
        stats = UpdateStats(kl=0.0, accepted=False, improvement=0.0,
                            grad_norm=grad_norm)
    else:
        def fisher_vector_product(vec):
            tangent_w, tangent_b = policy.net.unflat(vec[:-policy.act_dim])
            dz = policy.net.jvp(cache, tangent_w, tangent_b)
            dmean_dir = dz * dmean_draw
            weighted = dmean_dir / var_old / n_samples
            back_w, back_b = policy.net.backward(cache,
                                                 weighted * dmean_draw)
            net_part = np.concatenate([g.ravel()
                                       for g in back_w + back_b])
            full = np.concatenate([net_part,
                                   2.0 * vec[-policy.act_dim:]])
            return full + cfg.cg_damping * vec

        direction = conjugate_gradient(fisher_vector_product, grad,
                                       iters=cfg.cg_iters, tol=1e-10).x
        curvature = direction @ (fisher_vector_product(direction)
                                 - cfg.cg_damping * direction)
        step = math.sqrt(2.0 * cfg.max_kl / max(curvature, 1e-12)) \
            * direction

        params_old = policy.flat()
        accepted = False
        kl_measured = 0.0
        improvement = 0.0
        fraction = 1.0
        for _ in range(cfg.max_backtracks):
            policy.set_flat(params_old + fraction * step)
            mean_new, _ = policy.means(obs)
            var_new = np.exp(2.0 * policy.log_std)
            log_probs_new = policy.log_prob(mean_new, actions)
            ratio = np.exp(log_probs_new - old_log_probs)
            surrogate_new = float((ratio * adv).mean())
            kl = float((np.log(var_new / var_old) / 2.0
                        + (var_old + (mean_old - mean_new) ** 2)
                        / (2.0 * var_new) - 0.5).sum(axis=1).mean())
            if kl <= cfg.max_kl and surrogate_new - surrogate_old > 0.0:
                accepted = True
                kl_measured = kl
                improvement = surrogate_new - surrogate_old
                break
            fraction *= cfg.backtrack_ratio
        if not accepted:
            policy.set_flat(params_old)
        stats = UpdateStats(kl=kl_measured, accepted=accepted,
                            improvement=improvement, grad_norm=grad_norm)

    value_fn.fit(obs, batch.returns, cfg.value_fit_epochs, rng)
    return stats


# ------------------------------------------------------------- training
def _worker_cap(n_workers):
    cap = os.environ.get("CTAP_THREADS")
    if cap:
        try:
            n_workers = min(n_workers, max(1, int(cap)))
        except ValueError:
            pass
    return max(1, int(n_workers))


def train(env_config, trpo_config, hidden=(16,), *, warm_start=None,
          n_workers=1, n_substeps=20, callback=None):
    """Run the full training loop.

    Returns the best-by-mean-final-target checkpoint plus the per-epoch
    log rows.  ``callback(epoch, row, policy, value_fn)`` is invoked after
    every epoch; a truthy return stops training early (used for wall-clock
    budgets and evaluation-based stopping).
    """
    n_workers = _worker_cap(n_workers)
    rng = Rng(trpo_config.seed)
    obs_dim = env_config.observation_dim()
    act_dim = env_config.n_actions
    policy = GaussianPolicy(obs_dim, hidden, act_dim, rng)
    value_fn = ValueFunction((obs_dim, *hidden, 1), rng,
                             lr=trpo_config.value_lr)
    if warm_start is not None:
        _restore_from_checkpoint(policy, value_fn, warm_start, env_config)
    workers = [RolloutWorker(env_config, trpo_config.seed + w, n_substeps)
               for w in range(n_workers)]

    log_rows = []
    best_score = -math.inf
    best_policy_flat = policy.flat().copy()
    best_value_state = _value_state(value_fn)
    best_epoch = -1
    best_metrics = {}
    for epoch in range(trpo_config.total_epochs):
        batch = collect_rollouts(policy, value_fn, workers,
                                 trpo_config.episodes_per_batch,
                                 trpo_config.discount,
                                 trpo_config.gae_lambda)
        pre_update_flat = policy.flat().copy()
        pre_update_value = _value_state(value_fn)
        stats = trpo_update(policy, value_fn, batch, trpo_config, rng)
        row = {
            "epoch": epoch,
            "mean_return": batch.mean_return,
            "mean_final_rho33": batch.mean_final_target,
            "max_rho22": batch.max_rho22,
            "kl": stats.kl,
            "accepted": int(stats.accepted),
        }
        log_rows.append(row)
        if batch.mean_final_target > best_score:
            best_score = batch.mean_final_target
            best_policy_flat = pre_update_flat
            best_value_state = pre_update_value
            best_epoch = epoch
            best_metrics = {k: v for k, v in row.items() if k != "epoch"}
        if callback is not None and callback(epoch, row, policy, value_fn):
            break

    best_policy = GaussianPolicy(obs_dim, hidden, act_dim)
    best_policy.set_flat(best_policy_flat)
    best_value = ValueFunction((obs_dim, *hidden, 1),
                               lr=trpo_config.value_lr)
    _set_value_state(best_value, best_value_state)
    checkpoint = make_checkpoint(best_policy, best_value, env_config,
                                 seed=trpo_config.seed, epoch=best_epoch,
                                 metrics=best_metrics)
    return checkpoint, log_rows


def training_log_to_csv(rows):
    header = "epoch,mean_return,mean_final_rho33,max_rho22,kl,accepted"
    lines = [header]
    for row in rows:
        lines.append(",".join([
            str(int(row["epoch"])),
            format(row["mean_return"], ".12g"),
            format(row["mean_final_rho33"], ".12g"),
            format(row["max_rho22"], ".12g"),
            format(row["kl"], ".12g"),
            str(int(row["accepted"])),
        ]))
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------- checkpoints
def _value_state(value_fn):
    return {
        "flat": value_fn.net.flat(),
        "ret_mean": value_fn.ret_mean,
        "ret_std": value_fn.ret_std,
    }


def _set_value_state(value_fn, state):
    value_fn.net.set_flat(state["flat"])
    value_fn.ret_mean = state["ret_mean"]
    value_fn.ret_std = state["ret_std"]


def make_checkpoint(policy, value_fn, env_config, seed, epoch, metrics):
    """Serializable snapshot of policy, baseline, and context."""
    return {
        "version": CHECKPOINT_VERSION,
        "obs_layout": env_config.observation_mode,
        "layer_dims": list(policy.net.layer_dims),
        "weights": [w.tolist() for w in policy.net.weights],
        "biases": [b.tolist() for b in policy.net.biases],
        "log_std": policy.log_std.tolist(),
        "env_config": dataclasses.asdict(env_config),
        "seed": int(seed),
        "epoch": int(epoch),
        "metrics": {k: (float(v) if isinstance(v, (int, float)) else v)
                    for k, v in metrics.items()},
        "value_net": {
            "layer_dims": list(value_fn.net.layer_dims),
            "weights": [w.tolist() for w in value_fn.net.weights],
            "biases": [b.tolist() for b in value_fn.net.biases],
        },
        "return_norm": {
            "mean": value_fn.ret_mean,
            "std": value_fn.ret_std,
        },
    }


def save_checkpoint(checkpoint, path):
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint, fh, indent=1)
        fh.write("\n")
    os.replace(tmp_path, path)


def load_checkpoint(path):
    with open(path, "r", encoding="utf-8") as fh:
        checkpoint = json.load(fh)
    if checkpoint.get("version") != CHECKPOINT_VERSION:
        raise ArgumentError(
            f"unsupported checkpoint version {checkpoint.get('version')}")
    return checkpoint


def _mlp_from_lists(layer_dims, weights, biases):
    net = Mlp(layer_dims)
    mats = [np.asarray(w, dtype=float) for w in weights]
    vecs = [np.asarray(b, dtype=float) for b in biases]
    if len(mats) != net.n_layers or len(vecs) != net.n_layers:
        raise ArgumentError("checkpoint layer count mismatch")
    for i, (w, b) in enumerate(zip(mats, vecs)):
        if w.shape != net.weights[i].shape or b.shape != net.biases[i].shape:
            raise ArgumentError("checkpoint parameter shape mismatch")
    net.weights = mats
    net.biases = vecs
    return net


def policy_from_checkpoint(checkpoint):
    """Rebuild the policy and the env config echoed in the checkpoint."""
    dims = checkpoint["layer_dims"]
    policy = GaussianPolicy(dims[0], dims[1:-1], dims[-1])
    policy.net = _mlp_from_lists(dims, checkpoint["weights"],
                                 checkpoint["biases"])
    policy.log_std = np.asarray(checkpoint["log_std"], dtype=float)
    if policy.log_std.shape != (policy.act_dim,):
        raise ArgumentError("checkpoint log_std length mismatch")
    env_config = ScenarioConfig(**checkpoint["env_config"])
    return policy, env_config


def value_from_checkpoint(checkpoint, lr=1e-3):
    spec = checkpoint["value_net"]
    value_fn = ValueFunction(spec["layer_dims"], lr=lr)
    value_fn.net = _mlp_from_lists(spec["layer_dims"], spec["weights"],
                                   spec["biases"])
    value_fn.ret_mean = float(checkpoint["return_norm"]["mean"])
    value_fn.ret_std = float(checkpoint["return_norm"]["std"])
    return value_fn


def _restore_from_checkpoint(policy, value_fn, checkpoint, env_config):
    loaded_policy, ckpt_config = policy_from_checkpoint(checkpoint)
    if loaded_policy.obs_dim != policy.obs_dim \
            or loaded_policy.act_dim != policy.act_dim:
        raise ArgumentError("warm-start checkpoint does not match the "
                            "environment dimensions")
    if ckpt_config.observation_mode != env_config.observation_mode:
        raise ArgumentError("warm-start checkpoint uses observation mode "
                            f"'{ckpt_config.observation_mode}', the env "
                            f"uses '{env_config.observation_mode}'")
    if loaded_policy.net.layer_dims == policy.net.layer_dims:
        policy.set_flat(loaded_policy.flat())
    else:
        raise ArgumentError("warm-start hidden shape mismatch: checkpoint "
                            f"{loaded_policy.net.layer_dims}, requested "
                            f"{policy.net.layer_dims}")
    loaded_value = value_from_checkpoint(checkpoint)
    if loaded_value.net.layer_dims != value_fn.net.layer_dims:
        raise ArgumentError("warm-start value-net shape mismatch")
    value_fn.net.set_flat(loaded_value.net.flat())
    value_fn.ret_mean = loaded_value.ret_mean
    value_fn.ret_std = loaded_value.ret_std


# ------------------------------------------------------------ evaluation
@dataclass
class EvalResult:
    schedule: PulseSchedule
    smoothed_schedule: PulseSchedule
    trajectory: object
    metrics: dict


def apply_smoothing(schedule, smoothing):
    if smoothing == "none":
        return schedule
    if smoothing == "ma4":
        return moving_average(schedule, 4)
    if smoothing == "spline":
        return spline_resample(schedule, 4 * schedule.n_steps)
    raise ArgumentError(f"unknown smoothing mode '{smoothing}'; "
                        f"expected one of {SMOOTHING_MODES}")


def _trajectory_metrics(trajectory):
    pops = trajectory.populations()
    times = trajectory.times
    n_dots = trajectory.model.n_dots
    metrics = {"final_fidelity": float(pops[-1, -1]),
               "final_trace": float(trajectory.traces()[-1])}
    if trajectory.model.include_vacuum:
        metrics["max_vacuum"] = float(trajectory.vacuum_population().max())
    for k in range(1, n_dots):
        metrics[f"max_rho{k + 1}{k + 1}"] = float(pops[:, k].max())
    target = pops[:, -1]
    for threshold, key in ((0.9, "t_reach_090"), (0.99, "t_reach_099")):
        hit = np.nonzero(target >= threshold)[0]
        metrics[key] = float(times[hit[0]]) if hit.size else None
    return metrics


def evaluate_schedule(schedule, env_config, smoothing="none",
                      n_substeps=20, extra_metrics=None):
    """Simulate a pulse schedule (optionally smoothed) and score it."""
    smoothed = apply_smoothing(schedule, smoothing)
    model = env_config.model()
    trajectory = evolve(model, smoothed, n_substeps=n_substeps)
    metrics = _trajectory_metrics(trajectory)
    if smoothing != "none":
        raw_traj = evolve(model, schedule, n_substeps=n_substeps)
        raw_pops = raw_traj.populations()
        metrics["raw_final_fidelity"] = float(raw_pops[-1, -1])
        metrics["raw_max_rho22"] = float(raw_pops[:, 1].max())
    if extra_metrics:
        metrics.update(extra_metrics)
    return EvalResult(schedule=schedule, smoothed_schedule=smoothed,
                      trajectory=trajectory, metrics=metrics)


def rollout_schedule(policy, env_config, n_substeps=20):
    """Deterministic mean-action rollout turned into a pulse schedule."""
    eval_config = dataclasses.replace(env_config, rho33_threshold=None)
    env = CtapEnv(eval_config, n_substeps=n_substeps)
    obs = env.reset()
    actions = []
    total_reward = 0.0
    done = False
    while not done:
        action = np.clip(policy.mean_action(obs), 0.0, OMEGA_MAX)
        result = env.step(action)
        actions.append(action)
        total_reward += result.reward
        obs = result.observation
        done = result.done
    channels = [np.array([a[k] for a in actions])
                for k in range(eval_config.n_actions)]
    schedule = PulseSchedule(eval_config.t_max, len(actions), channels)
    return schedule, total_reward


def evaluate(checkpoint, env_config=None, smoothing="none", n_substeps=20):
    """Roll out a checkpoint's mean policy, smooth, re-simulate, score."""
    if isinstance(checkpoint, GaussianPolicy):
        if env_config is None:
            raise ArgumentError("env_config is required when evaluating a "
                                "bare policy")
        policy = checkpoint
    else:
        policy, echoed = policy_from_checkpoint(checkpoint)
        if env_config is None:
            env_config = echoed
    if env_config.observation_dim() != policy.obs_dim \
            or env_config.n_actions != policy.act_dim:
        raise ArgumentError("checkpoint does not match the environment "
                            "dimensions")
    schedule, total_reward = rollout_schedule(policy, env_config,
                                              n_substeps)
    return evaluate_schedule(schedule, env_config, smoothing, n_substeps,
                             extra_metrics={"rollout_return":
                                            float(total_reward)})
