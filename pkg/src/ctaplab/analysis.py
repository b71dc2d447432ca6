"""Variable-relevance analysis over one-step transition datasets.

The pipeline rolls a policy through the environment to record
(state, action, previous action, next state, reward) rows, fits randomized
regression-tree ensembles to score how much each candidate variable helps
predict each target, and assembles a layered dependency graph: which
variables feed the reward, and which feed the dynamics of the variables
that matter for the reward.  Everything is seeded and deterministic.

Two estimator details are load-bearing and deliberate:

* The reward is scored against the post-step state layer.  The environment
  computes the reward from the state after the transition, so that layer is
  where the reward's functional dependence is exact; scoring it against the
  pre-step layer smears credit onto every variable that merely helps
  predict the next state.

* Parent sets for the dynamics targets are chosen by forward selection with
  a held-out R^2 gain test rather than by thresholding raw importance
  shares.  Raw shares split credit across correlated candidates (the
  populations sum to one, so each is a linear function of the others),
  which would create edges from variables carrying no independent
  information.  A candidate becomes a parent only if adding it improves
  held-out prediction by at least the edge threshold.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .agent import GaussianPolicy, policy_from_checkpoint
from .env import CtapEnv, _dot_block
from .errors import ArgumentError
from .linalg import Rng
from .quantum import OMEGA_MAX

MAX_BINS = 255
MIN_ANALYSIS_ROWS = 1000
NEXT_SUFFIX = "_next"
PREV_SUFFIX = "_prev"


# ------------------------------------------------------------- datasets
def state_labels(n_dots):
    """Column names of the dot-block state in recording order."""
    labels = [f"rho{k}{k}" for k in range(1, n_dots + 1)]
    for i in range(1, n_dots + 1):
        for j in range(i + 1, n_dots + 1):
            labels.append(f"re{i}{j}")
            labels.append(f"im{i}{j}")
    return labels


def action_labels(n_actions):
    if n_actions == 2:
        return ["om12", "om23"]
    return ["om12", "om_mid", "om45"]


@dataclass
class TransitionDataset:
    """Rectangular numeric table of one-step transitions."""

    columns: list
    rows: np.ndarray

    def __post_init__(self):
        self.columns = [str(c) for c in self.columns]
        if len(set(self.columns)) != len(self.columns):
            raise ArgumentError("duplicate column names")
        self.rows = np.asarray(self.rows, dtype=float)
        if self.rows.ndim != 2 or self.rows.shape[1] != len(self.columns):
            raise ArgumentError("rows must be a 2-D array matching the "
                                "column count")
        if not np.isfinite(self.rows).all():
            raise ArgumentError("dataset contains non-finite values")

    @property
    def n_rows(self):
        return self.rows.shape[0]

    def column(self, name):
        try:
            return self.rows[:, self.columns.index(name)]
        except ValueError:
            raise ArgumentError(f"no column named '{name}'") from None

    def matrix(self, names):
        return np.column_stack([self.column(name) for name in names])

    def to_csv(self):
        buf = io.StringIO()
        buf.write(",".join(self.columns) + "\n")
        for row in self.rows:
            buf.write(",".join(format(v, ".12g") for v in row) + "\n")
        return buf.getvalue()

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())


def dataset_from_csv(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ArgumentError("empty dataset text")
    columns = lines[0].split(",")
    rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    if rows.size == 0:
        rows = rows.reshape(0, len(columns))
    return TransitionDataset(columns=columns, rows=rows)


def load_dataset(path):
    with open(path, "r", encoding="utf-8") as fh:
        return dataset_from_csv(fh.read())


def collect_transitions(env_config, policy="random", n_samples=100_000,
                        seed=0, exploration_std=0.1, n_substeps=20):
    """Roll out episodes and record one dataset row per transition.

    ``policy`` may be a checkpoint dict, a GaussianPolicy, or the string
    "random" (uniform actions).  Exploration noise of standard deviation
    ``exploration_std * Omega_max`` is added to every action and the result
    is clipped to the admissible range; the recorded action columns hold
    the values actually applied.
    """
    if n_samples < MIN_ANALYSIS_ROWS:
        raise ArgumentError(
            f"n_samples must be >= {MIN_ANALYSIS_ROWS}")
    if exploration_std < 0.0:
        raise ArgumentError("exploration_std must be >= 0")
    if isinstance(policy, dict):
        policy, _ = policy_from_checkpoint(policy)
    random_actions = isinstance(policy, str) or policy is None
    if isinstance(policy, str) and policy != "random":
        raise ArgumentError("policy must be a checkpoint, a GaussianPolicy,"
                            " or 'random'")
    if not random_actions:
        if policy.obs_dim != env_config.observation_dim() \
                or policy.act_dim != env_config.n_actions:
            raise ArgumentError("policy does not match the environment "
                                "dimensions")

    env = CtapEnv(env_config, n_substeps=n_substeps)
    rng = Rng(seed)
    n_actions = env_config.n_actions
    states = state_labels(env_config.n_dots)
    acts = action_labels(n_actions)
    columns = (states + acts + [a + PREV_SUFFIX for a in acts]
               + [s + NEXT_SUFFIX for s in states] + ["reward"])

    def state_row():
        block = _dot_block(env.rho, env.model)
        n = env.model.n_dots
        vals = [block[i, i].real for i in range(n)]
        for i in range(n):
            for j in range(i + 1, n):
                vals.append(block[i, j].real)
                vals.append(block[i, j].imag)
        return vals

    rows = []
    while len(rows) < n_samples:
        obs = env.reset()
        done = False
        while not done:
            before = state_row()
            prev = list(env.prev_action)
            if random_actions:
                base = OMEGA_MAX * rng.uniform(n_actions)
            else:
                base = policy.mean_action(obs)
            action = np.clip(
                base + exploration_std * OMEGA_MAX * rng.normal(n_actions),
                0.0, OMEGA_MAX)
            result = env.step(action)
            rows.append(before + list(action) + prev + state_row()
                        + [result.reward])
            obs = result.observation
            done = result.done
    return TransitionDataset(columns=columns,
                             rows=np.array(rows[:n_samples]))


# ------------------------------------------------- randomized tree forests
@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 8
    max_features: int = None  # None -> ceil(sqrt(p))
    bootstrap: bool = True
    min_leaf: int = 1

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise ArgumentError("forest sizes must be positive")
        if self.max_features is not None and self.max_features < 1:
            raise ArgumentError("max_features must be positive or None")


@dataclass
class ImportanceResult:
    candidates: list
    scores: np.ndarray
    degenerate: bool

    def as_dict(self):
        return dict(zip(self.candidates, self.scores))


def bin_columns(values, max_bins=MAX_BINS):
    """Quantile-bin each column to uint8 codes for fast split scans."""
    n, p = values.shape
    binned = np.empty((n, p), dtype=np.uint8)
    for j in range(p):
        edges = np.unique(np.quantile(values[:, j],
                                      np.linspace(0, 1, max_bins + 1)[1:-1]))
        binned[:, j] = np.searchsorted(edges, values[:, j], side="right")
    return binned


def _grow_tree(binned, y, rows, rng, max_depth, max_features, min_leaf, p,
               gains, record):
    """One variance-reduction tree over pre-binned columns.

    ``gains`` accumulates per-feature impurity decrease.  When ``record``
    is true the tree structure is returned for prediction; otherwise only
    the gains are produced.
    """
    feat, cut, left, right, val = [-1], [0], [-1], [-1], [float(y[rows].mean())]
    stack = [(rows, 0, 0)]
    while stack:
        idx, depth, node = stack.pop()
        n = idx.size
        if record:
            val[node] = float(y[idx].mean())
        if depth >= max_depth or n < 2 * min_leaf:
            continue
        ysub = y[idx]
        tot = ysub.sum()
        parent_term = tot * tot / n
        if max_features >= p:
            feats = range(p)
        else:
            feats = rng.permutation(p)[:max_features]
        best_gain, best_f, best_cut = 1e-12, -1, -1
        for f in feats:
            codes = binned[idx, f]
            cnt = np.bincount(codes, minlength=MAX_BINS + 1)
            sums = np.bincount(codes, weights=ysub, minlength=MAX_BINS + 1)
            left_cnt = np.cumsum(cnt)[:-1]
            left_sum = np.cumsum(sums)[:-1]
            ok = (left_cnt >= min_leaf) & ((n - left_cnt) >= min_leaf)
            if not ok.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = left_sum ** 2 / left_cnt \
                    + (tot - left_sum) ** 2 / (n - left_cnt) - parent_term
            gain[~ok] = -np.inf
            k = int(np.argmax(gain))
            if gain[k] > best_gain:
                best_gain, best_f, best_cut = float(gain[k]), int(f), k
        if best_f < 0:
            continue
        gains[best_f] += best_gain
        mask = binned[idx, best_f] <= best_cut
        if record:
            feat[node], cut[node] = best_f, best_cut
            for side, child_rows in enumerate((idx[mask], idx[~mask])):
                feat.append(-1)
                cut.append(0)
                left.append(-1)
                right.append(-1)
                val.append(0.0)
                child = len(feat) - 1
                if side == 0:
                    left[node] = child
                else:
                    right[node] = child
                stack.append((child_rows, depth + 1, child))
        else:
            stack.append((idx[mask], depth + 1, 0))
            stack.append((idx[~mask], depth + 1, 0))
    if record:
        return (np.array(feat), np.array(cut), np.array(left),
                np.array(right), np.array(val))
    return None


def _predict_tree(tree, binned):
    feat, cut, left, right, val = tree
    out = np.empty(binned.shape[0])
    node_of = np.zeros(binned.shape[0], dtype=np.int64)
    active = np.arange(binned.shape[0])
    while active.size:
        nodes = node_of[active]
        is_leaf = feat[nodes] < 0
        out[active[is_leaf]] = val[nodes[is_leaf]]
        active = active[~is_leaf]
        if active.size == 0:
            break
        nodes = node_of[active]
        go_left = binned[active, feat[nodes]] <= cut[nodes]
        node_of[active[go_left]] = left[nodes[go_left]]
        node_of[active[~go_left]] = right[nodes[~go_left]]
    return out


def feature_importance(dataset, target_column, candidate_columns,
                       config=None, rng=None):
    """Variance-reduction importance shares of candidates for a target.

    Fits an ensemble of randomized regression trees (bootstrapped rows,
    random feature subsets per split) and averages each tree's normalized
    impurity-decrease profile.  Scores are non-negative and sum to one
    unless the target is constant, which is reported via the degenerate
    flag with all-zero scores.
    """
    config = config or ForestConfig()
    candidate_columns = list(candidate_columns)
    if target_column in candidate_columns:
        raise ArgumentError("target must not be among the candidates")
    if rng is None:
        rng = Rng(0)
    y = dataset.column(target_column) if isinstance(dataset,
                                                    TransitionDataset) \
        else np.asarray(dataset[target_column], dtype=float)
    values = dataset.matrix(candidate_columns) \
        if isinstance(dataset, TransitionDataset) \
        else np.column_stack([dataset[c] for c in candidate_columns])
    n, p = values.shape
    if np.ptp(y) == 0.0:
        return ImportanceResult(candidate_columns, np.zeros(p), True)
    binned = bin_columns(values)
    max_features = config.max_features
    if max_features is None:
        max_features = int(np.ceil(np.sqrt(p)))
    total = np.zeros(p)
    for _ in range(config.n_trees):
        rows = rng.integers(0, n, n) if config.bootstrap else np.arange(n)
        gains = np.zeros(p)
        _grow_tree(binned, y, rows, rng, config.max_depth, max_features,
                   config.min_leaf, p, gains, record=False)
        tree_total = gains.sum()
        if tree_total > 0.0:
            total += gains / tree_total
    grand = total.sum()
    if grand == 0.0:
        return ImportanceResult(candidate_columns, np.zeros(p), True)
    return ImportanceResult(candidate_columns, total / grand, False)


def _holdout_r2(binned_train, y_train, binned_test, y_test, rng,
                n_trees=20, max_depth=8, min_leaf=20):
    """Held-out R^2 of a small predictor forest.

    The feature restriction is the column slice itself: callers pass only
    the columns the model is allowed to use.
    """
    p = binned_train.shape[1]
    if p == 0:
        pred = np.full(y_test.shape, y_train.mean())
    else:
        pred = np.zeros(y_test.shape)
        n = y_train.size
        gains = np.zeros(p)
        for _ in range(n_trees):
            rows = rng.integers(0, n, n)
            tree = _grow_tree(binned_train, y_train, rows, rng, max_depth,
                              p, min_leaf, p, gains, record=True)
            pred += _predict_tree(tree, binned_test)
        pred /= n_trees
    denom = ((y_test - y_test.mean()) ** 2).sum()
    if denom == 0.0:
        return 0.0
    return 1.0 - ((y_test - pred) ** 2).sum() / denom


# ------------------------------------------------------ dependency graphs
@dataclass
class DependencyGraph:
    """Layered dependence structure estimated from a transition dataset.

    Nodes live on three ranks: time-t variables (states, actions, previous
    actions), post-step state variables (``*_next``), and the reward.
    Edges point from time-t nodes into post-step nodes, and from post-step
    state nodes into the reward.  ``relevant`` lists the state variables
    that explain the reward directly or through the dynamics of other
    relevant variables; every other state variable is ``prunable``.
    """

    state_vars: tuple
    action_vars: tuple
    prev_action_vars: tuple
    edges: tuple = field(default_factory=tuple)
    relevant: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.state_vars = tuple(self.state_vars)
        self.action_vars = tuple(self.action_vars)
        self.prev_action_vars = tuple(self.prev_action_vars)
        self.relevant = tuple(sorted(self.relevant))
        layer_t = set(self.state_vars) | set(self.action_vars) \
            | set(self.prev_action_vars)
        next_nodes = {s + NEXT_SUFFIX for s in self.state_vars}
        cleaned = []
        sums = {}
        for source, target, weight in self.edges:
            weight = float(weight)
            if not 0.0 <= weight <= 1.0:
                raise ArgumentError("edge weights must lie in [0, 1]")
            if target == "reward":
                if source not in next_nodes:
                    raise ArgumentError("reward parents must be post-step "
                                        "state nodes")
            elif target in next_nodes:
                if source not in layer_t:
                    raise ArgumentError("dynamics parents must be time-t "
                                        "nodes")
            else:
                raise ArgumentError(f"invalid edge target '{target}'")
            sums[target] = sums.get(target, 0.0) + weight
            cleaned.append((source, target, weight))
        for target, total in sums.items():
            if total > 1.0 + 1e-9:
                raise ArgumentError(f"edge weights into '{target}' exceed 1")
        self.edges = tuple(cleaned)
        unknown = set(self.relevant) - set(self.state_vars)
        if unknown:
            raise ArgumentError(f"relevant set names unknown variables "
                                f"{sorted(unknown)}")

    @property
    def prunable(self):
        return tuple(s for s in sorted(self.state_vars)
                     if s not in self.relevant)

    def parents(self, target):
        return tuple((source, weight) for source, tgt, weight in self.edges
                     if tgt == target)

    def reward_parent_vars(self):
        """Reward parents as bare variable names (suffix stripped)."""
        return tuple(sorted(source[:-len(NEXT_SUFFIX)]
                            for source, _ in self.parents("reward")))


def _forward_select(binned, y, candidates, ranking, epsilon, rng,
                    split=0.7, scan_cap=6):
    """Greedy parent selection by held-out R^2 gain.

    Candidates are scanned in ranked order; the first one whose addition
    improves held-out R^2 by at least ``epsilon`` is accepted, and the scan
    restarts over the remainder.  Selection stops when none of the top
    ``scan_cap`` remaining candidates clears the threshold.
    """
    n = y.size
    order = rng.permutation(n)
    n_train = int(split * n)
    train_rows, test_rows = order[:n_train], order[n_train:]
    b_train, b_test = binned[train_rows], binned[test_rows]
    y_train, y_test = y[train_rows], y[test_rows]

    def score(feats):
        cols = [candidates.index(f) for f in feats]
        return _holdout_r2(b_train[:, cols], y_train,
                           b_test[:, cols], y_test, rng)

    selected = []
    current = 0.0
    remaining = list(ranking)
    while remaining:
        accepted = None
        for cand in remaining[:scan_cap]:
            trial = score(selected + [cand])
            if trial - current >= epsilon:
                accepted = cand
                current = trial
                break
        if accepted is None:
            break
        selected.append(accepted)
        remaining.remove(accepted)
    return selected


def build_2tbn(dataset, epsilon=0.05, config=None, seed=0):
    """Estimate the layered dependency graph of a transition dataset.

    The reward is scored against the post-step state layer with raw
    importance shares thresholded at ``epsilon``.  Starting from the
    reward's parents, the relevance closure repeatedly adds every state
    variable selected (by held-out forward selection at the same
    threshold) as a parent of an already-relevant variable's dynamics.
    Only edges into the reward and into relevant dynamics targets are
    emitted, mirroring the pruning the analysis is meant to justify.
    """
    if not 0.0 < epsilon < 1.0:
        raise ArgumentError("epsilon must lie in (0, 1)")
    if dataset.n_rows < MIN_ANALYSIS_ROWS:
        raise ArgumentError(
            f"analysis needs at least {MIN_ANALYSIS_ROWS} rows")
    columns = dataset.columns
    if "reward" not in columns:
        raise ArgumentError("dataset has no reward column")
    next_cols = [c for c in columns if c.endswith(NEXT_SUFFIX)]
    states = [c[:-len(NEXT_SUFFIX)] for c in next_cols]
    prev_cols = [c for c in columns if c.endswith(PREV_SUFFIX)]
    action_cols = [c for c in columns
                   if c not in set(next_cols) | set(prev_cols)
                   | set(states) | {"reward"}]
    if not states or set(states) - set(columns):
        raise ArgumentError("dataset lacks matching state/_next columns")
    layer_t = states + action_cols + prev_cols

    # conditional-attribution forests: all candidates available per split
    def exhaustive(n_candidates):
        base = config or ForestConfig()
        return ForestConfig(n_trees=base.n_trees, max_depth=base.max_depth,
                            max_features=n_candidates,
                            bootstrap=base.bootstrap,
                            min_leaf=base.min_leaf)

    reward_result = feature_importance(dataset, "reward", next_cols,
                                       exhaustive(len(next_cols)),
                                       Rng(seed))
    edges = []
    relevant = []
    for name, share in zip(next_cols, reward_result.scores):
        if share >= epsilon:
            edges.append((name, "reward", float(share)))
            relevant.append(name[:-len(NEXT_SUFFIX)])

    layer_matrix = dataset.matrix(layer_t)
    layer_binned = bin_columns(layer_matrix)
    visited = set()
    frontier = sorted(relevant)
    stream = 1
    while frontier:
        var = frontier.pop(0)
        if var in visited:
            continue
        visited.add(var)
        target = var + NEXT_SUFFIX
        y = dataset.column(target)
        if np.ptp(y) == 0.0:
            continue
        raw = feature_importance(dataset, target, layer_t,
                                 exhaustive(len(layer_t)),
                                 Rng(seed + stream))
        stream += 1
        ranking = [layer_t[k] for k in np.argsort(-raw.scores,
                                                  kind="stable")]
        selected = _forward_select(layer_binned, y, layer_t, ranking,
                                   epsilon, Rng(seed + stream))
        stream += 1
        shares = raw.as_dict()
        for parent in selected:
            edges.append((parent, target, float(shares[parent])))
            if parent in set(states) and parent not in visited \
                    and parent not in frontier:
                frontier.append(parent)
                relevant.append(parent)
        frontier.sort()
    return DependencyGraph(state_vars=tuple(states),
                           action_vars=tuple(action_cols),
                           prev_action_vars=tuple(prev_cols),
                           edges=tuple(edges),
                           relevant=tuple(sorted(set(relevant))))


def export_dot(graph):
    """Deterministic Graphviz rendering with three ranked layers."""
    prunable = set(graph.prunable)
    lines = ["digraph dependencies {", "  rankdir=LR;",
             "  node [shape=ellipse];"]

    def node_line(name, dashed):
        style = ' [style=dashed]' if dashed else ""
        return f'    "{name}"{style};'

    layer_t = sorted(graph.state_vars) + sorted(graph.action_vars) \
        + sorted(graph.prev_action_vars)
    lines.append("  { rank=same;")
    for name in sorted(layer_t):
        lines.append(node_line(name, name in prunable))
    lines.append("  }")
    lines.append("  { rank=same;")
    for name in sorted(s + NEXT_SUFFIX for s in graph.state_vars):
        lines.append(node_line(name, name[:-len(NEXT_SUFFIX)] in prunable))
    lines.append("  }")
    lines.append('  "reward";')
    for source, target, weight in sorted(graph.edges,
                                         key=lambda e: (e[1], e[0])):
        width = 0.75 + 4.0 * weight
        lines.append(f'  "{source}" -> "{target}" '
                     f'[penwidth={width:.2f}, weight="{weight:.4f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def relevant_report(graph):
    """Plain-text relevant/prunable listing for CLI output."""
    lines = ["relevant state variables:"]
    for name in graph.relevant:
        lines.append(f"  {name}")
    lines.append("prunable state variables:")
    for name in graph.prunable:
        lines.append(f"  {name}")
    lines.append("reward parents:")
    for name in graph.reward_parent_vars():
        lines.append(f"  {name}")
    return "\n".join(lines) + "\n"
