"""Action selection: Monte-Carlo tree search with UCT and progressive
widening, plus the redundant-vote, online-only, and uncertainty-threshold
baselines.

The search engine is written against a small game interface (terminal test,
chance test, legal actions, transitions, utility) so it can be exercised on
hand-built games with exactly computable values as well as the query game.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import game as g
from .crf import CrfModel, compute_potentials, forward_backward
from .environment import EnvironmentModel


@dataclass
class PolicyConfig:
    uct_constant: float = math.sqrt(2)
    rollout_budget: int = 1000
    max_depth: int = 12
    widening: bool = True

    def __post_init__(self):
        if self.rollout_budget < 1:
            raise ValueError("rollout_budget must be at least 1")
        if self.uct_constant < 0:
            raise ValueError("uct_constant must be non-negative")


@dataclass
class ThresholdConfig:
    confidence_target: float = 0.98
    uncertainty_factor: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.confidence_target < 1.0:
            raise ValueError("confidence_target must be in (0, 1)")
        if not 0.0 < self.uncertainty_factor < 1.0:
            raise ValueError("uncertainty_factor must be in (0, 1)")


class SearchNode:
    """Visit count, value sum, and children for one search-tree state.

    System-turn children are (action, node) pairs, unique per action, and are
    materialized one at a time as actions get their forced first visit
    (``untried`` holds the rest, in action order). Chance-turn children are
    sampled outcome nodes, grown by progressive widening.
    """

    __slots__ = ("state", "action", "N", "V", "children", "untried")

    def __init__(self, state, action=None):
        self.state = state
        self.action = action    # action leading here from the parent
        self.N = 0
        self.V = 0.0
        self.children = None
        self.untried = None     # reversed action list; pop() yields action order

    def mean(self) -> float:
        return self.V / self.N if self.N else 0.0


def widening_reuses(visits: int, num_children: int) -> bool:
    """Progressive-widening rule: reuse a stored outcome while
    max(1, sqrt(N)) <= |C|, otherwise sample a fresh one."""
    return max(1.0, math.sqrt(visits)) <= num_children


def uct_select(node: SearchNode, uct_constant: float) -> SearchNode:
    """Upper-confidence child choice at a system node: unvisited children are
    taken first (value +inf), in action order; otherwise argmax of mean value
    plus the exploration bonus, first maximum winning ties."""
    best, best_score = None, -math.inf
    log_n = math.log(node.N) if node.N > 1 else 0.0
    for _action, child in node.children:
        if child.N == 0:
            return child
        score = child.V / child.N + uct_constant * math.sqrt(log_n / child.N)
        if score > best_score:
            best, best_score = child, score
    return best


def monte_carlo_value(search_game, node: SearchNode, cfg: PolicyConfig,
                      rng: np.random.Generator, depth: int = 0) -> float:
    """One rollout from ``node``; returns the terminal utility observed and
    accumulates (N, V) along the path."""
    node.N += 1
    state = node.state
    if search_game.is_terminal(state):
        value = search_game.utility(state)
    elif search_game.is_chance(state):
        if node.children is None:
            node.children = []
        if cfg.widening and widening_reuses(node.N, len(node.children)):
            child = node.children[int(rng.integers(len(node.children)))]
        else:
            child = SearchNode(search_game.sample_chance(state, rng))
            node.children.append(child)
        value = monte_carlo_value(search_game, child, cfg, rng, depth + 1)
    elif depth >= cfg.max_depth:
        # depth cap: score this line as if the system returned here
        value = search_game.utility(search_game.force_return(state))
    else:
        if node.children is None:
            node.children = []
            node.untried = list(search_game.legal_actions(state))
            node.untried.reverse()
        if node.untried:
            action = node.untried.pop()  # forced first visit, in action order
            child = SearchNode(search_game.apply(state, action), action=action)
            node.children.append((action, child))
        else:
            child = uct_select(node, cfg.uct_constant)
        value = monte_carlo_value(search_game, child, cfg, rng, depth + 1)
    node.V += value
    return value


def mcts_search(search_game, root_state, cfg: PolicyConfig, rng: np.random.Generator):
    """Run the rollout budget from ``root_state`` and commit to the root child
    with the highest mean value (ties break to the first action in order).
    Returns (action, root node)."""
    root = SearchNode(root_state)
    for _ in range(cfg.rollout_budget):
        monte_carlo_value(search_game, root, cfg, rng, depth=0)
    best_action, best_mean = None, -math.inf
    for action, child in root.children:
        if child.N > 0 and child.mean() > best_mean:
            best_action, best_mean = action, child.mean()
    return best_action, root


class QuerySearchGame:
    """Adapter exposing the crowd-query game to the search engine. Utility
    evaluations share one response-conditioned posterior cache."""

    def __init__(self, crf: CrfModel, env: EnvironmentModel,
                 params: g.UtilityParams, cache: g.PosteriorCache):
        self.crf = crf
        self.env = env
        self.params = params
        self.cache = cache

    def is_terminal(self, state) -> bool:
        return state.terminal

    def is_chance(self, state) -> bool:
        return state.awaiting_crowd

    def legal_actions(self, state):
        return g.legal_actions(state)

    def apply(self, state, action):
        return g.apply_system_action(state, action)

    def sample_chance(self, state, rng):
        return g.sample_crowd_move(state, self.env, self.crf, rng,
                                   mode="simulate", cache=self.cache)

    def utility(self, state) -> float:
        return g.utility(state, self.crf, self.env, self.params, cache=self.cache)

    def force_return(self, state):
        return g.apply_system_action(state, g.RETURN)


def mcts_decide(state, crf: CrfModel, env: EnvironmentModel,
                params: g.UtilityParams, cfg: PolicyConfig,
                rng: np.random.Generator,
                cache: g.PosteriorCache | None = None):
    """Full-planner decision for one system turn."""
    if cache is None:
        cache = g.PosteriorCache(crf, state.x, env.response_model)
    search_game = QuerySearchGame(crf, env, params, cache)
    action, _root = mcts_search(search_game, state, cfg, rng)
    return action


def threshold_queries_needed(max_marginal: float, cfg: ThresholdConfig) -> int:
    """Smallest m with (1 - p) * factor^m at or below the residual target."""
    residual = 1.0 - cfg.confidence_target
    m = 0
    while (1.0 - max_marginal) * cfg.uncertainty_factor ** m > residual:
        m += 1
    return m


def threshold_decide(state, crf: CrfModel, cfg: ThresholdConfig,
                     cache: g.PosteriorCache | None = None):
    """Uncertainty-threshold baseline: issue the whole query batch up front
    (each in-flight query discounts a position's residual uncertainty by the
    configured factor), then wait everything out and return."""
    if state.received():
        # batch was issued before any answer arrived; only wrap up now
        return g.WAIT if state.in_flight() else g.RETURN
    if cache is not None:
        marginals = cache.marginals(())
    else:
        marginals = forward_backward(compute_potentials(crf, state.x)).node
    residual = 1.0 - cfg.confidence_target
    for i in range(state.n):
        p_i = float(marginals[i].max())
        m_i = state.queries_on(i)
        if (1.0 - p_i) * cfg.uncertainty_factor ** m_i > residual:
            return g.Query(i)
    return g.WAIT if state.in_flight() else g.RETURN


def nvote_decide(state, n_votes: int):
    """Fixed-redundancy baseline: n votes per position, then wait, then return."""
    if n_votes < 1:
        raise ValueError("n_votes must be at least 1")
    for i in range(state.n):
        if state.queries_on(i) < n_votes:
            return g.Query(i)
    return g.WAIT if state.in_flight() else g.RETURN


def nvote_aggregate(received, n: int, K: int):
    """Per-position plurality over (position, label) votes; ties (including
    no votes at all) resolve to the lowest label index."""
    counts = np.zeros((n, K), dtype=np.intp)
    for position, label in received:
        counts[position, label] += 1
    return [int(np.argmax(counts[i])) for i in range(n)]


def online_decide(state):
    """Online-only baseline: never query, return immediately."""
    return g.RETURN


def parse_policy_spec(spec: str):
    """Parse a run-config policy string: lense | threshold | nvote:<n> | online."""
    spec = spec.strip()
    if spec in ("lense", "threshold", "online"):
        return spec, {}
    if spec.startswith("nvote:"):
        try:
            n = int(spec.split(":", 1)[1])
        except ValueError:
            raise ValueError("bad vote count in policy spec %r" % spec) from None
        if n < 1:
            raise ValueError("vote count must be at least 1 in %r" % spec)
        return "nvote", {"n": n}
    raise ValueError("unknown policy spec %r" % spec)
