"""The stochastic query game played against the crowd on one input.

A state records every action taken so far (queries, waits, the final return)
with issue times, plus responses and arrival times as they come back. States
are immutable values; transitions return new states. The system moves by
choosing actions; the crowd moves whenever the system waits, resolving the
in-flight query with the soonest sampled arrival.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .crf import (
    CrfModel,
    Marginals,
    TokenSequence,
    compute_potentials,
    condition_on_responses,
    forward_backward,
    viterbi_map,
)
from .environment import CrowdResponse, EnvironmentModel, EpisodeCrowd


class IllegalAction(Exception):
    pass


@dataclass(frozen=True)
class Action:
    kind: str  # "query" | "wait" | "return"
    position: int = -1

    def __repr__(self):
        if self.kind == "query":
            return "Query(%d)" % self.position
        return self.kind.capitalize()


WAIT = Action("wait")
RETURN = Action("return")

_QUERY_CACHE: dict = {}


def Query(position: int) -> Action:
    action = _QUERY_CACHE.get(position)
    if action is None:
        action = _QUERY_CACHE[position] = Action("query", position)
    return action


def action_ordinal(action: Action, n: int) -> int:
    """Canonical order Query(0) < ... < Query(n-1) < Wait < Return, used for
    deterministic tie-breaking."""
    if action.kind == "query":
        return action.position
    return n if action.kind == "wait" else n + 1


@dataclass(frozen=True)
class UtilityParams:
    cost_per_query: float = 0.01   # utility units per query issued
    cost_per_second: float = 0.005  # utility units per second of game clock

    def __post_init__(self):
        if self.cost_per_query < 0 or self.cost_per_second < 0:
            raise ValueError("utility costs must be non-negative")


@dataclass(frozen=True)
class GameState:
    """Parallel action/issue/response/arrival records plus the game clock.

    ``pending``, ``answered``, and ``num_queries`` are maintained by the
    transitions so turn logic never rescans the action history.
    """

    x: TokenSequence
    now: float = 0.0
    actions: tuple = ()
    issue_times: tuple = ()
    responses: tuple = ()       # label index or None, per action
    arrival_times: tuple = ()   # seconds or None, per action
    awaiting_crowd: bool = False
    terminal: bool = False
    pending: tuple = ()         # indices of in-flight queries, in issue order
    answered: tuple = ()        # (position, label) pairs, in arrival order
    num_queries: int = 0

    @property
    def n(self) -> int:
        return len(self.x)

    def in_flight(self) -> tuple:
        """Indices of issued queries whose response has not arrived."""
        return self.pending

    def received(self) -> tuple:
        """(position, label) pairs for answered queries, in arrival order."""
        return self.answered

    def query_count(self) -> int:
        return self.num_queries

    def queries_on(self, position: int) -> int:
        return sum(1 for a in self.actions if a.kind == "query" and a.position == position)


def new_game(x: TokenSequence) -> GameState:
    return GameState(x=x)


_QUERY_TUPLES: dict = {}


def _query_actions(n: int) -> tuple:
    actions = _QUERY_TUPLES.get(n)
    if actions is None:
        actions = _QUERY_TUPLES[n] = tuple(Query(i) for i in range(n))
    return actions


def legal_actions(state: GameState) -> list:
    """Every query position plus Return; Wait only while something is in flight."""
    if state.terminal or state.awaiting_crowd:
        raise IllegalAction("not the system's turn")
    acts = list(_query_actions(state.n))
    if state.pending:
        acts.append(WAIT)
    acts.append(RETURN)
    return acts


def apply_system_action(state: GameState, action: Action) -> GameState:
    if state.terminal:
        raise IllegalAction("game already terminated")
    if state.awaiting_crowd:
        raise IllegalAction("crowd's turn")
    is_query = action.kind == "query"
    if is_query:
        if not 0 <= action.position < state.n:
            raise IllegalAction("query position %d out of range" % action.position)
    elif action.kind == "wait":
        if not state.pending:
            raise IllegalAction("wait with no query in flight")
    elif action.kind != "return":
        raise IllegalAction("unknown action kind %r" % action.kind)
    return GameState(
        x=state.x,
        now=state.now,
        actions=state.actions + (action,),
        issue_times=state.issue_times + (state.now,),
        responses=state.responses + (None,),
        arrival_times=state.arrival_times + (None,),
        awaiting_crowd=action.kind == "wait",
        terminal=action.kind == "return",
        pending=state.pending + (len(state.actions),) if is_query else state.pending,
        answered=state.answered,
        num_queries=state.num_queries + 1 if is_query else state.num_queries,
    )


def sample_crowd_move(state: GameState, env: EnvironmentModel, crf: CrfModel,
                      rng: np.random.Generator, mode: str = "simulate",
                      crowd: EpisodeCrowd | None = None,
                      cache: "PosteriorCache | None" = None) -> GameState:
    """Resolve one in-flight query: sample candidate arrivals for every
    pending query, pick the earliest, and fill in its response.

    mode "simulate" draws the answer from the posterior-predictive response
    distribution (the system cannot see the truth inside its own search);
    mode "replay" asks the episode's crowd, which samples from the response
    model applied to gold labels or replays a frozen pool record.
    """
    if not state.awaiting_crowd:
        raise IllegalAction("not the crowd's turn")
    pending = state.pending
    if not pending:
        raise IllegalAction("crowd turn with no query in flight")

    if mode == "replay" and crowd is not None and crowd.frozen:
        arrivals = []
        for j in pending:
            _label, delay = crowd.attach(j, state.actions[j].position, rng)
            arrivals.append(state.issue_times[j] + delay)
        arrivals = np.asarray(arrivals)
    else:
        issue = np.asarray([state.issue_times[j] for j in pending])
        arrivals = env.latency_model.sample_arrivals(issue, state.now, rng)

    winner = int(np.argmin(arrivals))  # first occurrence = lowest query index
    j_star = pending[winner]
    position = state.actions[j_star].position
    arrival = float(arrivals[winner])

    if mode == "simulate":
        received = state.answered
        if cache is not None:
            marginal = cache.marginals(received)[position]
        else:
            marginal = forward_backward(condition_on_responses(
                compute_potentials(crf, state.x), received, env.response_model)).node[position]
        predictive = env.response_model.predictive(marginal)
        # inverse-CDF draw; Generator.choice with probabilities is far slower
        label = int(np.searchsorted(np.cumsum(predictive), rng.random() * predictive.sum()))
        label = min(label, len(predictive) - 1)
    elif mode == "replay":
        if crowd is None:
            raise ValueError("replay mode needs an EpisodeCrowd")
        label = crowd.response_label(j_star, position, rng)
    else:
        raise ValueError("unknown crowd mode %r" % mode)

    responses = list(state.responses)
    arrival_times = list(state.arrival_times)
    responses[j_star] = label
    arrival_times[j_star] = arrival
    return GameState(
        x=state.x,
        now=max(state.now, arrival),
        actions=state.actions,
        issue_times=state.issue_times,
        responses=tuple(responses),
        arrival_times=tuple(arrival_times),
        awaiting_crowd=False,
        terminal=state.terminal,
        pending=tuple(j for j in pending if j != j_star),
        answered=state.answered + ((position, label),),
        num_queries=state.num_queries,
    )


def apply_crowd_response(state: GameState, response: CrowdResponse) -> GameState:
    """Record a real crowd answer for one pending query (the live-broker
    counterpart of sample_crowd_move): fills response and arrival, advances
    the clock, and hands the turn back to the system."""
    query_index = response.query_index
    if query_index not in state.pending:
        raise IllegalAction("query %d is not pending" % query_index)
    if response.arrival_time <= state.issue_times[query_index]:
        raise IllegalAction("arrival %.6f not after issue %.6f"
                            % (response.arrival_time, state.issue_times[query_index]))
    position = state.actions[query_index].position
    responses = list(state.responses)
    arrival_times = list(state.arrival_times)
    responses[query_index] = response.label
    arrival_times[query_index] = response.arrival_time
    return GameState(
        x=state.x,
        now=max(state.now, response.arrival_time),
        actions=state.actions,
        issue_times=state.issue_times,
        responses=tuple(responses),
        arrival_times=tuple(arrival_times),
        awaiting_crowd=False,
        terminal=state.terminal,
        pending=tuple(j for j in state.pending if j != query_index),
        answered=state.answered + ((position, response.label),),
        num_queries=state.num_queries,
    )


def expected_accuracy(marginals: Marginals, map_labels) -> float:
    """Mean marginal probability of the MAP label, position by position: the
    expected token accuracy of returning ``map_labels`` when the truth is
    distributed per the marginals."""
    node = marginals.node
    return float(np.mean(node[np.arange(node.shape[0]), map_labels]))


class PosteriorCache:
    """Memoizes response-conditioned inference for one example under one model
    snapshot. Keys canonicalize the received (position, label) multiset, which
    is exact because conditioning only accumulates log-likelihood rows."""

    def __init__(self, model: CrfModel, x: TokenSequence, resp_model):
        self.base = compute_potentials(model, x)
        self.resp_model = resp_model
        self._memo = {}

    def _infer(self, received):
        key = tuple(sorted(received))
        hit = self._memo.get(key)
        if hit is None:
            potentials = condition_on_responses(self.base, key, self.resp_model)
            marginals = forward_backward(potentials)
            map_labels = viterbi_map(potentials)
            hit = (marginals, map_labels, expected_accuracy(marginals, map_labels))
            self._memo[key] = hit
        return hit

    def marginals(self, received) -> np.ndarray:
        return self._infer(received)[0].node

    def map_labels(self, received) -> list:
        return self._infer(received)[1]

    def expacc(self, received) -> float:
        return self._infer(received)[2]


def utility(state: GameState, crf: CrfModel, env: EnvironmentModel,
            params: UtilityParams, cache: PosteriorCache | None = None) -> float:
    """Terminal payoff: expected accuracy of the MAP prediction under the
    posterior conditioned on received answers, minus query and time costs.
    Pending queries contribute cost but no evidence."""
    if not state.terminal:
        raise IllegalAction("utility is defined on terminal states only")
    received = state.answered
    if cache is not None:
        expacc = cache.expacc(received)
    else:
        potentials = condition_on_responses(
            compute_potentials(crf, state.x), received, env.response_model)
        marginals = forward_backward(potentials)
        expacc = expected_accuracy(marginals, viterbi_map(potentials))
    cost = state.num_queries * params.cost_per_query + state.now * params.cost_per_second
    return expacc - cost
