"""Dataset ingestion, the streaming evaluation loop, metrics, and result
persistence.

The stream plays one query game per example, records what happened, then
updates the tagger: soft response-conditioned posteriors for the querying
policies, gold labels for the online-only baseline. With fixed seeds a
simulated run is deterministic end to end.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import game as g
from . import policy as pol
from .config import RunConfig
from .crf import CrfModel, LabelSet, TokenSequence, adagrad_update
from .environment import EnvironmentModel, EpisodeCrowd, FrozenPool, LatencyModel, ResponseModel

# safety valve only: no sane policy takes this many actions on one example
MAX_ACTIONS_PER_EPISODE = 10_000


class ParseError(Exception):
    pass


@dataclass
class Dataset:
    """Ordered examples with gold labels; classification tasks are chains of
    length one."""

    examples: list  # (TokenSequence, gold label-index tuple) pairs
    label_set: LabelSet

    def __post_init__(self):
        if not self.examples:
            raise ValueError("dataset has no examples")

    @property
    def task_kind(self) -> str:
        return "classification" if all(len(x) == 1 for x, _ in self.examples) else "sequence"

    def total_tokens(self) -> int:
        return sum(len(x) for x, _ in self.examples)


def load_sequence_dataset(path) -> Dataset:
    """Blank-line-separated sentences of ``token<TAB>label`` lines, with
    optional trailing tab-separated dense feature values. Labels join the
    label set in first-seen order."""
    label_names = []
    seen = set()
    sentences = []
    tokens, labels, dense = [], [], []

    def flush(lineno):
        if not tokens:
            return
        dense_rows = tuple(dense) if any(row for row in dense) else None
        if dense_rows is not None and len({len(r) for r in dense_rows}) > 1:
            raise ParseError("%s:%d: ragged dense feature rows in sentence" % (path, lineno))
        try:
            seq = TokenSequence(tuple(tokens), dense_rows)
        except ValueError as exc:
            raise ParseError("%s:%d: %s" % (path, lineno, exc)) from exc
        sentences.append((seq, tuple(labels)))
        tokens.clear()
        labels.clear()
        dense.clear()

    with open(path) as fh:
        lineno = 0
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                flush(lineno)
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise ParseError("%s:%d: expected token<TAB>label" % (path, lineno))
            token, label = parts[0], parts[1]
            try:
                row = tuple(float(v) for v in parts[2:])
            except ValueError:
                raise ParseError("%s:%d: bad dense feature value" % (path, lineno)) from None
            if label not in seen:
                seen.add(label)
                label_names.append(label)
            tokens.append(token)
            labels.append(label)
            dense.append(row)
        flush(lineno)

    if not sentences:
        raise ParseError("%s: no examples" % path)
    if len(label_names) < 2:
        raise ParseError("%s: need at least 2 distinct labels, found %d" % (path, len(label_names)))
    label_set = LabelSet(label_names)
    examples = [(seq, tuple(label_set.index(name) for name in names))
                for seq, names in sentences]
    return Dataset(examples=examples, label_set=label_set)


@dataclass
class EpisodeRecord:
    """Everything measured on one streamed example."""

    example_id: str
    predicted: list
    gold: list
    query_count: int
    query_positions: list
    query_issue_times: list
    query_arrival_times: list   # None for never-answered queries
    query_responses: list       # None for never-answered queries
    returned_at: float
    expected_accuracy: float
    query_cost: float
    time_cost: float
    utility: float
    model_version: int
    pool_exhausted: bool = False
    trajectory: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EpisodeRecord":
        return cls(**data)


def build_environment(config: RunConfig, label_set: LabelSet,
                      pool: FrozenPool | None = None) -> EnvironmentModel:
    return EnvironmentModel(
        response_model=ResponseModel(accuracy=config.accuracy, label_count=label_set.K),
        latency_model=LatencyModel(mean_mu=config.latency_mu,
                                   stddev_sigma=config.latency_sigma,
                                   floor=config.latency_floor),
        pool=pool,
        pool_fallback=config.pool_fallback,
    )


def stream_order(num_examples: int, config: RunConfig):
    order = list(range(num_examples))
    if config.stream_shuffle:
        np.random.default_rng(config.stream_seed).shuffle(order)
    return order


def action_token(action: g.Action) -> str:
    if action.kind == "query":
        return "query:%d" % action.position
    return action.kind


def make_decider(config: RunConfig, model: CrfModel, env: EnvironmentModel,
                 rng: np.random.Generator):
    """Policy dispatch closure decide(state, cache) -> Action for the
    configured policy."""
    kind, kind_args = config.policy_kind()
    params = config.utility_params()
    mcts_cfg = config.mcts_config()
    thr_cfg = config.threshold_config()

    def decide(state, cache):
        if len(state.actions) >= MAX_ACTIONS_PER_EPISODE:
            return g.RETURN
        if kind == "lense":
            return pol.mcts_decide(state, model, env, params, mcts_cfg, rng, cache)
        if kind == "threshold":
            return pol.threshold_decide(state, model, thr_cfg, cache)
        if kind == "nvote":
            return pol.nvote_decide(state, kind_args["n"])
        return pol.online_decide(state)

    return decide


def finalize_episode(config: RunConfig, state, cache, example_id: str, gold,
                     model_version: int, trajectory,
                     pool_exhausted: bool = False) -> EpisodeRecord:
    """Prediction and bookkeeping for one terminal game state."""
    kind, _ = config.policy_kind()
    params = config.utility_params()
    x = state.x
    received = state.received()
    if kind == "nvote":
        predicted = pol.nvote_aggregate(received, len(x), cache.base.K)
    else:
        predicted = list(cache.map_labels(received))
    expacc = cache.expacc(received)
    query_cost = state.query_count() * params.cost_per_query
    time_cost = state.now * params.cost_per_second
    query_rows = [j for j, a in enumerate(state.actions) if a.kind == "query"]
    return EpisodeRecord(
        example_id=example_id,
        predicted=[int(v) for v in predicted],
        gold=[int(v) for v in gold],
        query_count=state.query_count(),
        query_positions=[state.actions[j].position for j in query_rows],
        query_issue_times=[state.issue_times[j] for j in query_rows],
        query_arrival_times=[state.arrival_times[j] for j in query_rows],
        query_responses=[state.responses[j] for j in query_rows],
        returned_at=state.now,
        expected_accuracy=expacc,
        query_cost=query_cost,
        time_cost=time_cost,
        utility=expacc - query_cost - time_cost,
        model_version=model_version,
        pool_exhausted=pool_exhausted,
        trajectory=trajectory,
    )


def update_model(config: RunConfig, model: CrfModel, state, cache, gold):
    """Between-episode learning step: soft response-conditioned posteriors for
    querying policies, gold one-hots for the online baseline."""
    kind, _ = config.policy_kind()
    x = state.x
    K = model.K
    if kind == "online":
        target = np.zeros((len(x), K))
        target[np.arange(len(x)), list(gold)] = 1.0
    else:
        target = cache.marginals(state.received())
    adagrad_update(model, x, target, config.step_size, config.l2)


def run_stream(dataset: Dataset, config: RunConfig,
               pool: FrozenPool | None = None, model: CrfModel | None = None):
    """Play the whole stream; returns (records, model)."""
    env = build_environment(config, dataset.label_set, pool)
    if model is None:
        model = CrfModel(dataset.label_set)
    rng = np.random.default_rng(config.seed)
    decide = make_decider(config, model, env, rng)

    records = []
    for index in stream_order(len(dataset.examples), config):
        x, gold = dataset.examples[index]
        example_id = "ex%05d" % index
        crowd = EpisodeCrowd(env, example_id, gold)
        cache = g.PosteriorCache(model, x, env.response_model)
        state = g.new_game(x)
        trajectory = []

        while not state.terminal:
            action = decide(state, cache)
            state = g.apply_system_action(state, action)
            trajectory.append({
                "episode": example_id, "action": action_token(action),
                "clock": state.now, "in_flight": len(state.in_flight()),
                "response": None,
            })
            if action.kind == "wait":
                before = set(state.in_flight())
                state = g.sample_crowd_move(state, env, model, rng,
                                            mode="replay", crowd=crowd)
                answered = before - set(state.in_flight())
                j_star = answered.pop()
                trajectory.append({
                    "episode": example_id, "action": "response",
                    "clock": state.now, "in_flight": len(state.in_flight()),
                    "response": state.responses[j_star],
                })

        records.append(finalize_episode(config, state, cache, example_id, gold,
                                        model.version, trajectory,
                                        crowd.pool_exhausted))
        update_model(config, model, state, cache, gold)

    return records, model


@dataclass
class MetricsSummary:
    per_class: dict            # label name -> {"precision", "recall", "f1"}
    f1_average: float          # mean F1 over non-background classes
    micro_accuracy: float
    queries_per_token: float
    mean_delay_per_token: float
    cumulative_cost: float
    curve: list                # rows {"episode_window", "f1", "qs_per_token", "delay"}
    background_label: str | None = None


def _confusion_f1(records, label_set: LabelSet, background: str | None):
    K = label_set.K
    tp = np.zeros(K)
    fp = np.zeros(K)
    fn = np.zeros(K)
    correct = 0
    total = 0
    for rec in records:
        for p, y in zip(rec.predicted, rec.gold):
            total += 1
            if p == y:
                correct += 1
                tp[p] += 1
            else:
                fp[p] += 1
                fn[y] += 1
    per_class = {}
    scored = []
    for k, name in enumerate(label_set.labels):
        precision = float(tp[k] / (tp[k] + fp[k])) if tp[k] + fp[k] > 0 else 0.0
        recall = float(tp[k] / (tp[k] + fn[k])) if tp[k] + fn[k] > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        per_class[name] = {"precision": precision, "recall": recall, "f1": f1}
        if name != background:
            scored.append(f1)
    f1_average = float(np.mean(scored)) if scored else 0.0
    accuracy = correct / total if total else 0.0
    return per_class, f1_average, accuracy


def compute_metrics(records, dataset: Dataset, window: int = 50,
                    background: str | None = None) -> MetricsSummary:
    """Token-level per-class precision/recall/F1 (background excluded from the
    average), micro accuracy, query and delay rates, and a windowed learning
    curve."""
    if not records:
        raise ValueError("no episode records")
    if background is not None and background not in dataset.label_set.labels:
        background = None
    per_class, f1_average, accuracy = _confusion_f1(records, dataset.label_set, background)

    total_tokens = sum(len(r.gold) for r in records)
    total_queries = sum(r.query_count for r in records)
    total_delay = sum(r.returned_at for r in records)
    cumulative_cost = sum(r.query_cost + r.time_cost for r in records)

    curve = []
    for start in range(0, len(records), window):
        chunk = records[start:start + window]
        _, chunk_f1, _ = _confusion_f1(chunk, dataset.label_set, background)
        chunk_tokens = sum(len(r.gold) for r in chunk)
        curve.append({
            "episode_window": start // window,
            "f1": chunk_f1,
            "qs_per_token": sum(r.query_count for r in chunk) / chunk_tokens,
            "delay": sum(r.returned_at for r in chunk) / chunk_tokens,
        })
    return MetricsSummary(
        per_class=per_class,
        f1_average=f1_average,
        micro_accuracy=accuracy,
        queries_per_token=total_queries / total_tokens,
        mean_delay_per_token=total_delay / total_tokens,
        cumulative_cost=cumulative_cost,
        curve=curve,
        background_label=background,
    )


EPISODES_FILE = "episodes.jsonl"
TRAJECTORY_FILE = "trajectory.jsonl"
SUMMARY_FILE = "summary.txt"
CURVE_FILE = "curve.csv"


def summary_lines(summary: MetricsSummary):
    lines = []
    for name in sorted(summary.per_class):
        stats = summary.per_class[name]
        lines.append("precision[%s]=%r" % (name, stats["precision"]))
        lines.append("recall[%s]=%r" % (name, stats["recall"]))
        lines.append("f1[%s]=%r" % (name, stats["f1"]))
    lines.append("f1_average=%r" % summary.f1_average)
    lines.append("micro_accuracy=%r" % summary.micro_accuracy)
    lines.append("queries_per_token=%r" % summary.queries_per_token)
    lines.append("mean_delay_per_token=%r" % summary.mean_delay_per_token)
    lines.append("cumulative_cost=%r" % summary.cumulative_cost)
    lines.append("background_label=%s" % (summary.background_label or ""))
    return lines


def export_results(records, summary: MetricsSummary, out_dir, extra=None):
    """Write episodes.jsonl, trajectory.jsonl, summary.txt, and curve.csv.
    ``extra`` appends (key, value) pairs to the summary (e.g. replay flags).
    Output is byte-deterministic for identical inputs."""
    os.makedirs(out_dir, exist_ok=True)
    try:
        with open(os.path.join(out_dir, EPISODES_FILE), "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True))
                fh.write("\n")
        with open(os.path.join(out_dir, TRAJECTORY_FILE), "w") as fh:
            for rec in records:
                for row in rec.trajectory:
                    fh.write(json.dumps(row, sort_keys=True))
                    fh.write("\n")
        with open(os.path.join(out_dir, SUMMARY_FILE), "w") as fh:
            lines = summary_lines(summary)
            for key, value in (extra or []):
                lines.append("%s=%s" % (key, value))
            fh.write("\n".join(lines))
            fh.write("\n")
        with open(os.path.join(out_dir, CURVE_FILE), "w") as fh:
            fh.write("episode_window,f1,qs_per_token,delay\n")
            for row in summary.curve:
                fh.write("%d,%r,%r,%r\n" % (row["episode_window"], row["f1"],
                                            row["qs_per_token"], row["delay"]))
    except OSError as exc:
        raise OSError("failed writing results under %s: %s" % (out_dir, exc)) from exc


def load_episode_records(path):
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(EpisodeRecord.from_dict(json.loads(line)))
    return records
