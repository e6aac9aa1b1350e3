"""Live query broker: a retainer pool of connected workers answers the same
queries the simulated crowd would, driving the identical game loop and
episode-record pipeline.

All state mutations happen on the server's event loop; the broker's monotonic
clock is the single time authority, so every recorded arrival strictly follows
its issue regardless of client clocks. Message schemas carry ``v: 1`` and
ignore unknown fields.
"""

from __future__ import annotations

import asyncio
import contextlib
import dataclasses
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse

from . import game as g
from .config import RunConfig
from .crf import CrfModel
from .environment import CrowdResponse, EnvironmentModel
from .harness import (
    Dataset,
    build_environment,
    compute_metrics,
    export_results,
    finalize_episode,
    make_decider,
    stream_order,
    update_model,
    action_token,
)

SCHEMA_VERSION = 1
RETAINER_BONUS = 1.00
QUERY_PRICE = 0.01
DEFAULT_DEADLINE_SECONDS = 30.0
PUSH_INTERVAL_SECONDS = 2.0


class StaleAnswer(Exception):
    """Answer for a query that is already answered, reassigned elsewhere, or
    whose episode has closed."""


@dataclass
class WorkerSession:
    worker_id: str
    joined_at: float
    state: str = "idle"              # idle | assigned | departed
    assigned_query: int | None = None
    completed: int = 0
    payment: float = RETAINER_BONUS  # retainer bonus plus per-query price
    idle_since: float = 0.0
    socket: WebSocket | None = None


@dataclass
class PendingQuery:
    query_id: int
    episode_id: str
    episode_index: int
    game_index: int                  # index into the episode's action list
    position: int
    tokens: list
    labels: list
    issue_time: float                # broker clock
    deadline: float
    assigned_to: str | None = None
    assigned_at: float | None = None
    retries: int = 0
    answered: bool = False
    cancelled: bool = False


def _frame(type_: str, **fields) -> dict:
    return {"v": SCHEMA_VERSION, "type": type_, **fields}


class Broker:
    """Dispatches pending queries to the longest-idle worker, queues overflow
    FIFO, collects timed answers, and reassigns on departure or timeout."""

    def __init__(self, label_names, clock, deadline: float = DEFAULT_DEADLINE_SECONDS):
        self.label_names = list(label_names)
        self.clock = clock
        self.deadline = deadline
        self.workers: dict[str, WorkerSession] = {}
        self.queries: dict[int, PendingQuery] = {}
        self.queue: deque[int] = deque()
        self.responses: asyncio.Queue = asyncio.Queue()
        self.duplicates = 0
        self.stale = 0
        self._next_worker = 0
        self._next_query = 0
        self._send_tasks: set = set()

    # ---- worker lifecycle -------------------------------------------------

    def join(self, socket: WebSocket, worker_id: str | None = None) -> WorkerSession:
        now = self.clock()
        if worker_id and worker_id in self.workers and self.workers[worker_id].state != "departed":
            session = self.workers[worker_id]
            session.socket = socket
            if session.state == "assigned" and session.assigned_query in self.queries:
                self._send(socket, self._task_frame(self.queries[session.assigned_query]))
            return session
        self._next_worker += 1
        session = WorkerSession(worker_id="w%d" % self._next_worker,
                                joined_at=now, idle_since=now, socket=socket)
        self.workers[session.worker_id] = session
        self._assign_from_queue()
        return session

    def depart(self, worker_id: str):
        session = self.workers.get(worker_id)
        if session is None or session.state == "departed":
            return
        query_id = session.assigned_query
        session.state = "departed"
        session.assigned_query = None
        session.socket = None
        if query_id is not None and query_id in self.queries:
            query = self.queries[query_id]
            if not query.answered and not query.cancelled:
                query.assigned_to = None
                query.assigned_at = None
                self.queue.appendleft(query_id)  # reassignment goes to the head
                self._assign_from_queue()

    def disconnect(self, worker_id: str):
        """Socket dropped without goodbye: keep the session so a reconnect can
        resume; the timeout scan reclaims the task if they stay away."""
        session = self.workers.get(worker_id)
        if session is not None:
            session.socket = None

    # ---- query flow -------------------------------------------------------

    def submit(self, episode_id: str, episode_index: int, game_index: int,
               position: int, tokens, gold_labels=None) -> PendingQuery:
        self._next_query += 1
        query = PendingQuery(
            query_id=self._next_query,
            episode_id=episode_id,
            episode_index=episode_index,
            game_index=game_index,
            position=position,
            tokens=list(tokens),
            labels=list(self.label_names),
            issue_time=self.clock(),
            deadline=self.deadline,
        )
        self.queries[query.query_id] = query
        self.queue.append(query.query_id)
        self._assign_from_queue()
        return query

    def receive_answer(self, query_id: int, worker_id: str, label_name: str) -> tuple:
        """Returns (query, label_index, arrival_time) on the broker clock and
        marks the worker idle. Stale or duplicate answers raise StaleAnswer
        after paying the worker."""
        arrival = self.clock()
        session = self.workers.get(worker_id)
        query = self.queries.get(query_id)
        if session is not None and session.state == "assigned" and \
                session.assigned_query == query_id:
            session.state = "idle"
            session.assigned_query = None
            session.idle_since = arrival
        if query is None:
            self.stale += 1
            raise StaleAnswer("unknown query %r" % query_id)
        if session is not None:
            # late and duplicate answers are still paid; the game moved on
            session.completed += 1
            session.payment += QUERY_PRICE
        if query.answered or query.cancelled:
            self.duplicates += query.answered
            self.stale += 1
            self._assign_from_queue()
            raise StaleAnswer("query %d already closed" % query_id)
        if query.assigned_to != worker_id:
            self.stale += 1
            self._assign_from_queue()
            raise StaleAnswer("query %d not assigned to %s" % (query_id, worker_id))
        if label_name not in self.label_names:
            self.stale += 1
            self._assign_from_queue()
            raise StaleAnswer("unknown label %r" % label_name)
        query.answered = True
        label_index = self.label_names.index(label_name)
        self.responses.put_nowait((query.query_id, label_index, arrival))
        self._assign_from_queue()
        return query, label_index, arrival

    def cancel_episode(self, episode_index: int):
        for query in self.queries.values():
            if query.episode_index == episode_index and not query.answered:
                query.cancelled = True
        self.queue = deque(qid for qid in self.queue
                           if not self.queries[qid].cancelled)

    def timeout_scan(self, now: float | None = None) -> int:
        """Reassign queries whose assignment exceeded the deadline; returns
        how many were reclaimed."""
        now = self.clock() if now is None else now
        reclaimed = 0
        for query in self.queries.values():
            if query.answered or query.cancelled or query.assigned_to is None:
                continue
            if now - query.assigned_at > query.deadline:
                session = self.workers.get(query.assigned_to)
                if session is not None and session.assigned_query == query.query_id:
                    session.state = "idle"
                    session.assigned_query = None
                    session.idle_since = now
                query.assigned_to = None
                query.assigned_at = None
                query.retries += 1
                self.queue.appendleft(query.query_id)
                reclaimed += 1
        if reclaimed:
            self._assign_from_queue()
        return reclaimed

    # ---- internals ----------------------------------------------------------

    def idle_workers(self):
        return [s for s in self.workers.values()
                if s.state == "idle" and s.socket is not None]

    def pool_size(self) -> int:
        return sum(1 for s in self.workers.values()
                   if s.state != "departed" and s.socket is not None)

    def queue_depth(self) -> int:
        return len(self.queue)

    def _assign_from_queue(self):
        while self.queue:
            idle = self.idle_workers()
            if not idle:
                return
            worker = min(idle, key=lambda s: s.idle_since)  # longest idle first
            query_id = self.queue.popleft()
            query = self.queries[query_id]
            if query.answered or query.cancelled:
                continue
            now = self.clock()
            query.assigned_to = worker.worker_id
            query.assigned_at = now
            worker.state = "assigned"
            worker.assigned_query = query_id
            self._send(worker.socket, self._task_frame(query))

    def _task_frame(self, query: PendingQuery) -> dict:
        return _frame("task", query_id=query.query_id, tokens=query.tokens,
                      highlight_index=query.position, labels=query.labels,
                      deadline_seconds=query.deadline)

    def _send(self, socket: WebSocket, payload: dict):
        task = asyncio.ensure_future(self._send_quietly(socket, payload))
        self._send_tasks.add(task)
        task.add_done_callback(self._send_tasks.discard)

    @staticmethod
    async def _send_quietly(socket: WebSocket, payload: dict):
        try:
            await socket.send_json(payload)
        except Exception:
            pass  # dead socket; disconnect handling reclaims the task


class LiveStream:
    """Plays the dataset's episodes against the broker instead of the
    simulated crowd, feeding the same record pipeline and model updates."""

    def __init__(self, dataset: Dataset, config: RunConfig, broker: Broker, clock):
        self.dataset = dataset
        self.config = config
        self.broker = broker
        self.clock = clock
        self.env: EnvironmentModel = build_environment(config, dataset.label_set)
        self.model = CrfModel(dataset.label_set)
        self.rng = np.random.default_rng(config.seed)
        self.decide = make_decider(config, self.model, self.env, self.rng)
        self.records = []
        self.running = False
        self.stop_requested = False
        self.episode_index: int | None = None
        self.episode_id: str | None = None
        self.episode_start = 0.0
        self.current_cache = None
        self.current_state = None
        self.marginals_by_episode: dict[int, list] = {}
        self.listeners: list = []    # async callables fired after each event

    async def run(self):
        self.running = True
        self.stop_requested = False
        try:
            for index in stream_order(len(self.dataset.examples), self.config):
                if self.stop_requested:
                    break
                await self._play_episode(index)
                await self._notify()
        finally:
            self.running = False
            self.episode_index = None
            self.current_cache = None
            self.current_state = None
            await self._notify()

    async def _play_episode(self, index: int):
        x, gold = self.dataset.examples[index]
        example_id = "ex%05d" % index
        self.episode_index = index
        self.episode_id = example_id
        self.episode_start = self.clock()
        cache = g.PosteriorCache(self.model, x, self.env.response_model)
        self.current_cache = cache
        state = g.new_game(x)
        trajectory = []

        def game_clock() -> float:
            return self.clock() - self.episode_start

        while not state.terminal:
            if self.stop_requested:
                state = dataclasses.replace(state, awaiting_crowd=False)
                action = g.RETURN
            else:
                state = dataclasses.replace(state, now=game_clock())
                self.current_state = state
                action = self.decide(state, cache)
            state = g.apply_system_action(state, action)
            self.current_state = state
            trajectory.append({
                "episode": example_id, "action": action_token(action),
                "clock": state.now, "in_flight": len(state.in_flight()),
                "response": None,
            })
            if action.kind == "query":
                self.broker.submit(example_id, index, len(state.actions) - 1,
                                   action.position, x.tokens)
                await self._notify()
            elif action.kind == "wait":
                resolved = await self._await_response(state)
                if resolved is None:
                    continue  # stop requested; loop forces Return
                state = resolved
                self.current_state = state
                answered_positions = state.answered[-1]
                trajectory.append({
                    "episode": example_id, "action": "response",
                    "clock": state.now, "in_flight": len(state.in_flight()),
                    "response": answered_positions[1],
                })
                await self._notify()

        record = finalize_episode(self.config, state, cache, example_id, gold,
                                  self.model.version, trajectory)
        self.records.append(record)
        self.marginals_by_episode[index] = [
            [float(v) for v in row] for row in cache.marginals(state.received())]
        update_model(self.config, self.model, state, cache, gold)
        self.broker.cancel_episode(index)

    async def _await_response(self, state):
        while True:
            if self.stop_requested:
                return None
            try:
                query_id, label_index, arrival = await asyncio.wait_for(
                    self.broker.responses.get(), timeout=0.25)
            except asyncio.TimeoutError:
                continue
            query = self.broker.queries[query_id]
            if query.episode_index != self.episode_index or query.cancelled:
                continue  # stale cross-episode answer
            arrival_game = arrival - self.episode_start
            issue = state.issue_times[query.game_index]
            if arrival_game <= issue:
                arrival_game = float(np.nextafter(issue, np.inf))
            return g.apply_crowd_response(state, CrowdResponse(
                query_index=query.game_index, label=label_index,
                arrival_time=float(arrival_game)))

    def current_marginals(self):
        if self.current_cache is None or self.current_state is None:
            return None
        return [[float(v) for v in row]
                for row in self.current_cache.marginals(self.current_state.received())]

    async def _notify(self):
        for listener in list(self.listeners):
            await listener()


def build_app(dataset: Dataset, config: RunConfig, token: str = "otj-dev-token") -> FastAPI:
    started = time.monotonic()

    def broker_clock() -> float:
        return time.monotonic() - started

    broker = Broker(dataset.label_set.labels, broker_clock)
    stream = LiveStream(dataset, config, broker, broker_clock)
    operators: list[WebSocket] = []
    background: dict = {"stream_task": None, "scan_task": None}

    def check_token(req_token: str | None) -> bool:
        return req_token == token

    def status_doc() -> dict:
        episode = None
        if stream.episode_index is not None:
            episode = {"index": stream.episode_index, "id": stream.episode_id,
                       "total": len(dataset.examples)}
        return {
            "v": SCHEMA_VERSION,
            "running": stream.running,
            "pool_size": broker.pool_size(),
            "queue_depth": broker.queue_depth(),
            "episode": episode,
            "completed_episodes": len(stream.records),
            "duplicates": broker.duplicates,
            "stale": broker.stale,
            "cumulative_cost": sum(r.query_cost + r.time_cost for r in stream.records),
            "payments": {w.worker_id: round(w.payment, 2) for w in broker.workers.values()},
        }

    def dashboard_doc() -> dict:
        doc = status_doc()
        doc["type"] = "dashboard"
        doc["labels"] = list(dataset.label_set.labels)
        doc["marginals"] = stream.current_marginals()
        doc["tokens"] = list(stream.current_state.x.tokens) if stream.current_state else None
        if stream.records:
            summary = compute_metrics(stream.records, dataset, window=config.window,
                                      background=config.background_label)
            doc["rolling"] = {
                "f1_average": summary.f1_average,
                "micro_accuracy": summary.micro_accuracy,
                "queries_per_token": summary.queries_per_token,
                "curve": summary.curve,
            }
        else:
            doc["rolling"] = None
        return doc

    async def push_dashboard():
        frame = dashboard_doc()
        for socket in list(operators):
            try:
                await socket.send_json(frame)
            except Exception:
                if socket in operators:
                    operators.remove(socket)

    stream.listeners.append(push_dashboard)

    async def periodic_push():
        while True:
            await asyncio.sleep(PUSH_INTERVAL_SECONDS)
            broker.timeout_scan()
            await push_dashboard()

    def flush_records():
        if config.out_dir and stream.records:
            summary = compute_metrics(stream.records, dataset, window=config.window,
                                      background=config.background_label)
            export_results(stream.records, summary, config.out_dir)


    @contextlib.asynccontextmanager
    async def lifespan(_app):
        background["scan_task"] = asyncio.ensure_future(periodic_push())
        yield
        stream.stop_requested = True
        for key in ("scan_task", "stream_task"):
            task = background.get(key)
            if task is not None:
                task.cancel()
        flush_records()

    app = FastAPI(title="otj live broker", lifespan=lifespan)
    app.state.broker = broker
    app.state.stream = stream

    # ---- operator REST ------------------------------------------------------

    def _authorized(request) -> bool:
        return check_token(request.query_params.get("token")
                           or request.headers.get("x-otj-token"))

    @app.get("/status")
    async def get_status(request: Request):
        if not _authorized(request):
            return JSONResponse({"error": "bad token"}, status_code=401)
        return status_doc()

    @app.get("/metrics")
    async def get_metrics(request: Request):
        if not _authorized(request):
            return JSONResponse({"error": "bad token"}, status_code=401)
        if not stream.records:
            return {"v": SCHEMA_VERSION, "episodes": 0}
        summary = compute_metrics(stream.records, dataset, window=config.window,
                                  background=config.background_label)
        doc = dataclasses.asdict(summary)
        doc["v"] = SCHEMA_VERSION
        doc["episodes"] = len(stream.records)
        return doc

    @app.get("/marginals/{episode_index}")
    async def get_marginals(episode_index: int, request: Request):
        if not _authorized(request):
            return JSONResponse({"error": "bad token"}, status_code=401)
        if episode_index == stream.episode_index:
            marginals = stream.current_marginals()
            tokens = list(stream.current_state.x.tokens) if stream.current_state else None
        elif episode_index in stream.marginals_by_episode:
            marginals = stream.marginals_by_episode[episode_index]
            tokens = list(dataset.examples[episode_index][0].tokens)
        else:
            return JSONResponse({"error": "unknown episode"}, status_code=404)
        return {"v": SCHEMA_VERSION, "episode": episode_index, "tokens": tokens,
                "labels": list(dataset.label_set.labels), "marginals": marginals}

    @app.post("/stream/start")
    async def stream_start(request: Request):
        if not _authorized(request):
            return JSONResponse({"error": "bad token"}, status_code=401)
        if stream.running:
            return {"v": SCHEMA_VERSION, "ok": False, "reason": "already running"}
        background["stream_task"] = asyncio.ensure_future(stream.run())
        return {"v": SCHEMA_VERSION, "ok": True}

    @app.post("/stream/stop")
    async def stream_stop(request: Request):
        if not _authorized(request):
            return JSONResponse({"error": "bad token"}, status_code=401)
        stream.stop_requested = True
        return {"v": SCHEMA_VERSION, "ok": True}

    # ---- worker websocket ---------------------------------------------------

    @app.websocket("/ws")
    async def worker_socket(socket: WebSocket):
        await socket.accept()
        if not check_token(socket.query_params.get("token")):
            await socket.send_json(_frame("error", reason="bad token"))
            await socket.close()
            return
        session: WorkerSession | None = None
        try:
            while True:
                message = await socket.receive_json()
                kind = message.get("type")
                if kind == "join":
                    session = broker.join(socket, message.get("worker_id"))
                    await socket.send_json(_frame("joined", worker_id=session.worker_id))
                    await push_dashboard()
                elif kind == "answer" and session is not None:
                    try:
                        broker.receive_answer(int(message.get("query_id", -1)),
                                              session.worker_id,
                                              str(message.get("label")))
                        await socket.send_json(_frame("idle"))
                    except StaleAnswer as exc:
                        await socket.send_json(_frame("stale", reason=str(exc)))
                    await push_dashboard()
                elif kind == "ping":
                    await socket.send_json(_frame("pong"))
                elif kind == "goodbye":
                    if session is not None:
                        broker.depart(session.worker_id)
                        session = None
                    await socket.send_json(_frame("goodbye"))
                    await socket.close()
                    await push_dashboard()
                    return
                # unknown types ignored (forward compatibility)
        except WebSocketDisconnect:
            if session is not None:
                broker.disconnect(session.worker_id)
                await push_dashboard()

    # ---- operator websocket ---------------------------------------------------

    @app.websocket("/ws/operator")
    async def operator_socket(socket: WebSocket):
        await socket.accept()
        if not check_token(socket.query_params.get("token")):
            await socket.send_json(_frame("error", reason="bad token"))
            await socket.close()
            return
        operators.append(socket)
        await socket.send_json(dashboard_doc())
        try:
            while True:
                message = await socket.receive_json()
                if message.get("type") == "ping":
                    await socket.send_json(_frame("pong"))
        except WebSocketDisconnect:
            if socket in operators:
                operators.remove(socket)

    return app
