import time

import pytest
from fastapi.testclient import TestClient

from otj.config import RunConfig
from otj.harness import Dataset
from otj.service import Broker, StaleAnswer, build_app
from otj.synth import synthesize_dataset

TOKEN = "test-token"


def make_app(num_examples=3, length=2, policy="nvote:1", **cfg_kw):
    examples, labels = synthesize_dataset(num_examples, length, 3, seed=17)
    dataset = Dataset(examples=examples, label_set=labels)
    config = RunConfig(policy=policy, seed=1, **cfg_kw)
    return build_app(dataset, config, token=TOKEN), dataset


class RobotWorker:
    """Scripted worker: answers every task with the first label after a fixed
    delay, never double-sends."""

    def __init__(self, ws, delay=0.0, label=None):
        self.ws = ws
        self.delay = delay
        self.label = label
        self.answered = 0

    def join(self, worker_id=None):
        frame = {"v": 1, "type": "join"}
        if worker_id:
            frame["worker_id"] = worker_id
        self.ws.send_json(frame)
        joined = self.recv_type("joined")
        return joined["worker_id"]

    def recv_type(self, wanted):
        while True:
            msg = self.ws.receive_json()
            if msg["type"] == wanted:
                return msg

    def answer_tasks(self, count):
        for _ in range(count):
            task = self.recv_type("task")
            if self.delay:
                time.sleep(self.delay)
            label = self.label or task["labels"][0]
            self.ws.send_json({"v": 1, "type": "answer",
                               "query_id": task["query_id"], "label": label})
            self.answered += 1


def wait_until(predicate, timeout=30.0, interval=0.05):
    deadline = time.time() + timeout
    while time.time() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return False


class TestBrokerUnit:
    """Dispatch/timeout mechanics without sockets (clock is injectable)."""

    def _broker(self):
        clock = {"t": 0.0}
        broker = Broker(["A", "B"], lambda: clock["t"], deadline=30.0)
        return broker, clock

    class _FakeSocket:
        def __init__(self):
            self.sent = []

        async def send_json(self, payload):
            self.sent.append(payload)

    def _join(self, broker, clock, at):
        clock["t"] = at
        session = broker.join(self._FakeSocket())
        return session

    def test_longest_idle_wins(self):
        broker, clock = self._broker()
        w1 = self._join(broker, clock, 0.0)
        w2 = self._join(broker, clock, 5.0)
        clock["t"] = 6.0
        broker.submit("ex0", 0, 0, 0, ("a", "b"))
        assert w1.state == "assigned"
        assert w2.state == "idle"

    def test_queue_when_no_workers_then_assign_on_join(self):
        broker, clock = self._broker()
        query = broker.submit("ex0", 0, 0, 0, ("a", "b"))
        assert broker.queue_depth() == 1
        session = self._join(broker, clock, 1.0)
        assert session.state == "assigned"
        assert session.assigned_query == query.query_id
        assert broker.queue_depth() == 0

    def test_departure_requeues_to_head(self):
        broker, clock = self._broker()
        w1 = self._join(broker, clock, 0.0)
        q1 = broker.submit("ex0", 0, 0, 0, ("a",))
        q2 = broker.submit("ex0", 0, 1, 1, ("a",))
        assert w1.assigned_query == q1.query_id
        broker.depart(w1.worker_id)
        assert list(broker.queue)[0] == q1.query_id
        w2 = self._join(broker, clock, 2.0)
        assert w2.assigned_query == q1.query_id

    def test_timeout_reassigns_and_counts_retries(self):
        broker, clock = self._broker()
        w1 = self._join(broker, clock, 0.0)
        query = broker.submit("ex0", 0, 0, 0, ("a",))
        broker.disconnect(w1.worker_id)  # silent drop: session kept, socket gone
        clock["t"] = 31.0
        assert broker.timeout_scan() == 1
        assert query.retries == 1
        assert query.assigned_to is None
        w2 = self._join(broker, clock, 40.0)
        assert w2.assigned_query == query.query_id

    def test_timeout_can_rebounce_to_sole_worker(self):
        broker, clock = self._broker()
        w1 = self._join(broker, clock, 0.0)
        query = broker.submit("ex0", 0, 0, 0, ("a",))
        clock["t"] = 31.0
        assert broker.timeout_scan() == 1
        assert query.retries == 1
        assert query.assigned_to == w1.worker_id  # only worker gets it again
        assert query.assigned_at == 31.0

    def test_within_deadline_untouched(self):
        broker, clock = self._broker()
        self._join(broker, clock, 0.0)
        query = broker.submit("ex0", 0, 0, 0, ("a",))
        clock["t"] = 10.0
        assert broker.timeout_scan() == 0
        assert query.retries == 0

    def test_answer_records_broker_arrival_after_issue(self):
        broker, clock = self._broker()
        w1 = self._join(broker, clock, 0.0)
        clock["t"] = 1.0
        query = broker.submit("ex0", 0, 0, 0, ("a",))
        clock["t"] = 2.5
        _, label, arrival = broker.receive_answer(query.query_id, w1.worker_id, "B")
        assert label == 1
        assert arrival == 2.5
        assert arrival > query.issue_time

    def test_duplicate_answer_is_stale_and_paid(self):
        broker, clock = self._broker()
        w1 = self._join(broker, clock, 0.0)
        query = broker.submit("ex0", 0, 0, 0, ("a",))
        broker.receive_answer(query.query_id, w1.worker_id, "A")
        paid_before = broker.workers[w1.worker_id].payment
        with pytest.raises(StaleAnswer):
            broker.receive_answer(query.query_id, w1.worker_id, "A")
        assert broker.duplicates == 1
        assert broker.workers[w1.worker_id].payment > paid_before

    def test_payment_tally(self):
        broker, clock = self._broker()
        w1 = self._join(broker, clock, 0.0)
        q = broker.submit("ex0", 0, 0, 0, ("a",))
        broker.receive_answer(q.query_id, w1.worker_id, "A")
        assert broker.workers[w1.worker_id].payment == pytest.approx(1.00 + 0.01)


class TestServiceEndpoints:
    def test_status_requires_token(self):
        app, _ = make_app()
        with TestClient(app) as client:
            assert client.get("/status").status_code == 401
            doc = client.get("/status", params={"token": TOKEN}).json()
            assert doc["v"] == 1
            assert doc["pool_size"] == 0
            assert doc["running"] is False

    def test_worker_bad_token_refused_with_reason(self):
        app, _ = make_app()
        with TestClient(app) as client:
            with client.websocket_connect("/ws?token=wrong") as ws:
                frame = ws.receive_json()
                assert frame["type"] == "error"
                assert "token" in frame["reason"]

    def test_ping_pong_and_goodbye(self):
        app, _ = make_app()
        with TestClient(app) as client:
            with client.websocket_connect("/ws?token=%s" % TOKEN) as ws:
                robot = RobotWorker(ws)
                robot.join()
                ws.send_json({"v": 1, "type": "ping"})
                assert robot.recv_type("pong")
                ws.send_json({"v": 1, "type": "goodbye"})
                assert robot.recv_type("goodbye")

    def test_live_stream_end_to_end(self):
        app, dataset = make_app(num_examples=2, length=2)
        with TestClient(app) as client:
            with client.websocket_connect("/ws?token=%s" % TOKEN) as ws:
                robot = RobotWorker(ws, delay=0.01)
                robot.join()
                assert client.post("/stream/start", params={"token": TOKEN}).json()["ok"]
                robot.answer_tasks(4)  # 2 examples x 2 tokens, nvote:1
                stream = app.state.stream
                assert wait_until(lambda: not stream.running and len(stream.records) == 2)
                status = client.get("/status", params={"token": TOKEN}).json()
                assert status["completed_episodes"] == 2
                assert status["duplicates"] == 0
                for record in stream.records:
                    assert record.query_count == 2
                    for issue, arrival in zip(record.query_issue_times,
                                              record.query_arrival_times):
                        assert arrival > issue

    def test_marginals_endpoint_after_run(self):
        app, dataset = make_app(num_examples=1, length=2)
        with TestClient(app) as client:
            with client.websocket_connect("/ws?token=%s" % TOKEN) as ws:
                robot = RobotWorker(ws, delay=0.0)
                robot.join()
                client.post("/stream/start", params={"token": TOKEN})
                robot.answer_tasks(2)
                stream = app.state.stream
                assert wait_until(lambda: not stream.running)
                doc = client.get("/marginals/0", params={"token": TOKEN}).json()
                assert doc["labels"] == list(dataset.label_set.labels)
                assert len(doc["marginals"]) == 2
                for row in doc["marginals"]:
                    assert sum(row) == pytest.approx(1.0, abs=1e-6)

    def test_stop_halts_task_delivery(self):
        app, dataset = make_app(num_examples=4, length=2,
                                latency_mu=0.2, latency_sigma=0.05)
        with TestClient(app) as client:
            with client.websocket_connect("/ws?token=%s" % TOKEN) as ws:
                robot = RobotWorker(ws, delay=0.02)
                robot.join()
                client.post("/stream/start", params={"token": TOKEN})
                robot.answer_tasks(2)  # partway through
                client.post("/stream/stop", params={"token": TOKEN})
                stream = app.state.stream
                assert wait_until(lambda: not stream.running)
                status = client.get("/status", params={"token": TOKEN}).json()
                assert status["running"] is False

    def test_operator_push_follows_answer(self):
        app, dataset = make_app(num_examples=1, length=2)
        with TestClient(app) as client:
            with client.websocket_connect("/ws/operator?token=%s" % TOKEN) as ops:
                first = ops.receive_json()
                assert first["type"] == "dashboard"
                with client.websocket_connect("/ws?token=%s" % TOKEN) as ws:
                    robot = RobotWorker(ws)
                    robot.join()
                    client.post("/stream/start", params={"token": TOKEN})
                    task = robot.recv_type("task")
                    ws.send_json({"v": 1, "type": "answer",
                                  "query_id": task["query_id"],
                                  "label": task["labels"][1]})
                    # a dashboard frame reflecting the answer arrives without
                    # waiting for the periodic push
                    def got_conditioned_frame():
                        frame = ops.receive_json()
                        marg = frame.get("marginals")
                        if not marg:
                            return False
                        return abs(max(marg[task["highlight_index"]]) - 1 / 3) > 0.05
                    assert wait_until(got_conditioned_frame, timeout=1.5, interval=0.0)
                    robot.answer_tasks(1)

    def test_flush_on_shutdown(self, tmp_path):
        app, dataset = make_app(num_examples=1, length=2, out_dir=str(tmp_path / "live"))
        with TestClient(app) as client:
            with client.websocket_connect("/ws?token=%s" % TOKEN) as ws:
                robot = RobotWorker(ws)
                robot.join()
                client.post("/stream/start", params={"token": TOKEN})
                robot.answer_tasks(2)
                assert wait_until(lambda: not app.state.stream.running)
        # context exit runs shutdown; records must be flushed and parseable
        episodes = (tmp_path / "live" / "episodes.jsonl")
        assert episodes.exists()
        from otj.harness import load_episode_records
        assert len(load_episode_records(episodes)) == 1

    def test_reconnect_resumes_assigned_task(self):
        app, dataset = make_app(num_examples=1, length=1)
        with TestClient(app) as client:
            client.post("/stream/start", params={"token": TOKEN})
            with client.websocket_connect("/ws?token=%s" % TOKEN) as ws:
                robot = RobotWorker(ws)
                worker_id = robot.join()
                task = robot.recv_type("task")
            # socket dropped without goodbye; session persists
            with client.websocket_connect("/ws?token=%s" % TOKEN) as ws2:
                robot2 = RobotWorker(ws2)
                assert robot2.join(worker_id=worker_id) == worker_id
                task2 = robot2.recv_type("task")
                assert task2["query_id"] == task["query_id"]
                ws2.send_json({"v": 1, "type": "answer",
                               "query_id": task2["query_id"],
                               "label": task2["labels"][0]})
                robot2.recv_type("idle")
            assert wait_until(lambda: not app.state.stream.running)
