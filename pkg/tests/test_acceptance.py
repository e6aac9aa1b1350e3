"""Acceptance gate: every criterion at its stated tolerance, one printed
pass/fail line each.

Layout mirrors the three blocks: exact-inference and crowd-model oracles,
planner checks, and the end-to-end trend suite on synthetic data (run once in
a module fixture, two worker processes).
"""

import concurrent.futures
import math
import time

import numpy as np
import pytest

from otj import crf
from otj import game as g
from otj import policy as pol
from otj.cli import main as cli_main
from otj.environment import EnvironmentModel, LatencyModel, ResponseModel
from otj.synth import synthesize_dataset, write_dataset_file

import e2e
from oracles import (
    enumerate_chain,
    enumerate_conditioned,
    enumerate_predictive,
    majority_vote_accuracy,
    soft_label_loss,
)
from toygames import random_toy_game


def report(criterion: str, ok: bool, detail: str = ""):
    print("[%s] %s%s" % ("PASS" if ok else "FAIL", criterion,
                         (" -- " + detail) if detail else ""))
    assert ok, "%s %s" % (criterion, detail)


def random_potentials(rng, n, K, scale=2.0):
    return crf.ChainPotentials(node=rng.uniform(-scale, scale, size=(n, K)),
                               edge=rng.uniform(-scale, scale, size=(K, K)))


class TestOracleSuite:
    def test_criterion_1_inference_matches_enumeration(self):
        rng = np.random.default_rng(1001)
        worst = 0.0
        for _ in range(500):
            n = int(rng.integers(1, 7))
            K = int(rng.integers(2, 5))
            pots = random_potentials(rng, n, K)
            resp = ResponseModel(accuracy=0.7, label_count=K)
            responses = [(int(rng.integers(n)), int(rng.integers(K)))
                         for _ in range(int(rng.integers(0, 4)))]

            marg = crf.forward_backward(pots)
            ref_marg, ref_log_z, ref_best, ref_best_seqs = enumerate_chain(pots)
            worst = max(worst, float(np.abs(marg.node - ref_marg).max()),
                        abs(marg.log_partition - ref_log_z))

            path = crf.viterbi_map(pots)
            score = sum(pots.node[i][y] for i, y in enumerate(path))
            score += sum(pots.edge[a][b] for a, b in zip(path, path[1:]))
            assert abs(score - ref_best) <= 1e-9 and tuple(path) in ref_best_seqs

            conditioned = crf.condition_on_responses(pots, responses, resp)
            cond_marg = crf.forward_backward(conditioned)
            ref_cond = enumerate_conditioned(pots, responses, resp)
            worst = max(worst, float(np.abs(cond_marg.node - ref_cond).max()))
        report("criterion 1: marginals/MAP/posteriors vs enumeration (500 cases)",
               worst <= 1e-9, "worst deviation %.2e" % worst)

    def test_criterion_2_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1002)
        worst = 0.0
        for trial in range(100):
            n = int(rng.integers(1, 5))
            K = int(rng.integers(2, 4))
            labels = crf.LabelSet(["L%d" % k for k in range(K)])
            model = crf.CrfModel(labels)
            x = crf.TokenSequence(tuple("t%d_%d" % (trial, i) for i in range(n)))
            for i in range(n):
                crf.extract_features(x, i, model.registry, allow_new=True)
            model.ensure_capacity()
            model.node_weights = rng.uniform(-1, 1, size=model.node_weights.shape)
            model.trans_weights = rng.uniform(-1, 1, size=model.trans_weights.shape)
            target = rng.dirichlet(np.ones(K), size=n)
            l2 = 0.0 if trial % 2 == 0 else 1e-2
            grad_node, grad_trans = crf.soft_label_gradient(model, x, target, l2)

            def loss():
                pots = crf.compute_potentials(model, x)
                return soft_label_loss(pots, target, l2, model.flat_weights())

            h = 1e-5
            for arr, grad in ((model.node_weights, grad_node),
                              (model.trans_weights, grad_trans)):
                flat, flat_grad = arr.ravel(), grad.ravel()
                for idx in range(flat.size):
                    keep = flat[idx]
                    flat[idx] = keep + h
                    up = loss()
                    flat[idx] = keep - h
                    down = loss()
                    flat[idx] = keep
                    fd = (up - down) / (2 * h)
                    scale = max(abs(fd), 1e-2)
                    worst = max(worst, abs(flat_grad[idx] - fd) / scale)
        report("criterion 2: soft-label gradient vs central differences (100 cases)",
               worst <= 1e-5, "worst relative error %.2e" % worst)

    def test_criterion_3_posterior_predictive_vs_joint_enumeration(self):
        from otj.environment import posterior_predictive_response
        rng = np.random.default_rng(1003)
        worst = 0.0
        for trial in range(100):
            n = int(rng.integers(1, 5))
            K = int(rng.integers(2, 4))
            labels = crf.LabelSet(["L%d" % k for k in range(K)])
            model = crf.CrfModel(labels)
            x = crf.TokenSequence(tuple("p%d_%d" % (trial, i) for i in range(n)))
            for i in range(n):
                crf.extract_features(x, i, model.registry, allow_new=True)
            model.ensure_capacity()
            model.node_weights = rng.uniform(-1.5, 1.5, size=model.node_weights.shape)
            model.trans_weights = rng.uniform(-1.5, 1.5, size=model.trans_weights.shape)
            resp = ResponseModel(accuracy=0.7, label_count=K)
            received = [(int(rng.integers(n)), int(rng.integers(K)))
                        for _ in range(int(rng.integers(0, 3)))]
            q = int(rng.integers(n))
            got = posterior_predictive_response(model, x, received, q, resp)
            ref = enumerate_predictive(crf.compute_potentials(model, x), received, resp, q)
            worst = max(worst, float(np.abs(got - ref).max()))
        report("criterion 3: posterior predictive vs joint enumeration",
               worst <= 1e-9, "worst deviation %.2e" % worst)

    def test_criterion_4_response_model_frequencies(self):
        resp = ResponseModel(accuracy=0.7, label_count=4)
        rng = np.random.default_rng(1004)
        counts = np.zeros(4)
        for _ in range(100_000):
            counts[resp.sample(2, rng)] += 1
        correct = counts[2] / 100_000
        wrong = [counts[k] / 100_000 for k in (0, 1, 3)]
        ok = abs(correct - 0.7) <= 0.015 and all(abs(w - 0.1) <= 0.01 for w in wrong)
        report("criterion 4: response frequencies 0.7 +/- 0.015, wrong 0.1 +/- 0.01",
               ok, "correct %.4f wrong %s" % (correct, [round(w, 4) for w in wrong]))

    def test_criterion_5_latency_conditioning_and_mean(self):
        lat = LatencyModel(mean_mu=2.0, stddev_sigma=0.5)
        rng = np.random.default_rng(1005)
        issue = rng.uniform(0.0, 4.0, size=100_000)
        offsets = rng.uniform(0.0, 3.0, size=100_000)
        strictly_after = True
        for start in range(0, 100_000, 5_000):
            sl = slice(start, start + 5_000)
            now = float((issue[sl] + offsets[sl]).max())
            arrivals = lat.sample_arrivals(issue[sl], now=now, rng=rng)
            strictly_after &= bool(np.all(arrivals > now))
        mean = float(np.mean([lat.sample(rng) for _ in range(100_000)]))
        ok = strictly_after and abs(mean - 2.0) <= 0.03
        report("criterion 5: conditional arrivals strictly after now; mean %.3f" % mean, ok)


class TestPlannerSuite:
    def test_criterion_6_mcts_matches_expectimax(self):
        hits = 0
        for seed in range(100):
            rng = np.random.default_rng(2000 + seed)
            game, best = random_toy_game(rng)
            action, _ = pol.mcts_search(
                game, game.root, pol.PolicyConfig(rollout_budget=5000, max_depth=50), rng)
            hits += action == best
        report("criterion 6: MCTS picks expectimax-optimal root action", hits >= 95,
               "%d/100 seeded trials" % hits)

    def test_criterion_7_progressive_widening_bound(self):
        labels = crf.LabelSet(["L0", "L1", "L2"])
        model = crf.CrfModel(labels)
        x = crf.TokenSequence(("tokA", "tokB"))
        env = EnvironmentModel(ResponseModel(0.7, 3), LatencyModel(1.0, 0.3))
        cache = g.PosteriorCache(model, x, env.response_model)
        search_game = pol.QuerySearchGame(model, env, g.UtilityParams(), cache)
        cfg = pol.PolicyConfig(rollout_budget=10_000, max_depth=8)
        _, root = pol.mcts_search(search_game, g.new_game(x), cfg,
                                  np.random.default_rng(2100))

        violations = []
        crowd_nodes = [0]

        def walk(node):
            if node.children is None or node.state is None:
                return
            if search_game.is_chance(node.state):
                crowd_nodes[0] += 1
                if len(node.children) > max(1, math.ceil(math.sqrt(node.N))) + 1:
                    violations.append((node.N, len(node.children)))
                for child in node.children:
                    walk(child)
            else:
                for _, child in node.children:
                    walk(child)

        walk(root)
        report("criterion 7: widening bound |C| <= max(1, ceil(sqrt(N))) + 1",
               crowd_nodes[0] > 0 and not violations,
               "%d crowd nodes checked" % crowd_nodes[0])

    def test_criterion_8_threshold_query_count(self):
        cfg = pol.ThresholdConfig(confidence_target=0.98, uncertainty_factor=0.3)
        m = pol.threshold_queries_needed(0.6, cfg)
        report("criterion 8: threshold emits exactly 3 queries at p=0.6", m == 3,
               "computed m=%d" % m)


SEEDS = (101, 102, 103, 104, 105)


@pytest.fixture(scope="module")
def trend_runs():
    combos = [("lense", s) for s in SEEDS]
    combos += [("threshold", s) for s in SEEDS]
    combos += [("online", s) for s in SEEDS]
    combos += [("nvote:1", s) for s in SEEDS]
    combos += [("nvote:5", s) for s in SEEDS]
    results = {}
    started = time.time()
    with concurrent.futures.ProcessPoolExecutor(max_workers=2) as pool:
        futures = {pool.submit(e2e.run_combo, policy, seed): (policy, seed)
                   for policy, seed in combos}
        for future in concurrent.futures.as_completed(futures):
            key = futures[future]
            results[key] = future.result()
    print("trend suite simulations took %.0fs" % (time.time() - started))
    return results


class TestTrendSuite:
    def test_criterion_9_query_rate_decays(self, trend_runs):
        details = []
        ok = True
        for seed in SEEDS:
            episodes = trend_runs[("lense", seed)]["per_episode"]
            m = len(episodes)
            first = e2e.queries_per_token_over(episodes, 0, m // 5)
            last = e2e.queries_per_token_over(episodes, m - m // 5, m)
            details.append("seed %d: %.2f -> %.2f" % (seed, first, last))
            ok &= last < first
        report("criterion 9: LENSE queries/token, last quintile < first, per seed",
               ok, "; ".join(details))

    def test_criterion_10_method_ordering_early(self, trend_runs):
        def early_accuracy(policy):
            values = [e2e.accuracy_over(trend_runs[(policy, s)]["per_episode"], 0, 50)
                      for s in SEEDS]
            return float(np.mean(values))

        lense = early_accuracy("lense")
        threshold = early_accuracy("threshold")
        online = early_accuracy("online")
        ok = lense >= threshold - 0.01 and lense - online >= 0.05
        report("criterion 10: episodes 1-50 ordering", ok,
               "lense %.3f threshold %.3f online %.3f" % (lense, threshold, online))

    def test_criterion_11_redundant_votes_match_analytic_gap(self, trend_runs):
        acc1 = float(np.mean([trend_runs[("nvote:1", s)]["micro_accuracy"] for s in SEEDS]))
        acc5 = float(np.mean([trend_runs[("nvote:5", s)]["micro_accuracy"] for s in SEEDS]))

        dataset = e2e.build_dataset()
        freq = np.zeros(dataset.label_set.K)
        for _, gold in dataset.examples:
            for y in gold:
                freq[y] += 1
        freq /= freq.sum()
        analytic1 = sum(freq[k] * majority_vote_accuracy(1, 0.7, 4, k) for k in range(4))
        analytic5 = sum(freq[k] * majority_vote_accuracy(5, 0.7, 4, k) for k in range(4))
        gap = acc5 - acc1
        analytic_gap = analytic5 - analytic1
        ok = acc5 > acc1 and abs(gap - analytic_gap) <= 0.03
        report("criterion 11: 5-vote vs 1-vote gap matches analytic majority vote",
               ok, "empirical %.3f analytic %.3f (acc1 %.3f acc5 %.3f)"
               % (gap, analytic_gap, acc1, acc5))

    def test_criterion_12_determinism_byte_identical_exports(self, tmp_path):
        examples, labels = synthesize_dataset(num_examples=20, length=8, num_labels=4,
                                              seed=99, vocab_per_label=80,
                                              shared_vocab=30, noise=0.15)
        data = tmp_path / "data.tsv"
        write_dataset_file(examples, labels, data)
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            "policy = lense\nseed = 7\nmcts.budget = 100\nmcts.c = 0.1\n"
            "mcts.max_depth = 3\nutility.w_m = 0.0002\nutility.w_t = 0.0001\n")
        for sub in ("a", "b"):
            code = cli_main(["simulate", "--data", str(data), "--config", str(cfg),
                             "--out", str(tmp_path / sub)])
            assert code == 0
        identical = True
        for name in ("episodes.jsonl", "trajectory.jsonl", "summary.txt", "curve.csv"):
            identical &= (tmp_path / "a" / name).read_bytes() == \
                         (tmp_path / "b" / name).read_bytes()
        report("criterion 12: seeded simulate runs byte-identical", identical)
