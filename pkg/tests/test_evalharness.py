"""Evaluation harness: AUC against a brute-force all-pairs oracle, episode
traces, strategy metrics, and comparison/report formatting."""

import json

import numpy as np
import pytest

from rlogist import envmdp, evalharness, nets, slidegen


def brute_force_auc(scores):
    pos = [s for s, y in scores if y == 1]
    neg = [s for s, y in scores if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


class TestAuc:
    def test_brute_force_all_pairs_1000_sets(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(3, 30))
            labels = np.zeros(n, dtype=int)
            labels[: int(rng.integers(1, n))] = 1
            rng.shuffle(labels)
            if labels.sum() in (0, n):
                labels[0], labels[-1] = 0, 1
            # quantized scores so ties actually occur
            scores = [(float(rng.integers(0, 6)) / 5.0, int(y)) for y in labels]
            got = evalharness.compute_auc(scores)
            assert got == pytest.approx(brute_force_auc(scores), abs=1e-12)

    def test_perfect_separation(self):
        scores = [(0.9, 1), (0.8, 1), (0.2, 0), (0.1, 0)]
        assert evalharness.compute_auc(scores) == 1.0
        assert evalharness.compute_auc([(-s, y) for s, y in scores]) == 0.0

    def test_all_tied_scores_give_half(self):
        scores = [(0.5, 1), (0.5, 0), (0.5, 1), (0.5, 0)]
        assert evalharness.compute_auc(scores) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(evalharness.UndefinedAucError):
            evalharness.compute_auc([(0.5, 1), (0.7, 1)])


@pytest.fixture(scope="module")
def world():
    cfg = slidegen.GenConfig(d=4, K=4, N_range=(9, 12), seed=11)
    slides = [slidegen.generate_slide(cfg, i) for i in range(12)]
    if not any(s.label == 0 for s in slides) or \
            not any(s.label == 1 for s in slides):
        raise RuntimeError("fixture needs both labels")
    bundle = nets.init_bundle(4, seed=2,
                              arch={"hidden": 8, "attn_dim": 4, "embed_dim": 8})
    return slides, bundle, envmdp.EnvConfig(budget_fraction=0.25)


class TestTraces:
    def test_trace_covers_budget_with_unique_regions(self, world):
        slides, bundle, env_cfg = world
        for kind in ("learned", "random"):
            trace = evalharness.run_episode_trace(
                evalharness.StrategySpec(kind=kind), slides[0], bundle, env_cfg)
            T = envmdp.budget_steps(env_cfg.budget_fraction, slides[0].N)
            assert len(trace.steps) == T
            regions = [s.region for s in trace.steps]
            assert len(set(regions)) == T
            assert trace.observed_fraction == pytest.approx(T / slides[0].N)
            assert trace.prediction == trace.steps[-1].prob
            assert all(0.0 < s.prob < 1.0 for s in trace.steps)

    def test_full_observation_trace_covers_every_region(self, world):
        slides, bundle, env_cfg = world
        trace = evalharness.run_episode_trace(
            evalharness.StrategySpec(kind="full_observation"), slides[0],
            bundle, env_cfg)
        assert len(trace.steps) == slides[0].N
        assert trace.observed_fraction == 1.0

    def test_trace_json_round_trip(self, world, tmp_path):
        slides, bundle, env_cfg = world
        trace = evalharness.run_episode_trace(
            evalharness.StrategySpec(kind="random"), slides[0], bundle, env_cfg)
        path = tmp_path / "trace.json"
        evalharness.write_trace_json(trace, str(path))
        doc = json.loads(path.read_text())
        assert doc["slide_id"] == slides[0].slide_id
        assert len(doc["steps"]) == len(trace.steps)
        assert doc["prediction"] == trace.prediction

    def test_trace_image_is_valid_pgm(self, world, tmp_path):
        slides, bundle, env_cfg = world
        trace = evalharness.run_episode_trace(
            evalharness.StrategySpec(kind="random"), slides[0], bundle, env_cfg)
        path = tmp_path / "trace.pgm"
        evalharness.write_trace_ppm(trace, slides[0].N, str(path))
        blob = path.read_bytes()
        assert blob.startswith(b"P5\n")
        header, payload = blob.split(b"255\n", 1)
        side = int(header.split()[1])
        assert side * side == len(payload)
        img = np.frombuffer(payload, dtype=np.uint8)
        # exactly the visited cells are lit, first visit brightest
        assert (img > 0).sum() == len(trace.steps)
        first = trace.steps[0].region
        assert img[(first // side) * side + first % side] == img.max()

    def test_unknown_strategy_kind_rejected(self, world):
        slides, bundle, env_cfg = world
        with pytest.raises(evalharness.EvalError):
            evalharness.run_episode_trace(
                evalharness.StrategySpec(kind="oracle"), slides[0], bundle,
                env_cfg)


class TestEvaluateStrategy:
    def test_metrics_shape_and_cost_accounting(self, world):
        slides, bundle, env_cfg = world
        report = evalharness.evaluate_strategy(
            evalharness.StrategySpec(kind="random"), slides, bundle, env_cfg)
        assert report.n_slides == len(slides)
        assert 0.0 <= report.accuracy <= 1.0
        assert 0.0 <= report.auc <= 1.0
        expect_fraction = np.mean(
            [envmdp.budget_steps(0.25, s.N) / s.N for s in slides])
        assert report.mean_observed_fraction == pytest.approx(expect_fraction)
        expect_reads = np.mean(
            [envmdp.budget_steps(0.25, s.N) * s.K * s.d for s in slides])
        assert report.mean_sub_feature_reads == pytest.approx(expect_reads)

    def test_full_observation_reads_everything(self, world):
        slides, bundle, env_cfg = world
        report = evalharness.evaluate_strategy(
            evalharness.StrategySpec(kind="full_observation"), slides, bundle,
            env_cfg)
        assert report.mean_observed_fraction == 1.0
        expect = np.mean([s.N * s.K * s.d for s in slides])
        assert report.mean_sub_feature_reads == pytest.approx(expect)

    def test_learned_strategy_deterministic(self, world):
        slides, bundle, env_cfg = world
        spec = evalharness.StrategySpec(kind="learned")
        a = evalharness.evaluate_strategy(spec, slides, bundle, env_cfg)
        b = evalharness.evaluate_strategy(spec, slides, bundle, env_cfg)
        assert a.auc == b.auc and a.accuracy == b.accuracy

    def test_random_strategy_seed_controls_result(self, world):
        slides, bundle, env_cfg = world
        a = evalharness.evaluate_strategy(
            evalharness.StrategySpec(kind="random", seed=3), slides, bundle,
            env_cfg)
        b = evalharness.evaluate_strategy(
            evalharness.StrategySpec(kind="random", seed=3), slides, bundle,
            env_cfg)
        assert a.auc == b.auc

    def test_learned_strategy_from_checkpoint(self, world, tmp_path):
        slides, bundle, env_cfg = world
        path = str(tmp_path / "nets.rlgn")
        nets.save_bundle(bundle, path)
        direct = evalharness.evaluate_strategy(
            evalharness.StrategySpec(kind="learned"), slides, bundle, env_cfg)
        loaded = evalharness.evaluate_strategy(
            evalharness.StrategySpec(kind="learned", checkpoint=path), slides,
            None, env_cfg)
        assert loaded.auc == direct.auc


class TestCompare:
    def test_compare_emits_reports_and_deltas(self, world):
        slides, bundle, env_cfg = world
        out = evalharness.compare_strategies(
            slides, bundle, env_cfg,
            [evalharness.StrategySpec(kind="learned"),
             evalharness.StrategySpec(kind="random"),
             evalharness.StrategySpec(kind="full_observation")])
        assert set(out["strategies"]) == \
            {"learned#0", "random#1", "full_observation#2"}
        assert out["auc_deltas"]["learned#0 - random#1"] == pytest.approx(
            out["strategies"]["learned#0"]["auc"]
            - out["strategies"]["random#1"]["auc"])
        assert len(out["auc_deltas"]) == 3

    def test_compare_needs_two_strategies(self, world):
        slides, bundle, env_cfg = world
        with pytest.raises(evalharness.EvalError):
            evalharness.compare_strategies(
                slides, bundle, env_cfg,
                [evalharness.StrategySpec(kind="random")])


class TestFormatTable:
    def test_alignment_and_missing_values(self):
        rows = {"random": {"auc": 0.5, "reads": 128},
                "learned": {"auc": 0.91234}}
        text = evalharness.format_table(rows)
        lines = text.splitlines()
        assert len(lines) == 3
        assert all(len(l) == len(lines[0]) for l in lines)
        assert "0.9123" in text
        assert "-" in lines[1] + lines[2]  # missing reads renders as a dash
