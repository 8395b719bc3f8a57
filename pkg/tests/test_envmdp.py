"""Environment contracts: budget arithmetic, action masking, update
sequencing, terminal-reward analytics, and sub-feature read accounting."""

import math

import numpy as np
import pytest

from rlogist import envmdp, nets, slidegen


@pytest.fixture(scope="module")
def net_bundle():
    return nets.init_bundle(16, seed=0)


def make_slide(seed=0, label=None, n_range=(8, 16)):
    cfg = slidegen.GenConfig(N_range=n_range, seed=1)
    return slidegen.generate_slide(cfg, seed, label=label)


class TestReset:
    def test_budget_arithmetic(self):
        assert envmdp.budget_steps(0.2, 40) == 8
        assert envmdp.budget_steps(0.1, 3) == 1   # ceil(0.3), floor of one
        assert envmdp.budget_steps(1.0, 7) == 7

    def test_reset_state(self):
        bundle = make_slide()
        state = envmdp.reset(bundle, envmdp.EnvConfig(budget_fraction=0.25))
        assert state.t == 0 and not state.done
        assert not state.observed.any()
        assert state.T == math.ceil(0.25 * bundle.N)
        assert np.array_equal(state.current_scan, bundle.scan_features)
        # the env works on a copy: mutating the state leaves the bundle alone
        state.current_scan[0, 0] += 1.0
        assert state.current_scan[0, 0] != bundle.scan_features[0, 0]

    def test_reset_is_pure(self):
        bundle = make_slide()
        cfg = envmdp.EnvConfig()
        a = envmdp.reset(bundle, cfg)
        b = envmdp.reset(bundle, cfg)
        assert np.array_equal(a.current_scan, b.current_scan)
        assert a.T == b.T

    def test_invalid_budget(self):
        with pytest.raises(envmdp.EnvError):
            envmdp.EnvConfig(budget_fraction=1.5).validate()
        with pytest.raises(envmdp.EnvError):
            envmdp.EnvConfig(budget_fraction=0.0).validate()


class TestMasking:
    def test_fresh_state_all_legal(self, net_bundle):
        state = envmdp.reset(make_slide(), envmdp.EnvConfig())
        assert envmdp.legal_action_mask(state).all()

    def test_observed_region_becomes_illegal(self, net_bundle):
        bundle = make_slide()
        state = envmdp.reset(bundle, envmdp.EnvConfig(budget_fraction=0.5))
        envmdp.step(state, 3, net_bundle)
        mask = envmdp.legal_action_mask(state)
        assert not mask[3]
        assert mask.sum() == bundle.N - 1

    def test_illegal_action_raises(self, net_bundle):
        state = envmdp.reset(make_slide(), envmdp.EnvConfig(budget_fraction=0.5))
        envmdp.step(state, 3, net_bundle)
        with pytest.raises(envmdp.IllegalActionError):
            envmdp.step(state, 3, net_bundle)
        with pytest.raises(envmdp.IllegalActionError):
            envmdp.step(state, state.N + 5, net_bundle)

    def test_finished_episode_raises(self, net_bundle):
        bundle = make_slide()
        state = envmdp.reset(bundle, envmdp.EnvConfig(budget_fraction=0.01))
        envmdp.step(state, 0, net_bundle)  # T == 1
        assert state.done
        with pytest.raises(envmdp.EpisodeFinishedError):
            envmdp.step(state, 1, net_bundle)
        with pytest.raises(envmdp.EpisodeFinishedError):
            envmdp.legal_action_mask(state)


class TestUpdateSequencing:
    def test_fixed_variant_replaces_with_raw_mean_only(self, net_bundle):
        bundle = make_slide()
        cfg = envmdp.EnvConfig(budget_fraction=0.5, updater_variant="fixed")
        state = envmdp.reset(bundle, cfg)
        before = state.current_scan.copy()
        envmdp.step(state, 2, net_bundle)
        expect = bundle.sub_features[2].mean(axis=0).astype(np.float32)
        assert np.array_equal(state.current_scan[2], expect)
        others = np.arange(bundle.N) != 2
        assert np.array_equal(state.current_scan[others], before[others])

    def test_fixed_variant_unobserved_rows_stay_bit_identical(self, net_bundle):
        bundle = make_slide()
        cfg = envmdp.EnvConfig(budget_fraction=1.0, updater_variant="fixed")
        state = envmdp.reset(bundle, cfg)
        order = list(range(bundle.N))
        for a in order:
            unobs = ~state.observed.copy()
            unobs[a] = False
            envmdp.step(state, a, net_bundle)
            assert np.array_equal(state.current_scan[unobs],
                                  bundle.scan_features[unobs])

    def test_zero_init_global_updater_acts_as_identity(self):
        # freshly initialized nets: residual correction head starts at zero,
        # so local_and_global leaves unobserved rows untouched
        fresh = nets.init_bundle(16, seed=3)
        bundle = make_slide()
        cfg = envmdp.EnvConfig(budget_fraction=0.5,
                               updater_variant="local_and_global")
        state = envmdp.reset(bundle, cfg)
        envmdp.step(state, 0, fresh)
        others = ~state.observed
        assert np.array_equal(state.current_scan[others],
                              bundle.scan_features[others])

    def test_local_only_uses_local_updater(self, net_bundle):
        bundle = make_slide()
        cfg = envmdp.EnvConfig(budget_fraction=0.5, updater_variant="local_only")
        state = envmdp.reset(bundle, cfg)
        envmdp.step(state, 1, net_bundle)
        expect = nets.local_update(net_bundle, bundle.sub_features[1])
        assert np.allclose(state.current_scan[1], expect, atol=1e-6)

    def test_global_update_uses_pre_update_observed_value(self, net_bundle):
        bundle = make_slide()
        cfg = envmdp.EnvConfig(budget_fraction=0.5,
                               updater_variant="local_and_global")
        state = envmdp.reset(bundle, cfg)
        v_a = state.current_scan[4].copy()
        envmdp.step(state, 4, net_bundle)
        v_a_new = nets.local_update(net_bundle, bundle.sub_features[4])
        others = np.flatnonzero(~state.observed)
        expect = np.asarray(nets.global_update_batch(
            net_bundle, bundle.scan_features[others], v_a, v_a_new))
        assert np.allclose(state.current_scan[others], expect, atol=1e-6)


class TestReward:
    def test_cross_entropy_analytic(self):
        assert envmdp.cross_entropy(0.5, 1) == pytest.approx(math.log(2))
        assert envmdp.cross_entropy(0.5, 0) == pytest.approx(math.log(2))
        assert envmdp.cross_entropy(1.0 - 1e-15, 1) == pytest.approx(0.0, abs=1e-9)

    def test_terminal_reward_clip_floor(self):
        assert envmdp.terminal_reward(1e-9, 1, floor=-5.0) == -5.0
        assert envmdp.terminal_reward(0.5, 1, floor=-5.0) == \
            pytest.approx(-math.log(2))

    def test_reward_zero_until_terminal(self, net_bundle):
        bundle = make_slide()
        cfg = envmdp.EnvConfig(budget_fraction=0.5)
        state = envmdp.reset(bundle, cfg)
        for step_i in range(state.T):
            result = envmdp.step(state, step_i, net_bundle)
            if step_i < state.T - 1 and not result.done:
                assert result.reward == 0.0
                assert "prediction" not in result.info
        assert result.done
        assert "prediction" in result.info
        recomputed = envmdp.terminal_reward(result.info["prediction"],
                                            bundle.label, cfg.reward_clip_floor)
        assert result.reward == pytest.approx(recomputed, abs=1e-9)

    def test_instant_reward_mode(self, net_bundle):
        bundle = make_slide()
        cfg = envmdp.EnvConfig(budget_fraction=0.5, reward_mode="instant")
        state = envmdp.reset(bundle, cfg)
        result = envmdp.step(state, 0, net_bundle)
        assert "prediction" in result.info  # every step scores in instant mode


class TestEpisodeInvariants:
    def test_random_policy_episode_sweep(self, net_bundle):
        """Bulk invariant check: length exactly T, unique observations, zero
        non-terminal rewards, exact read accounting, terminal-reward match."""
        rng = np.random.default_rng(0)
        cfg_pool = [envmdp.EnvConfig(budget_fraction=f,
                                     updater_variant=v)
                    for f in (0.1, 0.2, 0.5)
                    for v in envmdp.UPDATER_VARIANTS]
        slides = [make_slide(seed) for seed in range(10)]
        for ep in range(300):
            bundle = slides[ep % len(slides)]
            cfg = cfg_pool[ep % len(cfg_pool)]
            state = envmdp.reset(bundle, cfg)
            T = state.T
            seen = set()
            steps = 0
            while not state.done:
                legal = np.flatnonzero(envmdp.legal_action_mask(state))
                action = int(legal[rng.integers(legal.size)])
                assert action not in seen
                seen.add(action)
                result = envmdp.step(state, action, net_bundle)
                steps += 1
                if not result.done:
                    assert result.reward == 0.0
            assert steps == T
            assert state.observed.sum() == T
            assert state.sub_feature_reads == T * bundle.K * bundle.d
            assert result.reward == pytest.approx(
                envmdp.terminal_reward(result.info["prediction"], bundle.label,
                                       cfg.reward_clip_floor), abs=1e-9)
            assert envmdp.observed_fraction(state) == pytest.approx(T / bundle.N)

    def test_observed_fraction_requires_finished(self, net_bundle):
        state = envmdp.reset(make_slide(), envmdp.EnvConfig())
        with pytest.raises(envmdp.EnvError):
            envmdp.observed_fraction(state)

    def test_empty_slide_rejected(self):
        bundle = make_slide()
        bundle.scan_features = bundle.scan_features[:0]
        bundle.sub_features = bundle.sub_features[:0]
        bundle.region_truth = None
        with pytest.raises(envmdp.EmptySlideError):
            envmdp.reset(bundle, envmdp.EnvConfig())
