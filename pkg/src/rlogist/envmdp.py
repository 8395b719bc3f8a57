"""The observation MDP: reset, masked step with cross-magnification feature
updates, and a terminal reward equal to the clipped negative cross-entropy of
the final slide prediction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .slidegen import SlideBundle

UPDATER_VARIANTS = ("fixed", "local_only", "local_and_global")


class EnvError(Exception):
    pass


class EmptySlideError(EnvError):
    pass


class IllegalActionError(EnvError):
    pass


class EpisodeFinishedError(EnvError):
    pass


@dataclass
class EnvConfig:
    budget_fraction: float = 0.2
    reward_mode: str = "final"            # "final" or "instant"
    reward_clip_floor: float = -5.0
    updater_variant: str = "local_and_global"
    classifier_obs_mode: str = "full"     # "full" or "observed_only"

    def validate(self):
        if not 0.0 < self.budget_fraction <= 1.0:
            raise EnvError(f"budget_fraction {self.budget_fraction} outside (0,1]")
        if self.reward_mode not in ("final", "instant"):
            raise EnvError(f"unknown reward_mode {self.reward_mode!r}")
        if self.updater_variant not in UPDATER_VARIANTS:
            raise EnvError(f"unknown updater_variant {self.updater_variant!r}")


@dataclass
class EnvState:
    bundle: SlideBundle
    config: EnvConfig
    current_scan: np.ndarray          # (N,d) float32, mutated by updates
    observed: np.ndarray              # (N,) bool
    t: int = 0
    T: int = 0
    done: bool = False
    sub_feature_reads: int = 0        # cumulative values fetched at high power

    @property
    def N(self) -> int:
        return self.bundle.N


@dataclass
class StepResult:
    state: EnvState
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


def budget_steps(budget_fraction: float, n_regions: int) -> int:
    return max(1, math.ceil(budget_fraction * n_regions))


def reset(bundle: SlideBundle, config: EnvConfig) -> EnvState:
    config.validate()
    if bundle.N == 0:
        raise EmptySlideError("slide has no regions")
    return EnvState(
        bundle=bundle,
        config=config,
        current_scan=bundle.scan_features.astype(np.float32).copy(),
        observed=np.zeros(bundle.N, dtype=bool),
        t=0,
        T=budget_steps(config.budget_fraction, bundle.N),
    )


def legal_action_mask(state: EnvState) -> np.ndarray:
    if state.done:
        raise EpisodeFinishedError("episode is finished")
    return ~state.observed


def cross_entropy(y_hat: float, y: int, eps: float = 1e-12) -> float:
    p = min(max(float(y_hat), eps), 1.0 - eps)
    return -(y * math.log(p) + (1 - y) * math.log(1.0 - p))


def terminal_reward(y_hat: float, y: int, floor: float) -> float:
    return max(-cross_entropy(y_hat, y), floor)


def step(state: EnvState, action: int, net_bundle: nets.NetworkBundle) -> StepResult:
    if state.done:
        raise EpisodeFinishedError("episode is finished")
    action = int(action)
    if not 0 <= action < state.N or state.observed[action]:
        raise IllegalActionError(f"action {action} is not legal at step {state.t}")

    cfg = state.config
    v_a = state.current_scan[action].copy()  # pre-update value for the pair
    subs = state.bundle.sub_features[action]
    state.sub_feature_reads += subs.size

    if cfg.updater_variant == "fixed":
        v_a_new = subs.mean(axis=0).astype(np.float32)
    else:
        v_a_new = nets.local_update(net_bundle, subs).astype(np.float32)
    state.current_scan[action] = v_a_new

    if cfg.updater_variant == "local_and_global":
        others = np.flatnonzero(~state.observed)
        others = others[others != action]
        if others.size:
            updated = nets.global_update_batch(
                net_bundle, state.current_scan[others], v_a, v_a_new)
            state.current_scan[others] = np.asarray(updated, dtype=np.float32)

    state.observed[action] = True
    state.t += 1
    info: dict = {"action": action}
    reward = 0.0
    if state.t == state.T:
        state.done = True
        y_hat = nets.classify_slide(net_bundle, state.current_scan,
                                    state.observed, obs_mode=cfg.classifier_obs_mode)
        reward = terminal_reward(y_hat, state.bundle.label, cfg.reward_clip_floor)
        info["prediction"] = y_hat
    elif cfg.reward_mode == "instant":
        y_hat = nets.classify_slide(net_bundle, state.current_scan,
                                    state.observed, obs_mode=cfg.classifier_obs_mode)
        reward = terminal_reward(y_hat, state.bundle.label, cfg.reward_clip_floor)
        info["prediction"] = y_hat
    return StepResult(state=state, reward=reward, done=state.done, info=info)


def observed_fraction(state: EnvState) -> float:
    if not state.done:
        raise EnvError("episode not finished")
    return float(state.observed.sum()) / state.N
