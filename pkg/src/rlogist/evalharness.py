"""Strategy evaluation: metrics, observation-path traces, strategy and
updater ablation drivers, and observed-fraction cost accounting."""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import envmdp
from . import nets
from . import numkernel as K
from . import slidegen


class EvalError(Exception):
    pass


class UndefinedAucError(EvalError):
    pass


def compute_auc(scores) -> float:
    """AUC as the normalized Mann-Whitney U statistic; ties count one half."""
    y_hat = np.array([s[0] for s in scores], dtype=np.float64)
    y = np.array([s[1] for s in scores], dtype=np.int64)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError("both classes required for AUC")
    order = np.argsort(y_hat, kind="stable")
    sorted_scores = y_hat[order]
    ranks = np.empty(len(y_hat), dtype=np.float64)
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# strategies


@dataclass
class StrategySpec:
    kind: str                      # learned | random | full_observation
    checkpoint: str | None = None  # for learned, when nets not passed directly
    seed: int = 0

    def validate(self):
        if self.kind not in ("learned", "random", "full_observation"):
            raise EvalError(f"unknown strategy kind {self.kind!r}")


def _make_policy(spec: StrategySpec, net_bundle):
    spec.validate()
    if spec.kind == "learned" and spec.checkpoint is not None:
        net_bundle = nets.load_bundle(spec.checkpoint)
    rng = np.random.default_rng(spec.seed)

    def choose(state):
        legal = envmdp.legal_action_mask(state)
        if spec.kind == "random" or spec.kind == "full_observation":
            choices = np.flatnonzero(legal)
            return int(choices[rng.integers(choices.size)])
        logits = nets.policy_logits(net_bundle, state)
        return int(np.argmax(K.apply_mask(np.asarray(logits), legal)))

    return choose, net_bundle


def _strategy_env_config(spec: StrategySpec, env_config: envmdp.EnvConfig):
    if spec.kind == "full_observation":
        return dataclasses.replace(env_config, budget_fraction=1.0)
    return env_config


# ---------------------------------------------------------------------------
# traces


@dataclass
class TraceStep:
    t: int
    region: int
    prob: float


@dataclass
class PathTrace:
    slide_id: str
    label: int
    steps: list[TraceStep]
    prediction: float
    observed_fraction: float

    def to_json(self) -> dict:
        return {"slide_id": self.slide_id, "label": self.label,
                "steps": [{"t": s.t, "region": s.region, "prob": s.prob}
                          for s in self.steps],
                "prediction": self.prediction,
                "observed_fraction": self.observed_fraction}


def run_episode_trace(strategy: StrategySpec, bundle: slidegen.SlideBundle,
                      net_bundle, env_config: envmdp.EnvConfig) -> PathTrace:
    """One full episode with per-step diagnostic classifier probabilities."""
    choose, net_bundle = _make_policy(strategy, net_bundle)
    cfg = _strategy_env_config(strategy, env_config)
    state = envmdp.reset(bundle, cfg)
    steps = []
    while not state.done:
        action = choose(state)
        result = envmdp.step(state, action, net_bundle)
        prob = result.info.get("prediction")
        if prob is None:
            prob = nets.classify_slide(net_bundle, state.current_scan,
                                       state.observed,
                                       obs_mode=cfg.classifier_obs_mode)
        steps.append(TraceStep(t=state.t, region=action, prob=float(prob)))
    return PathTrace(slide_id=bundle.slide_id, label=bundle.label, steps=steps,
                     prediction=steps[-1].prob,
                     observed_fraction=envmdp.observed_fraction(state))


def write_trace_json(trace: PathTrace, path: str):
    with open(path, "w") as f:
        json.dump(trace.to_json(), f, indent=1)


def write_trace_ppm(trace: PathTrace, n_regions: int, path: str):
    """Grayscale visit-order grid (PGM): earlier visits brighter, unvisited
    black. Regions are laid out row-major on a near-square grid."""
    side = math.ceil(math.sqrt(n_regions))
    img = np.zeros((side, side), dtype=np.uint8)
    total = len(trace.steps)
    for s in trace.steps:
        shade = 255 - int(200 * (s.t - 1) / max(1, total - 1)) if total > 1 else 255
        img[s.region // side, s.region % side] = shade
    with open(path, "wb") as f:
        f.write(f"P5\n{side} {side}\n255\n".encode())
        f.write(img.tobytes())


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsReport:
    accuracy: float
    auc: float | None
    n_slides: int
    mean_observed_fraction: float
    mean_sub_feature_reads: float

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def evaluate_strategy(strategy: StrategySpec, manifest, net_bundle,
                      env_config: envmdp.EnvConfig) -> MetricsReport:
    """One episode per slide; aggregates accuracy, AUC, and cost accounting."""
    slides = manifest if isinstance(manifest, list) \
        else slidegen.load_bundles(manifest)
    choose, net_bundle = _make_policy(strategy, net_bundle)
    cfg = _strategy_env_config(strategy, env_config)
    scores, fractions, reads = [], [], []
    for bundle in slides:
        state = envmdp.reset(bundle, cfg)
        while not state.done:
            result = envmdp.step(state, choose(state), net_bundle)
        scores.append((result.info["prediction"], bundle.label))
        fractions.append(envmdp.observed_fraction(state))
        reads.append(state.sub_feature_reads)
    y_hat = np.array([s[0] for s in scores])
    y = np.array([s[1] for s in scores])
    accuracy = float(((y_hat >= 0.5).astype(int) == y).mean())
    try:
        auc = compute_auc(scores)
    except UndefinedAucError:
        auc = None
    return MetricsReport(accuracy=accuracy, auc=auc, n_slides=len(slides),
                         mean_observed_fraction=float(np.mean(fractions)),
                         mean_sub_feature_reads=float(np.mean(reads)))


def compare_strategies(manifest, net_bundle, env_config: envmdp.EnvConfig,
                       strategies: list[StrategySpec],
                       train_reports: dict | None = None) -> dict:
    """One MetricsReport per strategy plus pairwise AUC deltas."""
    if len(strategies) < 2:
        raise EvalError("need at least two strategies to compare")
    slides = manifest if isinstance(manifest, list) \
        else slidegen.load_bundles(manifest)
    rows = {}
    for i, spec in enumerate(strategies):
        name = f"{spec.kind}#{i}"
        report = evaluate_strategy(spec, slides, net_bundle, env_config)
        rows[name] = report
    deltas = {}
    names = list(rows)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if rows[a].auc is not None and rows[b].auc is not None:
                deltas[f"{a} - {b}"] = rows[a].auc - rows[b].auc
    out = {"strategies": {n: r.to_json() for n, r in rows.items()},
           "auc_deltas": deltas}
    if train_reports:
        out["episodes_to_threshold"] = {
            name: rep.episodes_to_threshold for name, rep in train_reports.items()}
    return out


def ablate_updaters(train_manifest, test_manifest, env_config: envmdp.EnvConfig,
                    pretrained: nets.NetworkBundle, ppo_config=None,
                    variants=envmdp.UPDATER_VARIANTS, seed: int = 0) -> dict:
    """Train and evaluate one agent per feature-updater variant."""
    import copy

    from . import rltrain

    if ppo_config is None:
        ppo_config = rltrain.PPOConfig()
    train_slides = slidegen.load_bundles(train_manifest) \
        if not isinstance(train_manifest, list) else train_manifest
    test_slides = slidegen.load_bundles(test_manifest) \
        if not isinstance(test_manifest, list) else test_manifest
    rows = {}
    for variant in variants:
        cfg = dataclasses.replace(env_config, updater_variant=variant)
        bundle_v = copy.deepcopy(pretrained)
        rltrain.train(ppo_config, train_slides, [], cfg, bundle_v,
                      algorithm="ppo", seed=seed, eval_every=0)
        report = evaluate_strategy(StrategySpec(kind="learned", seed=seed),
                                   test_slides, bundle_v, cfg)
        rows[variant] = report
    return {"variants": {v: r.to_json() for v, r in rows.items()}}


def format_table(rows: dict[str, dict]) -> str:
    """Aligned plain-text table from {row_name: {col: value}}."""
    cols = sorted({c for r in rows.values() for c in r})
    widths = {c: max(len(c), *(len(_fmt(r.get(c))) for r in rows.values()))
              for c in cols}
    name_w = max(len("strategy"), *(len(n) for n in rows))
    lines = [" ".join(["strategy".ljust(name_w)] +
                      [c.rjust(widths[c]) for c in cols])]
    for name, r in rows.items():
        lines.append(" ".join([name.ljust(name_w)] +
                              [_fmt(r.get(c)).rjust(widths[c]) for c in cols]))
    return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
