"""PPO-clip and REINFORCE training on the observation MDP: rollout
collection, reward-to-go, GAE, clipped surrogate updates, value regression,
and online classifier fine-tuning at terminal states."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import envmdp
from . import nets
from . import numkernel as K
from . import slidegen


class TrainError(Exception):
    pass


class IncompleteEpisodeError(TrainError):
    pass


class InvalidBufferError(TrainError):
    pass


@dataclass
class PPOConfig:
    clip_epsilon: float = 0.2
    discount: float = 0.99
    gae_lambda: float = 0.95
    rollout_episodes: int = 16
    update_epochs: int = 4
    minibatch_size: int = 64
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    base_lr: float = 2.5e-4
    adam_epsilon: float = 1e-5
    grad_clip_norm: float = 0.5
    classifier_lr: float = 1e-3
    classifier_warmup_episodes: int = 320
    total_episodes: int = 4800
    joint_update: bool = True   # False restores strictly separate policy/value steps

    def validate(self):
        if not 0.0 < self.clip_epsilon < 1.0:
            raise TrainError("clip_epsilon outside (0,1)")
        for g in (self.discount, self.gae_lambda):
            if not 0.0 < g <= 1.0:
                raise TrainError("discount/gae_lambda outside (0,1]")


@dataclass
class Transition:
    policy_view: np.ndarray   # (N, 3d+2)
    legal: np.ndarray         # (N,) bool, mask at decision time
    value_input: np.ndarray   # (2d+1,)
    action: int
    log_prob: float
    reward: float
    value: float
    done: bool
    episode_id: int


@dataclass
class TerminalRecord:
    scan: np.ndarray
    observed: np.ndarray
    label: int
    prediction: float


@dataclass
class RolloutBuffer:
    transitions: list[Transition] = field(default_factory=list)
    terminals: list[TerminalRecord] = field(default_factory=list)
    returns: np.ndarray | None = None
    advantages: np.ndarray | None = None

    def __len__(self):
        return len(self.transitions)

    def episode_returns(self) -> np.ndarray:
        out, acc = [], 0.0
        for tr in self.transitions:
            acc += tr.reward
            if tr.done:
                out.append(acc)
                acc = 0.0
        return np.array(out)


def collect_rollouts(net_bundle: nets.NetworkBundle, slides, env_config,
                     count: int, rng: np.random.Generator) -> RolloutBuffer:
    """Sample ``count`` complete episodes with actions drawn from the masked
    policy distribution."""
    if not slides:
        raise TrainError("no slides to roll out on")
    buffer = RolloutBuffer()
    for ep in range(count):
        bundle = slides[int(rng.integers(len(slides)))]
        state = envmdp.reset(bundle, env_config)
        while not state.done:
            view = nets.build_policy_view(state.current_scan, state.observed,
                                          state.t, state.T)
            legal = envmdp.legal_action_mask(state)
            logits = nets.policy_logits_from_view(net_bundle, view)
            probs = K.masked_softmax(logits, legal)
            action = int(rng.choice(state.N, p=probs))
            vin = nets.build_value_input(state.current_scan, state.t, state.T)
            value = float(nets.value_from_input(net_bundle, vin))
            result = envmdp.step(state, action, net_bundle)
            buffer.transitions.append(Transition(
                policy_view=view, legal=legal, value_input=vin,
                action=action, log_prob=float(np.log(probs[action])),
                reward=result.reward, value=value, done=result.done,
                episode_id=ep))
            if result.done:
                buffer.terminals.append(TerminalRecord(
                    scan=state.current_scan.copy(),
                    observed=state.observed.copy(),
                    label=bundle.label,
                    prediction=result.info["prediction"]))
    return buffer


def _episode_slices(buffer: RolloutBuffer):
    slices, start = [], 0
    for i, tr in enumerate(buffer.transitions):
        if tr.done:
            slices.append((start, i + 1))
            start = i + 1
    if start != len(buffer.transitions):
        raise IncompleteEpisodeError("buffer ends mid-episode")
    return slices


def reward_to_go(buffer: RolloutBuffer, discount: float) -> np.ndarray:
    rewards = np.array([t.reward for t in buffer.transitions], dtype=np.float64)
    out = np.zeros_like(rewards)
    for lo, hi in _episode_slices(buffer):
        acc = 0.0
        for i in range(hi - 1, lo - 1, -1):
            acc = rewards[i] + discount * acc
            out[i] = acc
    buffer.returns = out
    return out


def compute_gae(buffer: RolloutBuffer, discount: float, lam: float) -> np.ndarray:
    if not buffer.transitions:
        raise InvalidBufferError("empty buffer")
    values = np.array([t.value for t in buffer.transitions], dtype=np.float64)
    rewards = np.array([t.reward for t in buffer.transitions], dtype=np.float64)
    adv = np.zeros_like(values)
    for lo, hi in _episode_slices(buffer):
        last = 0.0
        for i in range(hi - 1, lo - 1, -1):
            next_value = values[i + 1] if i + 1 < hi else 0.0  # bootstrap 0 at done
            delta = rewards[i] + discount * next_value - values[i]
            last = delta + discount * lam * last
            adv[i] = last
    buffer.advantages = adv
    return adv


def _sum_terms(tape, terms):
    total = terms[0]
    for t in terms[1:]:
        total = K.add(tape, total, t)
    return total


def _policy_value_loss(net_bundle, batch, config, old_logps, advs, returns,
                       want_value: bool = True):
    """Build the joint PPO minibatch loss on one tape. Returns
    (tape, loss, stats)."""
    tape = K.Tape()
    policy_terms, entropy_terms, value_terms = [], [], []
    clipped_count = 0
    lo_c, hi_c = 1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon
    for tr, old_lp, adv, ret in zip(batch, old_logps, advs, returns):
        logits = nets.policy_logits_from_view(net_bundle, tr.policy_view, tape=tape)
        logp_vec = K.masked_log_softmax(tape, logits, tr.legal)
        lp = K.pick(tape, logp_vec, tr.action)
        ratio = K.exp(tape, K.add(tape, lp, -old_lp))
        surr1 = K.scale(tape, ratio, float(adv))
        surr2 = K.scale(tape, K.clip(tape, ratio, lo_c, hi_c), float(adv))
        policy_terms.append(K.neg(tape, K.minimum(tape, surr1, surr2)))
        r = float(ratio.value)
        if abs(r - 1.0) > config.clip_epsilon:
            clipped_count += 1
        p = K.exp(tape, logp_vec)
        entropy_terms.append(K.neg(tape, K.reduce_sum(tape, K.mul(tape, p, logp_vec))))
        if want_value:
            v = nets.value_from_input(net_bundle, tr.value_input, tape=tape)
            err = K.add(tape, v, -float(ret))
            value_terms.append(K.mul(tape, err, err))
    B = len(batch)
    policy_loss = K.scale(tape, _sum_terms(tape, policy_terms), 1.0 / B)
    entropy = K.scale(tape, _sum_terms(tape, entropy_terms), 1.0 / B)
    loss = K.add(tape, policy_loss, K.scale(tape, entropy, -config.entropy_coef))
    stats = {
        "policy_loss": float(policy_loss.value),
        "entropy": float(entropy.value),
        "clip_fraction": clipped_count / B,
    }
    if want_value:
        value_loss = K.scale(tape, _sum_terms(tape, value_terms), 1.0 / B)
        stats["value_loss"] = float(value_loss.value)
        loss = K.add(tape, loss, K.scale(tape, value_loss, config.value_coef))
    if not np.isfinite(float(loss.value)):
        raise K.NumericError(f"non-finite PPO loss: {stats}")
    return tape, loss, stats


def _normalized(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_update(net_bundle: nets.NetworkBundle, buffer: RolloutBuffer,
               config: PPOConfig, adam: dict[str, K.AdamState],
               rng: np.random.Generator, lr_scale: float = 1.0) -> dict:
    if buffer.advantages is None or buffer.returns is None:
        raise InvalidBufferError("advantages/returns not computed")
    n = len(buffer)
    idx_all = np.arange(n)
    old_logps = np.array([t.log_prob for t in buffer.transitions])
    stats_acc: dict[str, list] = {}
    params_joint = net_bundle.subset("policy", "value")
    params_policy = net_bundle.subset("policy")
    params_value = net_bundle.subset("value")
    for _epoch in range(config.update_epochs):
        order = rng.permutation(idx_all)
        for lo in range(0, n, config.minibatch_size):
            sel = order[lo:lo + config.minibatch_size]
            batch = [buffer.transitions[i] for i in sel]
            advs = _normalized(buffer.advantages[sel]) if len(sel) > 1 \
                else buffer.advantages[sel]
            rets = buffer.returns[sel]
            if config.joint_update:
                tape, loss, stats = _policy_value_loss(
                    net_bundle, batch, config, old_logps[sel], advs, rets)
                grads = K.backward(tape, loss)
                grads = K.global_norm_clip(grads, config.grad_clip_norm)
                K.adam_step(params_joint, grads, adam["joint"], lr_scale=lr_scale)
            else:
                tape, loss, stats = _policy_value_loss(
                    net_bundle, batch, config, old_logps[sel], advs, rets,
                    want_value=False)
                grads = K.global_norm_clip(K.backward(tape, loss),
                                           config.grad_clip_norm)
                K.adam_step(params_policy, grads, adam["policy"], lr_scale=lr_scale)
                tape_v = K.Tape()
                terms = []
                for tr, ret in zip(batch, rets):
                    v = nets.value_from_input(net_bundle, tr.value_input, tape=tape_v)
                    err = K.add(tape_v, v, -float(ret))
                    terms.append(K.mul(tape_v, err, err))
                vloss = K.scale(tape_v, _sum_terms(tape_v, terms), 1.0 / len(batch))
                stats["value_loss"] = float(vloss.value)
                grads_v = K.global_norm_clip(K.backward(tape_v, vloss),
                                             config.grad_clip_norm)
                K.adam_step(params_value, grads_v, adam["value"], lr_scale=lr_scale)
            for k, v in stats.items():
                stats_acc.setdefault(k, []).append(v)
    return {k: float(np.mean(v)) for k, v in stats_acc.items()}


def reinforce_update(net_bundle: nets.NetworkBundle, buffer: RolloutBuffer,
                     config: PPOConfig, adam: dict[str, K.AdamState],
                     rng: np.random.Generator, lr_scale: float = 1.0) -> dict:
    """Classic policy gradient with a batch-mean return baseline; one pass."""
    if buffer.returns is None:
        raise InvalidBufferError("returns not computed")
    n = len(buffer)
    baseline = float(buffer.returns.mean())
    order = rng.permutation(n)
    params_policy = net_bundle.subset("policy")
    stats_acc: dict[str, list] = {}
    for lo in range(0, n, config.minibatch_size):
        sel = order[lo:lo + config.minibatch_size]
        tape = K.Tape()
        terms = []
        for i in sel:
            tr = buffer.transitions[i]
            logits = nets.policy_logits_from_view(net_bundle, tr.policy_view,
                                                  tape=tape)
            logp_vec = K.masked_log_softmax(tape, logits, tr.legal)
            lp = K.pick(tape, logp_vec, tr.action)
            terms.append(K.scale(tape, lp, -(buffer.returns[i] - baseline)))
        loss = K.scale(tape, _sum_terms(tape, terms), 1.0 / len(sel))
        if not np.isfinite(float(loss.value)):
            raise K.NumericError("non-finite REINFORCE loss")
        grads = K.global_norm_clip(K.backward(tape, loss), config.grad_clip_norm)
        K.adam_step(params_policy, grads, adam["policy"], lr_scale=lr_scale)
        stats_acc.setdefault("policy_loss", []).append(float(loss.value))
    return {k: float(np.mean(v)) for k, v in stats_acc.items()}


def finetune_classifier(net_bundle: nets.NetworkBundle, buffer: RolloutBuffer,
                        adam: K.AdamState, obs_mode: str = "full"):
    """One cross-entropy step per terminal state, on the updated feature map
    the classifier actually saw."""
    params = net_bundle.subset("clf")
    for rec in buffer.terminals:
        tape = K.Tape()
        logit = nets.classifier_logit(net_bundle, rec.scan, rec.observed,
                                      tape=tape, obs_mode=obs_mode)
        loss = K.bce_with_logit(tape, logit, rec.label)
        grads = K.backward(tape, loss)
        K.adam_step(params, grads, adam)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainReport:
    algorithm: str = "ppo"
    iterations: list[dict] = field(default_factory=list)
    eval_points: list[dict] = field(default_factory=list)  # iteration, episodes, auc
    auc_threshold: float | None = None
    episodes_to_threshold: int | None = None

    def write_jsonl(self, path: str):
        with open(path, "w") as f:
            for rec in self.iterations:
                f.write(json.dumps(rec) + "\n")


def greedy_predictions(net_bundle, slides, env_config):
    """Deterministic evaluation episodes: argmax over masked logits."""
    scores = []
    for bundle in slides:
        state = envmdp.reset(bundle, env_config)
        while not state.done:
            legal = envmdp.legal_action_mask(state)
            logits = nets.policy_logits(net_bundle, state)
            masked = K.apply_mask(np.asarray(logits), legal)
            result = envmdp.step(state, int(np.argmax(masked)), net_bundle)
        scores.append((result.info["prediction"], bundle.label))
    return scores


def _heldout_auc(net_bundle, slides, env_config) -> float:
    from .evalharness import compute_auc
    return compute_auc(greedy_predictions(net_bundle, slides, env_config))


def make_adam_states(config: PPOConfig) -> dict[str, K.AdamState]:
    mk = lambda lr: K.AdamState(learning_rate=lr, epsilon=config.adam_epsilon)
    return {"joint": mk(config.base_lr), "policy": mk(config.base_lr),
            "value": mk(config.base_lr),
            "clf": K.AdamState(learning_rate=config.classifier_lr)}


@dataclass
class TrainState:
    iteration: int = 0
    episodes_seen: int = 0
    adam: dict[str, K.AdamState] = field(default_factory=dict)
    rng: np.random.Generator | None = None


def save_train_state(dir_path: str, net_bundle: nets.NetworkBundle,
                     state: TrainState):
    os.makedirs(dir_path, exist_ok=True)
    nets.save_bundle(net_bundle, os.path.join(dir_path, "nets.rlgn"))
    arrays = {}
    meta = {"iteration": state.iteration, "episodes_seen": state.episodes_seen,
            "rng_state": state.rng.bit_generator.state, "adam": {}}
    for key, st in state.adam.items():
        meta["adam"][key] = {"learning_rate": st.learning_rate,
                             "epsilon": st.epsilon, "beta1": st.beta1,
                             "beta2": st.beta2, "step_count": st.step_count,
                             "names": sorted(st.m)}
        for name in st.m:
            arrays[f"{key}|m|{name}"] = st.m[name]
            arrays[f"{key}|v|{name}"] = st.v[name]
    np.savez(os.path.join(dir_path, "adam.npz"), **arrays)
    with open(os.path.join(dir_path, "train_state.json"), "w") as f:
        json.dump(meta, f)


def load_train_state(dir_path: str):
    net_bundle = nets.load_bundle(os.path.join(dir_path, "nets.rlgn"))
    with open(os.path.join(dir_path, "train_state.json")) as f:
        meta = json.load(f)
    arrays = np.load(os.path.join(dir_path, "adam.npz"))
    adam = {}
    for key, spec in meta["adam"].items():
        st = K.AdamState(learning_rate=spec["learning_rate"],
                         epsilon=spec["epsilon"], beta1=spec["beta1"],
                         beta2=spec["beta2"], step_count=spec["step_count"])
        for name in spec["names"]:
            st.m[name] = arrays[f"{key}|m|{name}"].copy()
            st.v[name] = arrays[f"{key}|v|{name}"].copy()
        adam[key] = st
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    state = TrainState(iteration=meta["iteration"],
                       episodes_seen=meta["episodes_seen"], adam=adam, rng=rng)
    return net_bundle, state


def train(config: PPOConfig, train_slides, heldout_slides,
          env_config: envmdp.EnvConfig, net_bundle: nets.NetworkBundle,
          algorithm: str = "ppo", seed: int = 0, eval_every: int = 10,
          auc_threshold: float | None = None, report_path: str | None = None,
          checkpoint_dir: str | None = None,
          resume_state: TrainState | None = None,
          stop_at_threshold: bool = False) -> TrainReport:
    """Outer loop: collect -> returns/GAE -> update -> classifier fine-tune,
    with periodic held-out greedy evaluation."""
    config.validate()
    if algorithm not in ("ppo", "reinforce"):
        raise TrainError(f"unknown algorithm {algorithm!r}")
    if isinstance(train_slides, slidegen.DatasetManifest):
        train_slides = slidegen.load_bundles(train_slides)
    if isinstance(heldout_slides, slidegen.DatasetManifest):
        heldout_slides = slidegen.load_bundles(heldout_slides)

    if resume_state is not None:
        state = resume_state
    else:
        state = TrainState(adam=make_adam_states(config),
                           rng=np.random.default_rng(seed))
    report = TrainReport(algorithm=algorithm, auc_threshold=auc_threshold)
    total_iters = config.total_episodes // config.rollout_episodes

    def evaluate(iteration):
        if not heldout_slides:
            return None
        auc = _heldout_auc(net_bundle, heldout_slides, env_config)
        report.eval_points.append({"iteration": iteration,
                                   "episodes": state.episodes_seen, "auc": auc})
        if (auc_threshold is not None and report.episodes_to_threshold is None
                and auc >= auc_threshold):
            report.episodes_to_threshold = state.episodes_seen
        return auc

    if resume_state is None and config.classifier_warmup_episodes > 0:
        # adapt the classifier to post-observation feature maps before any
        # policy update, so early rewards are informative
        warmup_iters = max(1, config.classifier_warmup_episodes
                           // config.rollout_episodes)
        for _ in range(warmup_iters):
            buffer = collect_rollouts(net_bundle, train_slides, env_config,
                                      config.rollout_episodes, state.rng)
            finetune_classifier(net_bundle, buffer, state.adam["clf"],
                                obs_mode=env_config.classifier_obs_mode)

    evaluate(state.iteration)  # cold-start evaluation
    while state.iteration < total_iters:
        progress = state.iteration / max(1, total_iters)
        lr_scale = max(0.0, 1.0 - progress)
        buffer = collect_rollouts(net_bundle, train_slides, env_config,
                                  config.rollout_episodes, state.rng)
        reward_to_go(buffer, config.discount)
        compute_gae(buffer, config.discount, config.gae_lambda)
        if algorithm == "ppo":
            stats = ppo_update(net_bundle, buffer, config, state.adam,
                               state.rng, lr_scale=lr_scale)
        else:
            stats = reinforce_update(net_bundle, buffer, config, state.adam,
                                     state.rng, lr_scale=lr_scale)
        finetune_classifier(net_bundle, buffer, state.adam["clf"],
                            obs_mode=env_config.classifier_obs_mode)
        state.iteration += 1
        state.episodes_seen += config.rollout_episodes
        rec = {"iteration": state.iteration, "episodes": state.episodes_seen,
               "mean_return": float(buffer.episode_returns().mean()),
               "lr": config.base_lr * lr_scale, **stats}
        if eval_every and state.iteration % eval_every == 0:
            auc = evaluate(state.iteration)
            if auc is not None:
                rec["heldout_auc"] = auc
        report.iterations.append(rec)
        if (stop_at_threshold and report.episodes_to_threshold is not None):
            break
    if report.eval_points and report.eval_points[-1]["iteration"] != state.iteration:
        evaluate(state.iteration)
    if checkpoint_dir is not None:
        save_train_state(checkpoint_dir, net_bundle, state)
    if report_path is not None:
        report.write_jsonl(report_path)
    return report
