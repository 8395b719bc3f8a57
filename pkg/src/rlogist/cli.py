"""Command-line entry point: dataset generation, pretraining, RL training,
evaluation, strategy comparison, updater ablation, and episode tracing."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from . import envmdp
from . import evalharness
from . import nets
from . import slidegen

log = logging.getLogger("rlogist")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration plumbing


DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "algo": "ppo",
    "budget": 0.2,
    "variant": "local_and_global",
    "count": 400,
    "split": 0.667,
    "epochs": 0,            # 0 = per-operation default
    "episodes": 0,          # 0 = trainer default
    "strategy": "learned",
    "slide": 0,
}


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults <- JSON config file (flat dotted keys) <- explicit flags."""
    merged = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                file_cfg = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config file {args.config}: {e}")
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        for key, value in file_cfg.items():
            leaf = key.split(".")[-1]
            merged[key] = value
            if leaf in merged:
                merged[leaf] = value
                log.info("config file sets %s=%r", key, value)
    for key in DEFAULTS:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            if key in merged and merged[key] != flag_value:
                log.info("flag overrides %s=%r", key, flag_value)
            merged[key] = flag_value
    return merged


def write_provenance(out_dir: str, command: str, cfg: dict, extra: dict | None = None):
    os.makedirs(out_dir, exist_ok=True)
    record = {"tool_version": __version__, "command": command,
              "seed": cfg.get("seed"), "config": cfg}
    if extra:
        record.update(extra)
    with open(os.path.join(out_dir, "run_config.json"), "w") as f:
        json.dump(record, f, indent=1, sort_keys=True)


def _gen_config(cfg: dict) -> slidegen.GenConfig:
    gen = slidegen.GenConfig(seed=int(cfg["seed"]))
    for f in dataclasses.fields(slidegen.GenConfig):
        key = f"generator.{f.name}"
        if key in cfg:
            value = cfg[key]
            if isinstance(getattr(gen, f.name), tuple):
                value = tuple(value)
            setattr(gen, f.name, type(getattr(gen, f.name))(value)
                    if not isinstance(value, tuple) else value)
    return gen


def _env_config(cfg: dict) -> envmdp.EnvConfig:
    env = envmdp.EnvConfig(budget_fraction=float(cfg["budget"]),
                           updater_variant=str(cfg["variant"]))
    try:
        env.validate()
    except envmdp.EnvError as e:
        raise UsageError(str(e))
    return env


def _load_nets(cfg: dict, checkpoint: str | None) -> nets.NetworkBundle:
    if not checkpoint:
        raise UsageError("--checkpoint is required for this subcommand")
    return nets.load_bundle(checkpoint)


def _write_json(out_dir: str, name: str, payload: dict):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
    log.info("wrote %s", path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    if not args.out:
        raise UsageError("generate requires --out")
    gen = _gen_config(cfg)
    write_provenance(args.out, "generate", cfg,
                     extra={"generator": dataclasses.asdict(gen)})
    manifests = slidegen.generate_dataset(gen, count=int(cfg["count"]),
                                          split_ratio=float(cfg["split"]),
                                          out_dir=args.out,
                                          workers=int(cfg["workers"]))
    calib = slidegen.calibrate(gen)
    _write_json(args.out, "calibration.json", dataclasses.asdict(calib))
    log.info("generated %d slides; oracle AUC high=%.3f scan=%.3f",
             int(cfg["count"]), calib.oracle_auc_high, calib.oracle_auc_scan)
    return 0


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    if not args.out or not args.manifest:
        raise UsageError("pretrain requires --out and --manifest")
    write_provenance(args.out, "pretrain", cfg)
    manifest = slidegen.load_manifest(args.manifest)
    seed = int(cfg["seed"])
    epochs = int(cfg["epochs"])
    bundle, clf_report = nets.pretrain_classifier(
        manifest, seed=seed, **({"epochs": epochs} if epochs else {}))
    bundle, upd_report = nets.pretrain_updaters(manifest, seed=seed, bundle=bundle)
    nets.save_bundle(bundle, os.path.join(args.out, "pretrained.rlgn"))
    _write_json(args.out, "pretrain_report.json", {
        "classifier_heldout_auc": clf_report.heldout_auc,
        "local_rel_l2": upd_report.local_rel_l2,
        "global_mse": upd_report.global_mse,
        "identity_mse": upd_report.identity_mse,
    })
    return 0


def cmd_train(args) -> int:
    from . import rltrain

    cfg = resolve_config(args)
    if not args.out or not args.manifest:
        raise UsageError("train requires --out and --manifest")
    if cfg["algo"] not in ("ppo", "reinforce"):
        raise UsageError(f"unknown --algo {cfg['algo']!r}")
    env_cfg = _env_config(cfg)
    write_provenance(args.out, "train", cfg)
    net_bundle = _load_nets(cfg, args.checkpoint)
    train_man = slidegen.load_manifest(args.manifest)
    heldout = slidegen.load_manifest(args.heldout) if args.heldout else []
    ppo_cfg = rltrain.PPOConfig()
    if int(cfg["episodes"]):
        ppo_cfg.total_episodes = int(cfg["episodes"])
    report = rltrain.train(ppo_cfg, train_man, heldout, env_cfg, net_bundle,
                           algorithm=str(cfg["algo"]), seed=int(cfg["seed"]),
                           report_path=os.path.join(args.out, "train_log.jsonl"),
                           checkpoint_dir=os.path.join(args.out, "checkpoint"))
    nets.save_bundle(net_bundle, os.path.join(args.out, "trained.rlgn"))
    _write_json(args.out, "train_report.json", {
        "algorithm": report.algorithm,
        "eval_points": report.eval_points,
        "episodes_to_threshold": report.episodes_to_threshold,
    })
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    if not args.out or not args.manifest:
        raise UsageError("eval requires --out and --manifest")
    env_cfg = _env_config(cfg)
    write_provenance(args.out, "eval", cfg)
    net_bundle = _load_nets(cfg, args.checkpoint)
    manifest = slidegen.load_manifest(args.manifest)
    spec = evalharness.StrategySpec(kind=str(cfg["strategy"]), seed=int(cfg["seed"]))
    spec.validate()
    report = evalharness.evaluate_strategy(spec, manifest, net_bundle, env_cfg)
    _write_json(args.out, "metrics.json", report.to_json())
    print(evalharness.format_table({spec.kind: report.to_json()}))
    return 0


def cmd_compare(args) -> int:
    cfg = resolve_config(args)
    if not args.out or not args.manifest:
        raise UsageError("compare requires --out and --manifest")
    env_cfg = _env_config(cfg)
    write_provenance(args.out, "compare", cfg)
    net_bundle = _load_nets(cfg, args.checkpoint)
    manifest = slidegen.load_manifest(args.manifest)
    seed = int(cfg["seed"])
    strategies = [evalharness.StrategySpec(kind=k, seed=seed)
                  for k in ("learned", "random", "full_observation")]
    result = evalharness.compare_strategies(manifest, net_bundle, env_cfg, strategies)
    _write_json(args.out, "comparison.json", result)
    print(evalharness.format_table(result["strategies"]))
    return 0


def cmd_ablate(args) -> int:
    from . import rltrain

    cfg = resolve_config(args)
    if not args.out or not args.manifest or not args.heldout:
        raise UsageError("ablate requires --out, --manifest (train), "
                         "and --heldout (test)")
    env_cfg = _env_config(cfg)
    write_provenance(args.out, "ablate", cfg)
    pretrained = _load_nets(cfg, args.checkpoint)
    ppo_cfg = rltrain.PPOConfig()
    if int(cfg["episodes"]):
        ppo_cfg.total_episodes = int(cfg["episodes"])
    result = evalharness.ablate_updaters(
        slidegen.load_manifest(args.manifest),
        slidegen.load_manifest(args.heldout),
        env_cfg, pretrained, ppo_config=ppo_cfg, seed=int(cfg["seed"]))
    _write_json(args.out, "ablation.json", result)
    print(evalharness.format_table(result["variants"]))
    return 0


def cmd_trace(args) -> int:
    cfg = resolve_config(args)
    if not args.out or not args.manifest:
        raise UsageError("trace requires --out and --manifest")
    env_cfg = _env_config(cfg)
    write_provenance(args.out, "trace", cfg)
    net_bundle = _load_nets(cfg, args.checkpoint)
    slides = slidegen.load_bundles(slidegen.load_manifest(args.manifest))
    idx = int(cfg["slide"])
    if not 0 <= idx < len(slides):
        raise UsageError(f"--slide {idx} outside dataset of {len(slides)} slides")
    spec = evalharness.StrategySpec(kind=str(cfg["strategy"]), seed=int(cfg["seed"]))
    trace = evalharness.run_episode_trace(spec, slides[idx], net_bundle, env_cfg)
    evalharness.write_trace_json(trace, os.path.join(args.out, "trace.json"))
    evalharness.write_trace_ppm(trace, slides[idx].N,
                                os.path.join(args.out, "trace.pgm"))
    log.info("traced slide %s: prediction %.3f label %d",
             trace.slide_id, trace.prediction, trace.label)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="rlogist",
                     description="Fast-observation slide screening workflows")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command")

    def add(name, func, **extra_flags):
        p = sub.add_parser(name)
        p.set_defaults(func=func)
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--config")
        p.add_argument("--workers", type=int)
        p.add_argument("--algo", choices=("ppo", "reinforce"))
        p.add_argument("--budget", type=float)
        p.add_argument("--variant", choices=envmdp.UPDATER_VARIANTS)
        p.add_argument("--checkpoint")
        p.add_argument("--manifest")
        for flag, kw in extra_flags.items():
            p.add_argument(flag, **kw)
        return p

    add("generate", cmd_generate,
        **{"--count": {"type": int}, "--split": {"type": float}})
    add("pretrain", cmd_pretrain, **{"--epochs": {"type": int}})
    add("train", cmd_train,
        **{"--heldout": {}, "--episodes": {"type": int}})
    add("eval", cmd_eval,
        **{"--strategy": {"choices": ("learned", "random", "full_observation")}})
    add("compare", cmd_compare)
    add("ablate", cmd_ablate,
        **{"--heldout": {}, "--episodes": {"type": int}})
    add("trace", cmd_trace,
        **{"--slide": {"type": int},
           "--strategy": {"choices": ("learned", "random", "full_observation")}})
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("RLOGIST_LOG", "error"))
    logging.basicConfig(level=level or logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return 1
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure inside a subcommand
        log.debug("runtime error", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
