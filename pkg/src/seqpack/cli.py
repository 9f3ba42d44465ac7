"""Command-line pipeline: gen-data -> train -> rollout -> analyze, driven by
versioned JSON configs whose hash is embedded in every output file."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

from . import analysis, executor, finetune, simenv

CONFIG_FORMAT_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1 (argparse's default of 2 is reserved for runtime failures)
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit_(EXIT_CONFIG, f"{self.prog}: error: {message}")


class SystemExit_(Exception):
    def __init__(self, code, message=""):
        super().__init__(message)
        self.code = code
        self.message = message


def default_config(task: str) -> dict:
    if task not in ("salad", "candy"):
        raise ConfigError(f"unknown task family {task!r}; expected 'salad' or 'candy'")
    text = resources.files("seqpack.configs").joinpath(f"{task}.json").read_text("utf-8")
    return json.loads(text)


def load_config(path=None, task=None) -> dict:
    if path is not None:
        try:
            config = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if task is not None and task != config.get("task"):
            raise ConfigError(
                f"--task {task!r} conflicts with config task {config.get('task')!r}"
            )
    else:
        config = default_config(task or "salad")
    validate_config(config)
    return config


def validate_config(config: dict) -> None:
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    if config.get("format_version") != CONFIG_FORMAT_VERSION:
        raise ConfigError(
            f"config field 'format_version' must be {CONFIG_FORMAT_VERSION}, "
            f"got {config.get('format_version')!r}"
        )
    if config.get("task") not in ("salad", "candy"):
        raise ConfigError(f"config field 'task' must be 'salad' or 'candy', got {config.get('task')!r}")
    for section in ("data", "model", "train", "rollout", "analysis"):
        if not isinstance(config.get(section), dict):
            raise ConfigError(f"config field {section!r} must be an object")
    rollout = config["rollout"]
    if not 0.0 < float(rollout.get("stop_threshold", 0.2)) < 1.0:
        raise ConfigError("config field 'rollout.stop_threshold' must be in (0, 1)")
    for key in ("integration_steps", "subtask_budget", "transition_budget"):
        if int(rollout.get(key, 1)) < 1:
            raise ConfigError(f"config field 'rollout.{key}' must be positive")
    if float(config["train"].get("lam", 0.1)) < 0.0:
        raise ConfigError("config field 'train.lam' must be non-negative")


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def model_config_from(config: dict, plan: simenv.TaskPlan) -> finetune.ModelConfig:
    m = config["model"]
    return finetune.default_model_config(
        plan,
        chunk_len=int(m.get("chunk_len", 8)),
        embed_dim=int(m.get("embed_dim", 64)),
        feature_dim=int(m.get("feature_dim", 64)),
        encoder_hidden=tuple(m.get("encoder_hidden", (64, 64))),
        expert_hidden=tuple(m.get("expert_hidden", (64, 64))),
    )


def train_settings_from(config: dict) -> finetune.TrainSettings:
    t = config["train"]
    return finetune.TrainSettings(
        batch_size=int(t.get("batch_size", 64)),
        learning_rate=float(t.get("learning_rate", 1e-3)),
        lam=float(t.get("lam", 0.1)),
        joint_epochs=int(t.get("joint_epochs", 30)),
        action_epochs=int(t.get("action_epochs", 20)),
        completion_epochs=int(t.get("completion_epochs", 10)),
        baseline_epochs=int(t.get("baseline_epochs", 30)),
    )


def rollout_config_from(config: dict) -> executor.RolloutConfig:
    r = config["rollout"]
    return executor.RolloutConfig(
        stop_threshold=float(r.get("stop_threshold", 0.2)),
        integration_steps=int(r.get("integration_steps", 10)),
        subtask_budget=int(r.get("subtask_budget", 300)),
        transition_budget=int(r.get("transition_budget", 100)),
        consecutive_signals=int(r.get("consecutive_signals", 1)),
    )


def cmd_gen_data(args) -> int:
    config = load_config(args.config, args.task)
    h = config_hash(config)
    plan = simenv.get_plan(config["task"])
    data_cfg = config["data"]
    seed = int(args.seed if args.seed is not None else data_cfg.get("seed", 1234))
    noise = float(data_cfg.get("noise_scale", 0.005))
    if args.long_horizon:
        demos = int(args.demos or data_cfg.get("longhorizon_demos", 50))
        episodes, manifest = simenv.generate_longhorizon_dataset(plan, demos, seed, noise)
    else:
        demos = int(args.demos or data_cfg.get("demos_per_subtask", 50))
        episodes, manifest = simenv.generate_subtask_dataset(plan, demos, seed, noise)
    manifest["config_hash"] = h
    out = Path(args.out)
    simenv.write_dataset(out, episodes, manifest)
    print(
        f"wrote {len(episodes)} episodes to {out} "
        f"(plan={plan.name}, rejections={manifest['rejections']}, config_hash={h})"
    )
    for prompt_id, count in sorted(manifest["counts_per_prompt"].items()):
        print(f"  prompt {prompt_id} ({plan.prompt_text(int(prompt_id))}): {count} episodes")
    return EXIT_OK


def _parse_seeds(spec_str: str) -> list[int]:
    if "," in spec_str:
        return [int(s) for s in spec_str.split(",") if s.strip() != ""]
    return list(range(int(spec_str)))


def _train_worker(payload: tuple) -> dict:
    (strategy_name, seed, dataset_path, config, out_dir) = payload
    plan = simenv.get_plan(config["task"])
    episodes = simenv.read_dataset(dataset_path)
    settings = train_settings_from(config)
    mc = model_config_from(config, plan)
    _, report = finetune.train(
        finetune.strategy_config(strategy_name, settings),
        episodes,
        mc,
        settings,
        seed,
        out_dir=out_dir,
        task=config["task"],
        config_hash=config_hash(config),
    )
    return {
        "strategy": strategy_name,
        "seed": seed,
        "checkpoint": report.checkpoint_path,
        "report": str(Path(out_dir) / f"{strategy_name}_seed{seed}.report.json"),
    }


def cmd_train(args) -> int:
    config = load_config(args.config, args.task)
    strategy = args.strategy.upper()
    if strategy not in ("J", "JF", "S", "SF", "BASELINE", "ALL"):
        raise ConfigError(f"unknown strategy {args.strategy!r}")
    seeds = _parse_seeds(args.seeds)
    if not seeds:
        raise ConfigError("at least one seed required")
    wanted = list(finetune.STRATEGY_NAMES) if strategy == "ALL" else [strategy]
    jobs = []
    for seed in seeds:
        for name in wanted:
            if name == "BASELINE":
                if not args.long_dataset:
                    raise ConfigError("strategy BASELINE requires --long-dataset")
                dataset = args.long_dataset
            else:
                if not args.dataset:
                    raise ConfigError(f"strategy {name} requires --dataset")
                dataset = args.dataset
            if not Path(dataset).exists():
                raise ConfigError(f"dataset not found: {dataset}")
            jobs.append((name, seed, dataset, config, args.out))
    Path(args.out).mkdir(parents=True, exist_ok=True)
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            entries = list(pool.map(_train_worker, jobs))
    else:
        entries = [_train_worker(j) for j in jobs]
    manifest = {
        "format_version": 1,
        "task": config["task"],
        "seeds": seeds,
        "config_hash": config_hash(config),
        "subtask_dataset": args.dataset,
        "longhorizon_dataset": args.long_dataset,
        "entries": entries,
    }
    (Path(args.out) / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2), encoding="utf-8"
    )
    for e in entries:
        print(f"trained {e['strategy']} seed {e['seed']} -> {e['checkpoint']}")
    print(f"bundle manifest: {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


def cmd_rollout(args) -> int:
    config = load_config(args.config, args.task)
    h = config_hash(config)
    try:
        net, spec = finetune.load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    task = spec.get("task") or config["task"]
    plan = simenv.get_plan(task)
    cfg = rollout_config_from(config)
    runner = executor.PolicyRunner(net, cfg.integration_steps)
    open_loop = spec.get("strategy") == "BASELINE"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    base_seed = int(args.seed)
    for i in range(args.episodes):
        seed = base_seed + i
        if open_loop:
            record = executor.run_baseline_open_loop(runner, plan, cfg, seed)
        else:
            record = executor.run_long_horizon(runner, plan, cfg, seed)
        records.append(record)
        payload = record.to_json()
        payload["config_hash"] = h
        (out / f"record_{seed:05d}.json").write_text(
            json.dumps(payload, sort_keys=True), encoding="utf-8"
        )
    table = analysis.success_table(records, plan)
    table["config_hash"] = h
    table["policy_mode"] = records[0].policy_mode
    (out / "summary.json").write_text(json.dumps(table, sort_keys=True, indent=2), encoding="utf-8")
    print(
        f"{len(records)} rollouts ({records[0].policy_mode}) on {plan.name}: "
        f"overall={table['overall_success_rate']:.2f}, "
        f"mean_sequence_errors={table['mean_sequence_errors']:.2f}"
    )
    return EXIT_OK


def cmd_analyze(args) -> int:
    config = load_config(args.config, args.task)
    h = config_hash(config)
    bundle_dir = Path(args.bundle)
    manifest_path = bundle_dir / "manifest.json"
    missing = [str(p) for p in (manifest_path,) if not p.exists()]
    if missing:
        raise ConfigError(f"incomplete bundle, missing: {', '.join(missing)}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    plan = simenv.get_plan(manifest.get("task") or config["task"])
    episodes = simenv.read_dataset(args.replay_dataset)
    a_cfg = config["analysis"]
    per_subtask = int(a_cfg.get("replay_episodes_per_subtask", 8))
    stride = int(a_cfg.get("frame_stride", 1))
    replay_seed = int(a_cfg.get("replay_seed", 99))
    steps = int(config["rollout"].get("integration_steps", 10))
    chosen: list = []
    counts: dict[int, int] = {}
    for ep in episodes:
        if counts.get(ep.subtask_prompt_id, 0) < per_subtask:
            chosen.append(ep)
            counts[ep.subtask_prompt_id] = counts.get(ep.subtask_prompt_id, 0) + 1
    strategy_traces: dict[str, list] = {}
    missing_ckpts = [e["checkpoint"] for e in manifest["entries"] if not Path(e["checkpoint"]).exists()]
    if missing_ckpts:
        raise ConfigError(f"incomplete bundle, missing: {', '.join(missing_ckpts)}")
    for entry in manifest["entries"]:
        if entry["strategy"] == "BASELINE":
            continue  # no meaningful completion head to analyze
        net, _ = finetune.load_checkpoint(entry["checkpoint"])
        traces = analysis.collect_prediction_traces(net, chosen, steps, replay_seed, stride)
        strategy_traces.setdefault(entry["strategy"], []).extend(traces)
    report = analysis.compare_strategies(
        strategy_traces, plan, bins=int(a_cfg.get("bins", 10)), config_hash=h
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    analysis.write_metrics_report(out / "metrics.json", report)
    analysis.write_metrics_csv(out / "metrics.csv", report)
    print(f"metrics report: {out / 'metrics.json'}")
    for name, payload in sorted(report["strategies"].items()):
        overall = payload["overall"]
        ks = f", ks_d={overall['ks_d']:.3f}, ks_p={overall['ks_p']:.2e}" if "ks_d" in overall else ""
        print(f"  {name}: entropy={overall['entropy']:.3f}{ks}")
    if report["comparison"] is None:
        print("  comparison: absent (needs both J and S)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seqpack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate demonstration datasets")
    p.add_argument("--config", help="config JSON path (defaults per --task)")
    p.add_argument("--task", choices=("salad", "candy"), help="task family")
    p.add_argument("--demos", type=int, help="demos per subtask (or episodes with --long-horizon)")
    p.add_argument("--long-horizon", action="store_true", help="full-plan demos for the baseline")
    p.add_argument("--seed", type=int, help="dataset seed override")
    p.add_argument("--out", required=True, help="output dataset path (.jsonl)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one strategy or the full comparison bundle")
    p.add_argument("--config", help="config JSON path")
    p.add_argument("--task", choices=("salad", "candy"))
    p.add_argument("--strategy", required=True, help="J | JF | S | SF | baseline | all")
    p.add_argument("--dataset", help="subtask-level dataset (J/JF/S/SF)")
    p.add_argument("--long-dataset", help="long-horizon dataset (baseline)")
    p.add_argument("--seeds", default="1", help="seed count N (0..N-1) or comma list")
    p.add_argument("--jobs", type=int, default=1, help="parallel training workers")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="run evaluation rollouts from a checkpoint")
    p.add_argument("--config", help="config JSON path")
    p.add_argument("--task", choices=("salad", "candy"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0, help="base rollout seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("analyze", help="entropy/KS comparison over a training bundle")
    p.add_argument("--config", help="config JSON path")
    p.add_argument("--task", choices=("salad", "candy"))
    p.add_argument("--bundle", required=True, help="bundle directory from 'train --strategy all'")
    p.add_argument("--replay-dataset", required=True, help="held-out labelled dataset for replay")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit_ as exc:
        if exc.message:
            print(exc.message, file=sys.stderr)
        return exc.code
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit_ as exc:
        print(exc.message, file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
