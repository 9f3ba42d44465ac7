"""Finetuning strategies: joint (J), joint-frozen (JF), sequential (S),
sequential-frozen (SF), and the monolithic action-only baseline, all as
freeze-mask + loss-gating phase schedules over one training loop."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import make_optimizer, make_rng, optimizer_step, save_params, set_freeze_mask
from .model import (
    ModelConfig,
    ObsLayout,
    PolicyNet,
    draw_flow_batch,
    init_policy,
    normalize_actions,
    training_loss,
)
from .simenv import ACTION_DIM, CONTAINER_POSITION, Episode, MAX_STEP, TaskPlan

STRATEGY_NAMES = ("J", "JF", "S", "SF", "BASELINE")

# Default per-channel normalization: velocities to [-1, 1], grip 0/1 to -1/+1.
ACTION_OFFSET = (0.0, 0.0, 0.5, 0.0, 0.0, 0.5)
ACTION_SCALE = (1.0 / MAX_STEP, 1.0 / MAX_STEP, 2.0, 1.0 / MAX_STEP, 1.0 / MAX_STEP, 2.0)

BACKBONE_MASK = ("encoder.*",)
TRUNK_MASK = ("encoder.*", "expert.*", "flow_head.*")
COMPLETION_MASK = ("completion_head.*",)


@dataclass(frozen=True)
class PhaseSpec:
    epochs: int
    freeze: tuple[str, ...]
    losses: frozenset  # subset of {"action", "completion"}


@dataclass(frozen=True)
class StrategyConfig:
    name: str
    phases: tuple[PhaseSpec, ...]
    lam: float = 0.1


@dataclass
class TrainSettings:
    batch_size: int = 64
    learning_rate: float = 1e-3
    lam: float = 0.1
    joint_epochs: int = 30
    action_epochs: int = 20
    completion_epochs: int = 10
    baseline_epochs: int = 30


def strategy_config(name: str, settings: TrainSettings | None = None) -> StrategyConfig:
    """The exact mask/loss schedule for each finetuning regime."""
    settings = settings or TrainSettings()
    both = frozenset({"action", "completion"})
    action_only = frozenset({"action"})
    completion_only = frozenset({"completion"})
    if name == "J":
        phases = (PhaseSpec(settings.joint_epochs, (), both),)
    elif name == "JF":
        phases = (PhaseSpec(settings.joint_epochs, BACKBONE_MASK, both),)
    elif name == "S":
        phases = (
            PhaseSpec(settings.action_epochs, COMPLETION_MASK, action_only),
            PhaseSpec(settings.completion_epochs, TRUNK_MASK, completion_only),
        )
    elif name == "SF":
        phases = (
            PhaseSpec(settings.action_epochs, BACKBONE_MASK + COMPLETION_MASK, action_only),
            PhaseSpec(settings.completion_epochs, TRUNK_MASK, completion_only),
        )
    elif name == "BASELINE":
        phases = (PhaseSpec(settings.baseline_epochs, COMPLETION_MASK, action_only),)
    else:
        raise ValueError(f"unknown strategy {name!r}; expected one of {STRATEGY_NAMES}")
    return StrategyConfig(name=name, phases=phases, lam=settings.lam)


def build_phase_masks(strategy: StrategyConfig) -> list[tuple[tuple[str, ...], frozenset]]:
    if strategy.name not in STRATEGY_NAMES:
        raise ValueError(f"unknown strategy {strategy.name!r}; expected one of {STRATEGY_NAMES}")
    return [(phase.freeze, phase.losses) for phase in strategy.phases]


def default_model_config(plan: TaskPlan, **overrides) -> ModelConfig:
    fields = dict(
        state_dim=plan.state_dim,
        prompt_dim=plan.prompt_dim,
        action_dim=ACTION_DIM,
        action_offset=ACTION_OFFSET,
        action_scale=ACTION_SCALE,
        obs_layout=ObsLayout(len(plan.item_kinds), CONTAINER_POSITION),
    )
    fields.update(overrides)
    return ModelConfig(**fields)


@dataclass
class TrainingArrays:
    contexts: np.ndarray  # (n, context_dim)
    chunks: np.ndarray  # (n, chunk_size), normalized
    labels: np.ndarray | None  # (n,)


def build_training_arrays(
    episodes: list[Episode], config: ModelConfig, with_labels: bool = True
) -> TrainingArrays:
    """Flatten episodes to per-frame (context, future action chunk, label)
    samples; chunks past the episode end are padded with the final action."""
    contexts, chunks, labels = [], [], []
    h = config.chunk_len
    for ep in episodes:
        obs = np.stack([fr.observation for fr in ep.frames])
        acts = np.stack([fr.action for fr in ep.frames])
        if obs.shape[1] != config.context_dim:
            raise ValueError(
                f"episode observation width {obs.shape[1]} does not match "
                f"model context width {config.context_dim}"
            )
        padded = np.concatenate([acts, np.repeat(acts[-1:], h - 1, axis=0)], axis=0)
        n = len(ep.frames)
        windows = np.stack([padded[t : t + h].ravel() for t in range(n)])
        contexts.append(obs)
        chunks.append(normalize_actions(config, windows))
        if with_labels:
            labels.append(np.array([fr.label for fr in ep.frames], dtype=np.float64))
    return TrainingArrays(
        np.concatenate(contexts),
        np.concatenate(chunks),
        np.concatenate(labels) if with_labels else None,
    )


@dataclass
class TrainReport:
    strategy: str
    seed: int
    epochs_per_phase: list
    action_curve: list
    completion_curve: list
    total_curve: list
    checkpoint_path: str
    wall_clock_s: float
    config_hash: str

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "epochs_per_phase": self.epochs_per_phase,
            "curves": {
                "action": self.action_curve,
                "completion": self.completion_curve,
                "total": self.total_curve,
            },
            "checkpoint_path": self.checkpoint_path,
            "wall_clock_s": self.wall_clock_s,
            "config_hash": self.config_hash,
        }


def train(
    strategy: StrategyConfig,
    episodes: list[Episode],
    model_config: ModelConfig,
    settings: TrainSettings,
    seed: int,
    out_dir=None,
    task: str = "",
    config_hash: str = "",
) -> tuple[PolicyNet, TrainReport]:
    """Run the strategy's phases in order over the dataset.

    Disabled loss terms are recorded as 0.0 in the curves. The baseline never
    materializes the label array at all.
    """
    if not episodes:
        raise ValueError("empty dataset")
    uses_completion = any("completion" in ph.losses for ph in strategy.phases)
    arrays = build_training_arrays(episodes, model_config, with_labels=uses_completion)
    rng = make_rng(seed)
    net = init_policy(model_config, rng)
    opt = make_optimizer(net.params, learning_rate=settings.learning_rate)
    start = time.perf_counter()
    n = arrays.contexts.shape[0]
    action_curve: list[float] = []
    completion_curve: list[float] = []
    total_curve: list[float] = []
    for phase_idx, phase in enumerate(strategy.phases):
        set_freeze_mask(net.params, phase.freeze)
        include_action = "action" in phase.losses
        include_completion = "completion" in phase.losses
        for epoch in range(phase.epochs):
            order = rng.permutation(n)
            sums = np.zeros(3)
            batches = 0
            for lo in range(0, n, settings.batch_size):
                idx = order[lo : lo + settings.batch_size]
                batch = draw_flow_batch(
                    arrays.contexts[idx],
                    arrays.chunks[idx],
                    None if arrays.labels is None else arrays.labels[idx],
                    rng,
                )
                losses = training_loss(
                    net,
                    batch,
                    lam=strategy.lam,
                    include_action=include_action,
                    include_completion=include_completion,
                )
                if not np.isfinite(losses.total):
                    raise RuntimeError(
                        f"non-finite loss (strategy {strategy.name}, phase {phase_idx}, "
                        f"epoch {epoch}, batch at {lo})"
                    )
                optimizer_step(net.params, opt)
                sums += (losses.total, losses.action, losses.completion)
                batches += 1
            total_curve.append(sums[0] / batches)
            action_curve.append(sums[1] / batches)
            completion_curve.append(sums[2] / batches)
    wall = time.perf_counter() - start
    checkpoint_path = ""
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_path = str(out_dir / f"{strategy.name}_seed{seed}.ckpt.json")
        save_checkpoint(net, checkpoint_path, strategy.name, task, seed, config_hash)
    report = TrainReport(
        strategy=strategy.name,
        seed=seed,
        epochs_per_phase=[ph.epochs for ph in strategy.phases],
        action_curve=action_curve,
        completion_curve=completion_curve,
        total_curve=total_curve,
        checkpoint_path=checkpoint_path,
        wall_clock_s=wall,
        config_hash=config_hash,
    )
    if out_dir is not None:
        report_path = Path(out_dir) / f"{strategy.name}_seed{seed}.report.json"
        report_path.write_text(json.dumps(report.to_json(), sort_keys=True), encoding="utf-8")
    return net, report


def save_checkpoint(
    net: PolicyNet, path, strategy_name: str, task: str, seed: int, config_hash: str = ""
) -> None:
    save_params(
        net.params,
        path,
        spec={
            "model": net.config.to_json(),
            "strategy": strategy_name,
            "task": task,
            "seed": seed,
            "config_hash": config_hash,
        },
    )


def load_checkpoint(path) -> tuple[PolicyNet, dict]:
    """Rebuild a PolicyNet from a checkpoint's embedded model config."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    spec = doc.get("spec") or {}
    if "model" not in spec:
        raise ValueError(f"checkpoint {path} carries no model config")
    config = ModelConfig.from_json(spec["model"])
    net = init_policy(config, 0)
    from .diffcore import load_params

    load_params(net.params, path)
    return net, spec


def train_all_strategies(
    subtask_episodes: list[Episode],
    longhorizon_episodes: list[Episode],
    model_config: ModelConfig,
    settings: TrainSettings,
    seeds,
    out_dir,
    task: str = "",
    config_hash: str = "",
) -> dict:
    """Train J/JF/S/SF on subtask demos and BASELINE on long-horizon demos
    for every seed; returns (and writes) the comparison bundle manifest."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed required")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for seed in seeds:
        for name in STRATEGY_NAMES:
            data = longhorizon_episodes if name == "BASELINE" else subtask_episodes
            _, report = train(
                strategy_config(name, settings),
                data,
                model_config,
                settings,
                seed,
                out_dir=out_dir,
                task=task,
                config_hash=config_hash,
            )
            entries.append(
                {
                    "strategy": name,
                    "seed": seed,
                    "checkpoint": report.checkpoint_path,
                    "report": str(out_dir / f"{name}_seed{seed}.report.json"),
                }
            )
    manifest = {
        "format_version": 1,
        "task": task,
        "seeds": seeds,
        "config_hash": config_hash,
        "entries": entries,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2), encoding="utf-8"
    )
    return manifest
