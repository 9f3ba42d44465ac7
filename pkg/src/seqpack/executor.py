"""Long-horizon rollout engine: per-subtask policy execution monitored by the
completion indicator (signal fires strictly below the stop threshold), the
stop -> home -> next-prompt transition protocol, and the open-loop baseline
runner with post-hoc sequence-error accounting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import make_rng
from .model import PolicyNet, denormalize_actions, sample_action_chunk
from .simenv import (
    HOME_POSITIONS,
    MAX_STEP,
    TaskPlan,
    WorldState,
    is_subtask_complete,
    observation_vector,
    reset,
    step,
)


@dataclass
class RolloutConfig:
    stop_threshold: float = 0.2
    integration_steps: int = 10
    subtask_budget: int = 300
    transition_budget: int = 100
    consecutive_signals: int = 1
    home_positions: tuple = HOME_POSITIONS
    home_radius: float = 0.03

    def __post_init__(self):
        if not 0.0 < self.stop_threshold < 1.0:
            raise ValueError(f"stop_threshold must be in (0, 1), got {self.stop_threshold}")
        if self.subtask_budget <= 0 or self.transition_budget <= 0:
            raise ValueError("budgets must be positive")
        if self.consecutive_signals < 1:
            raise ValueError("consecutive_signals must be >= 1")


class PolicyRunner:
    """Adapts a trained PolicyNet to the executor's act() protocol: one
    inference yields a raw (chunk_len, action_dim) block and the indicator p."""

    def __init__(self, net: PolicyNet, integration_steps: int = 10):
        self.net = net
        self.integration_steps = integration_steps
        self.chunk_len = net.config.chunk_len
        self.action_dim = net.config.action_dim

    def act(self, context: np.ndarray, rng: np.random.Generator):
        chunk, p = sample_action_chunk(self.net, context, self.integration_steps, rng)
        raw = denormalize_actions(self.net.config, chunk.reshape(self.chunk_len, self.action_dim))
        return raw, p


@dataclass
class SubtaskResult:
    plan_position: int
    prompt_id: int
    outcome: str  # "signaled" | "budget_exhausted" | "failed" | "open_loop"
    steps: int
    p_trace: list
    oracle_success: bool


@dataclass
class SequencerState:
    plan: TaskPlan
    position: int = 0
    phase: str = "executing"  # executing | transitioning | done | failed
    results: list = field(default_factory=list)
    steps_total: int = 0


@dataclass
class ExecutionRecord:
    plan_name: str
    seed: int
    policy_mode: str  # "sequenced" | "open_loop"
    results: list
    sequence_errors: int
    overall_success: bool
    status: str  # "done" | "failed"

    def to_json(self) -> dict:
        return {
            "plan": self.plan_name,
            "seed": self.seed,
            "policy_mode": self.policy_mode,
            "results": [
                {
                    "plan_position": r.plan_position,
                    "prompt_id": r.prompt_id,
                    "outcome": r.outcome,
                    "steps": r.steps,
                    "p_trace": [float(p) for p in r.p_trace],
                    "oracle_success": bool(r.oracle_success),
                }
                for r in self.results
            ],
            "sequence_errors": self.sequence_errors,
            "overall_success": self.overall_success,
            "status": self.status,
        }


def run_subtask(
    policy,
    world: WorldState,
    plan: TaskPlan,
    position: int,
    cfg: RolloutConfig,
    rng: np.random.Generator,
) -> SubtaskResult:
    """Chunked inference loop for one plan entry.

    The indicator is evaluated once per inference; a transition signal fires
    only on p strictly below the stop threshold. Ground-truth success comes
    from the simulator oracle and is recorded for evaluation only.
    """
    subtask = plan.subtasks[plan.sequence[position]]
    min_placed = plan.required_placed(position)
    p_trace: list[float] = []
    steps_used = 0
    signals = 0
    outcome = "budget_exhausted"
    while steps_used + policy.chunk_len <= cfg.subtask_budget:
        context = observation_vector(world, subtask.prompt_id, plan.prompt_dim)
        try:
            actions, p = policy.act(context, rng)
            for act in np.asarray(actions, dtype=np.float64).reshape(
                policy.chunk_len, policy.action_dim
            ):
                step(world, act)
        except ValueError:
            outcome = "failed"
            break
        steps_used += policy.chunk_len
        p_trace.append(float(p))
        if p < cfg.stop_threshold:
            signals += 1
            if signals >= cfg.consecutive_signals:
                outcome = "signaled"
                break
        else:
            signals = 0
    oracle = is_subtask_complete(world, subtask, min_placed)
    return SubtaskResult(position, subtask.prompt_id, outcome, steps_used, p_trace, oracle)


def transition(seq: SequencerState, world: WorldState, cfg: RolloutConfig) -> SequencerState:
    """Stop -> home -> next prompt: drive both arms to their home poses, then
    advance the plan index (done past the plan end, failed if unreachable)."""
    if seq.phase != "transitioning":
        raise ValueError(f"transition requires phase 'transitioning', got {seq.phase!r}")
    homes = np.asarray(cfg.home_positions, dtype=np.float64)
    for _ in range(cfg.transition_budget):
        delta = homes - world.arm_positions
        if np.linalg.norm(delta, axis=1).max() <= cfg.home_radius:
            break
        action = np.zeros(6)
        action[0:2] = np.clip(delta[0], -MAX_STEP, MAX_STEP)
        action[3:5] = np.clip(delta[1], -MAX_STEP, MAX_STEP)
        step(world, action)
        seq.steps_total += 1
    else:
        seq.phase = "failed"
        return seq
    seq.position += 1
    seq.phase = "done" if seq.position >= len(seq.plan.sequence) else "executing"
    return seq


def run_long_horizon(policy, plan: TaskPlan, cfg: RolloutConfig, seed: int) -> ExecutionRecord:
    """Sequenced rollout: prompts follow the plan prefix by construction, so
    the sequence-error count is structurally zero and recorded as such."""
    world = reset(plan, seed)
    rng = make_rng(seed)
    seq = SequencerState(plan=plan)
    while seq.phase == "executing":
        result = run_subtask(policy, world, plan, seq.position, cfg, rng)
        seq.results.append(result)
        seq.steps_total += result.steps
        if result.outcome == "signaled":
            seq.phase = "transitioning"
            transition(seq, world, cfg)
        else:
            seq.phase = "failed"
    overall = seq.phase == "done" and all(r.oracle_success for r in seq.results)
    return ExecutionRecord(
        plan_name=plan.name,
        seed=seed,
        policy_mode="sequenced",
        results=seq.results,
        sequence_errors=0,
        overall_success=overall,
        status=seq.phase,
    )


def _expected_completion_kinds(plan: TaskPlan) -> list[str]:
    kinds = []
    for idx in plan.sequence:
        sub = plan.subtasks[idx]
        kinds.append("container" if sub.predicate == "container-closed" else sub.target_kind)
    return kinds


def count_sequence_errors(plan: TaskPlan, events: list) -> int:
    """Out-of-plan-order completion events plus debounced repeat-grasp
    attempts at already-placed items' original positions."""
    expected = _expected_completion_kinds(plan)
    completions: list[str] = []
    repeats = 0
    kinds = plan.item_kinds
    for event, idx in events:
        if event == "placed":
            completions.append(kinds[idx])
        elif event == "container_closed":
            completions.append("container")
        elif event == "regrasp_attempt":
            repeats += 1
    out_of_order = sum(
        1 for i, kind in enumerate(completions) if i >= len(expected) or kind != expected[i]
    )
    return out_of_order + repeats


def _plan_fully_complete(plan: TaskPlan, world: WorldState) -> bool:
    for position in range(len(plan.sequence)):
        sub = plan.subtasks[plan.sequence[position]]
        if sub.predicate == "container-closed":
            if not world.container_closed:
                return False
        elif world.placed_count(sub.target_kind) < plan.required_placed(position):
            return False
    return True


def run_baseline_open_loop(
    policy, plan: TaskPlan, cfg: RolloutConfig, seed: int
) -> ExecutionRecord:
    """Single task-level prompt, repeated chunk execution with no subtask
    monitoring; sequence errors are scored post-hoc from the oracle trace.
    The loop ends at the total budget or as soon as the workflow is complete."""
    world = reset(plan, seed)
    rng = make_rng(seed)
    total_budget = cfg.subtask_budget * len(plan.sequence)
    events: list[tuple] = []
    p_trace: list[float] = []
    steps_used = 0
    status = "done"
    while steps_used + policy.chunk_len <= total_budget:
        if _plan_fully_complete(plan, world):
            break
        context = observation_vector(world, plan.task_prompt_id, plan.prompt_dim)
        try:
            actions, p = policy.act(context, rng)
            for act in np.asarray(actions, dtype=np.float64).reshape(
                policy.chunk_len, policy.action_dim
            ):
                step(world, act)
                events.extend(world.last_events)
        except ValueError:
            status = "failed"
            break
        steps_used += policy.chunk_len
        p_trace.append(float(p))
    results = []
    for position in range(len(plan.sequence)):
        sub = plan.subtasks[plan.sequence[position]]
        if sub.predicate == "container-closed":
            ok = world.container_closed
        else:
            ok = world.placed_count(sub.target_kind) >= plan.required_placed(position)
        results.append(
            SubtaskResult(position, sub.prompt_id, "open_loop", steps_used, p_trace, ok)
        )
    overall = all(r.oracle_success for r in results)
    return ExecutionRecord(
        plan_name=plan.name,
        seed=seed,
        policy_mode="open_loop",
        results=results,
        sequence_errors=count_sequence_errors(plan, events),
        overall_success=overall,
        status=status,
    )


def write_record(path, record: ExecutionRecord) -> None:
    Path(path).write_text(json.dumps(record.to_json(), sort_keys=True), encoding="utf-8")


def read_record(path) -> ExecutionRecord:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    results = [
        SubtaskResult(
            r["plan_position"],
            r["prompt_id"],
            r["outcome"],
            r["steps"],
            r["p_trace"],
            r["oracle_success"],
        )
        for r in doc["results"]
    ]
    return ExecutionRecord(
        doc["plan"],
        doc["seed"],
        doc["policy_mode"],
        results,
        doc["sequence_errors"],
        doc["overall_success"],
        doc["status"],
    )
