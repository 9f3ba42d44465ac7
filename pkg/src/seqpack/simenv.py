"""Deterministic 2-D two-arm packing simulator with scripted experts and
demonstration dataset generation (subtask-level with completion labels,
long-horizon for the monolithic baseline)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import make_rng
from .model import ObservationContext

ACTION_DIM = 6  # [vx_left, vy_left, grip_left, vx_right, vy_right, grip_right]
MAX_STEP = 0.05
PICKUP_RADIUS = 0.05
DROP_RADIUS = 0.07
CONTACT_RADIUS = 0.07
MIN_SEPARATION = 0.08
RETREAT_MARGIN = 0.02
CONTAINER_POSITION = (0.5, 0.15)
HOME_POSITIONS = ((0.2, 0.9), (0.8, 0.9))  # left, right
SPAWN_X = (0.08, 0.92)
SPAWN_Y = (0.30, 0.78)
HOLD_TAIL_FRAMES = 20
EXPERT_STEP_LIMIT = 200
MAX_EXPERT_FAILURE_RATE = 0.05

ARMS = ("left", "right")
# Grip commands are regions, not instants: the expert commits to "close"
# throughout a ball around the target (the grasp itself fires at the pickup
# radius on the way in) and to "open" inside a ball well within the drop
# radius, so a policy that smooths these boundaries still acts legally.
GRASP_COMMIT = 0.07  # command close inside this distance of the target item
RELEASE_MARGIN = 0.042  # open to place inside this distance (drop radius 0.07)
CLOSE_APPROACH = 0.05  # command grip-close near the container lid

DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SubtaskSpec:
    """One prompt-scoped goal: place an item kind, or close the container."""

    prompt_id: int
    prompt: str
    arm: str  # "left" | "right" | "both"
    predicate: str  # "item-placed" | "container-closed"
    target_kind: str

    def __post_init__(self):
        if self.arm not in ("left", "right", "both"):
            raise ValueError(f"unknown arm {self.arm!r}")
        if self.predicate not in ("item-placed", "container-closed"):
            raise ValueError(f"unknown predicate {self.predicate!r}")
        if self.arm == "both" and self.predicate != "container-closed":
            raise ValueError("bimanual subtasks are only used for container closing")


@dataclass(frozen=True)
class TaskPlan:
    """Ordered subtask sequence (repeats allowed) plus the world item manifest."""

    name: str
    item_kinds: tuple[str, ...]
    subtasks: tuple[SubtaskSpec, ...]
    sequence: tuple[int, ...]
    task_prompt: str

    def __post_init__(self):
        if not self.sequence:
            raise ValueError("plan sequence must be non-empty")
        if any(i < 0 or i >= len(self.subtasks) for i in self.sequence):
            raise ValueError("plan sequence references unknown subtasks")
        for i, sub in enumerate(self.subtasks):
            if sub.prompt_id != i:
                raise ValueError("subtask prompt_ids must match their index order")

    @property
    def prompt_dim(self) -> int:
        # All subtask prompts plus one full-task prompt for the baseline.
        return len(self.subtasks) + 1

    @property
    def task_prompt_id(self) -> int:
        return len(self.subtasks)

    @property
    def state_dim(self) -> int:
        return 4 + 2 + 3 * len(self.item_kinds) + 1

    def steps(self) -> list[SubtaskSpec]:
        return [self.subtasks[i] for i in self.sequence]

    def required_placed(self, position: int) -> int:
        """How many items of the target kind must be placed once the plan
        entry at `position` is complete (counts repeats in the prefix)."""
        kind = self.subtasks[self.sequence[position]].target_kind
        return sum(
            1
            for i in self.sequence[: position + 1]
            if self.subtasks[i].predicate == "item-placed" and self.subtasks[i].target_kind == kind
        )

    def prompt_text(self, prompt_id: int) -> str:
        if prompt_id == self.task_prompt_id:
            return self.task_prompt
        return self.subtasks[prompt_id].prompt


def salad_plan() -> TaskPlan:
    kinds = ("spinach", "coleslaw", "meatball", "chicken", "tomato", "sauce")
    arms = ("left", "left", "right", "right", "right", "right")
    subtasks = [
        SubtaskSpec(i, f"pick up the {kind}", arm, "item-placed", kind)
        for i, (kind, arm) in enumerate(zip(kinds, arms))
    ]
    subtasks.append(SubtaskSpec(6, "close the container", "both", "container-closed", "container"))
    return TaskPlan(
        name="salad",
        item_kinds=kinds,
        subtasks=tuple(subtasks),
        sequence=(0, 1, 2, 3, 4, 5, 6),
        task_prompt="pack the salad container",
    )


def candy_plan() -> TaskPlan:
    kinds = ("gummies", "kinder", "kinder", "snickers", "snickers", "lollipop")
    subtasks = (
        SubtaskSpec(0, "pick up the gummies", "left", "item-placed", "gummies"),
        SubtaskSpec(1, "pick up the kinder", "left", "item-placed", "kinder"),
        SubtaskSpec(2, "pick up the snickers", "right", "item-placed", "snickers"),
        SubtaskSpec(3, "pick up the lollipop", "right", "item-placed", "lollipop"),
    )
    return TaskPlan(
        name="candy",
        item_kinds=kinds,
        subtasks=subtasks,
        sequence=(0, 1, 1, 2, 2, 3),
        task_prompt="pack the candy box",
    )


def get_plan(name: str) -> TaskPlan:
    plans = {"salad": salad_plan, "candy": candy_plan}
    if name not in plans:
        raise ValueError(f"unknown task family {name!r}; expected one of {sorted(plans)}")
    return plans[name]()


@dataclass
class WorldState:
    arm_positions: np.ndarray  # (2, 2)
    grip_closed: np.ndarray  # (2,) bool
    held_item: list  # per arm: item index or None
    item_kinds: tuple[str, ...]
    item_positions: np.ndarray  # (n_items, 2)
    item_placed: np.ndarray  # (n_items,) bool
    item_initial_positions: np.ndarray
    container_position: np.ndarray
    container_closed: bool
    timestep: int
    last_events: list = field(default_factory=list)
    _regrasp_active: set = field(default_factory=set)

    def copy(self) -> "WorldState":
        return WorldState(
            self.arm_positions.copy(),
            self.grip_closed.copy(),
            list(self.held_item),
            self.item_kinds,
            self.item_positions.copy(),
            self.item_placed.copy(),
            self.item_initial_positions.copy(),
            self.container_position.copy(),
            self.container_closed,
            self.timestep,
            list(self.last_events),
            set(self._regrasp_active),
        )

    def placed_count(self, kind: str) -> int:
        return int(
            sum(1 for i, k in enumerate(self.item_kinds) if k == kind and self.item_placed[i])
        )


def _sample_item_positions(rng: np.random.Generator, n_items: int) -> np.ndarray:
    positions: list[np.ndarray] = []
    attempts = 0
    while len(positions) < n_items:
        cand = np.array(
            [rng.uniform(SPAWN_X[0], SPAWN_X[1]), rng.uniform(SPAWN_Y[0], SPAWN_Y[1])]
        )
        if all(np.linalg.norm(cand - p) >= MIN_SEPARATION for p in positions):
            positions.append(cand)
        attempts += 1
        if attempts > 10000:
            raise RuntimeError("item placement rejection sampling did not converge")
    return np.stack(positions)


def _reset_with_rng(plan: TaskPlan, rng: np.random.Generator) -> WorldState:
    positions = _sample_item_positions(rng, len(plan.item_kinds))
    return WorldState(
        arm_positions=np.array(HOME_POSITIONS, dtype=np.float64),
        grip_closed=np.zeros(2, dtype=bool),
        held_item=[None, None],
        item_kinds=plan.item_kinds,
        item_positions=positions,
        item_placed=np.zeros(len(plan.item_kinds), dtype=bool),
        item_initial_positions=positions.copy(),
        container_position=np.array(CONTAINER_POSITION, dtype=np.float64),
        container_closed=False,
        timestep=0,
    )


def reset(plan: TaskPlan, seed: int) -> WorldState:
    """Seeded scene: items at random non-overlapping spots, arms at home."""
    return _reset_with_rng(plan, make_rng(seed))


def step(state: WorldState, action) -> WorldState:
    """Advance one tick (mutates and returns `state`).

    Grip commands > 0.5 close, otherwise open. A closing empty gripper within
    the pickup radius of an unplaced item grasps it; opening while holding
    within the drop radius of the open container places the held item.
    Invalid attempts are no-ops (opening mid-carry away from the container
    keeps holding). The container closes when every item is placed and both
    grippers press within the contact radius. Events of interest land in
    `state.last_events`.
    """
    action = np.asarray(action, dtype=np.float64).reshape(ACTION_DIM)
    if not np.isfinite(action).all():
        raise ValueError("non-finite action")
    events: list[tuple] = []
    close_cmd = [action[2] > 0.5, action[5] > 0.5]
    for arm in range(2):
        vel = np.clip(action[arm * 3 : arm * 3 + 2], -MAX_STEP, MAX_STEP)
        state.arm_positions[arm] = np.clip(state.arm_positions[arm] + vel, 0.0, 1.0)
        if state.held_item[arm] is not None:
            state.item_positions[state.held_item[arm]] = state.arm_positions[arm]
    for arm in range(2):
        pos = state.arm_positions[arm]
        if close_cmd[arm]:
            state.grip_closed[arm] = True
            if state.held_item[arm] is None:
                idx = _grasp_candidate(state, pos)
                if idx is not None:
                    state.held_item[arm] = idx
                    state.item_positions[idx] = pos.copy()
                    events.append(("grasped", idx))
                else:
                    _note_regrasp_attempts(state, arm, pos, events)
        else:
            held = state.held_item[arm]
            if held is not None:
                near_container = (
                    np.linalg.norm(pos - state.container_position) <= DROP_RADIUS
                )
                if near_container and not state.container_closed:
                    state.grip_closed[arm] = False
                    state.held_item[arm] = None
                    state.item_placed[held] = True
                    state.item_positions[held] = state.container_position.copy()
                    events.append(("placed", held))
                # opening while holding away from the container is an invalid
                # attempt and a no-op: the grip stays closed on the item
            else:
                state.grip_closed[arm] = False
        if not close_cmd[arm]:
            state._regrasp_active = {(a, i) for (a, i) in state._regrasp_active if a != arm}
    if (
        not state.container_closed
        and bool(state.item_placed.all())
        and close_cmd[0]
        and close_cmd[1]
        and np.linalg.norm(state.arm_positions[0] - state.container_position) <= CONTACT_RADIUS
        and np.linalg.norm(state.arm_positions[1] - state.container_position) <= CONTACT_RADIUS
    ):
        state.container_closed = True
        events.append(("container_closed", -1))
    state.timestep += 1
    state.last_events = events
    return state


def _grasp_candidate(state: WorldState, pos: np.ndarray):
    best, best_dist = None, PICKUP_RADIUS
    for idx in range(len(state.item_kinds)):
        if state.item_placed[idx] or idx in state.held_item:
            continue
        d = float(np.linalg.norm(state.item_positions[idx] - pos))
        if d <= best_dist:
            best, best_dist = idx, d
    return best


def _note_regrasp_attempts(state: WorldState, arm: int, pos: np.ndarray, events: list) -> None:
    # Closing an empty gripper where a placed item used to sit is a repeat
    # attempt; debounced per (arm, item) until the grip reopens.
    for idx in range(len(state.item_kinds)):
        if not state.item_placed[idx]:
            continue
        if np.linalg.norm(state.item_initial_positions[idx] - pos) <= PICKUP_RADIUS:
            key = (arm, idx)
            if key not in state._regrasp_active:
                state._regrasp_active.add(key)
                events.append(("regrasp_attempt", idx))


def is_subtask_complete(state: WorldState, subtask: SubtaskSpec, min_placed: int = 1) -> bool:
    """Ground-truth completion: target placed (or container closed), assigned
    gripper released, and the gripper backed out of container contact."""
    if subtask.predicate == "container-closed":
        return state.container_closed
    if state.placed_count(subtask.target_kind) < min_placed:
        return False
    arm = ARMS.index(subtask.arm)
    if state.grip_closed[arm]:
        return False
    if np.linalg.norm(state.arm_positions[arm] - state.container_position) <= CONTACT_RADIUS:
        return False
    return True


def _home_drive(action: np.ndarray, state: WorldState, arm: int) -> None:
    # An arm with nothing to do returns to (and holds at) its home pose, so
    # zero-velocity frames only ever occur at home; anywhere else the data
    # says "move", which keeps the cloned policy free of spurious rest points.
    delta = np.asarray(HOME_POSITIONS[arm]) - state.arm_positions[arm]
    action[arm * 3 : arm * 3 + 2] = np.clip(delta, -MAX_STEP, MAX_STEP)
    action[arm * 3 + 2] = 0.0


def scripted_expert(state: WorldState, subtask: SubtaskSpec, min_placed: int = 1) -> np.ndarray:
    """Proportional pick-carry-place controller standing in for teleoperation.

    Velocities are pre-clipped to the simulator's per-axis maximum and grips
    are commanded as 0/1. Idle arms drive to their home poses; after the
    completion predicate holds, both arms home and hold there (the reset
    motion recorded in the labelled post-completion tail).
    """
    action = np.zeros(ACTION_DIM)
    if is_subtask_complete(state, subtask, min_placed):
        _home_drive(action, state, 0)
        _home_drive(action, state, 1)
        return action
    if subtask.predicate == "container-closed":
        if not state.item_placed.all():
            _home_drive(action, state, 0)
            _home_drive(action, state, 1)
            return action
        for arm in range(2):
            delta = state.container_position - state.arm_positions[arm]
            action[arm * 3 : arm * 3 + 2] = np.clip(delta, -MAX_STEP, MAX_STEP)
            if np.linalg.norm(delta) <= CLOSE_APPROACH:
                action[arm * 3 + 2] = 1.0
        return action
    arm = ARMS.index(subtask.arm)
    _home_drive(action, state, 1 - arm)
    base = arm * 3
    pos = state.arm_positions[arm]
    held = state.held_item[arm]
    if held is not None:
        # carry whatever is in hand to the container (a wrongly grasped item
        # cannot be dropped elsewhere, so packing it clears the hand)
        delta = state.container_position - pos
        action[base : base + 2] = np.clip(delta, -MAX_STEP, MAX_STEP)
        # release well inside the drop radius, otherwise keep carrying
        action[base + 2] = 0.0 if np.linalg.norm(delta) <= RELEASE_MARGIN else 1.0
        return action
    target = _nearest_unplaced(state, subtask.target_kind, pos)
    if target is None:
        # target placed but the grip or container contact still pending:
        # head home, which also clears the contact-radius condition
        _home_drive(action, state, arm)
        return action
    delta = state.item_positions[target] - pos
    action[base : base + 2] = np.clip(delta, -MAX_STEP, MAX_STEP)
    if np.linalg.norm(delta) <= GRASP_COMMIT:
        action[base + 2] = 1.0
    return action


def _nearest_unplaced(state: WorldState, kind: str, pos: np.ndarray):
    best, best_dist = None, np.inf
    for idx, k in enumerate(state.item_kinds):
        if k != kind or state.item_placed[idx] or idx in state.held_item:
            continue
        d = float(np.linalg.norm(state.item_positions[idx] - pos))
        if d < best_dist:
            best, best_dist = idx, d
    return best


def observation_vector(state: WorldState, prompt_id: int, prompt_dim: int) -> np.ndarray:
    """Fixed observation layout: arm positions, grip-open flags, item
    positions, placed flags, container-closed flag, prompt one-hot."""
    if not 0 <= prompt_id < prompt_dim:
        raise ValueError(f"prompt_id {prompt_id} outside vocabulary of size {prompt_dim}")
    onehot = np.zeros(prompt_dim)
    onehot[prompt_id] = 1.0
    return np.concatenate(
        [
            state.arm_positions.ravel(),
            1.0 - state.grip_closed.astype(np.float64),
            state.item_positions.ravel(),
            state.item_placed.astype(np.float64),
            [1.0 if state.container_closed else 0.0],
            onehot,
        ]
    )


def make_context(state: WorldState, prompt_id: int, plan: TaskPlan) -> ObservationContext:
    vec = observation_vector(state, prompt_id, plan.prompt_dim)
    return ObservationContext(state=vec[: plan.state_dim], prompt_onehot=vec[plan.state_dim :])


@dataclass
class Frame:
    observation: np.ndarray  # full context vector (state + prompt one-hot)
    action: np.ndarray  # raw executed action (ACTION_DIM,)
    label: int


@dataclass
class Episode:
    plan_name: str
    subtask_prompt_id: int
    prompt_text: str
    seed: int
    frames: list
    noise_scale: float


def label_frames(oracle_flags) -> list[int]:
    """1 for every frame strictly before the oracle first fires, 0 from then on."""
    flags = list(oracle_flags)
    if True not in flags:
        raise ValueError("oracle never fired; episode is an expert failure")
    first = flags.index(True)
    if first == 0:
        raise ValueError("degenerate episode: oracle already satisfied at the first frame")
    return [1] * first + [0] * (len(flags) - first)


def _noisy(action: np.ndarray, rng: np.random.Generator, noise_scale: float) -> np.ndarray:
    """Execution-side perturbation: demos step with this noisy command while
    the clean expert command is recorded, so trajectories wander off the
    nominal path and the dataset is dense in corrective behaviour."""
    if noise_scale <= 0.0:
        return action
    out = action.copy()
    for arm in range(2):
        out[arm * 3 : arm * 3 + 2] += rng.normal(0.0, noise_scale, size=2)
    return out


def _preplace_prefix(
    state: WorldState, plan: TaskPlan, position: int, rng: np.random.Generator
) -> None:
    """Put every item a plan prefix would already have packed into the
    container (random instance choice for kinds with several instances)."""
    for j in plan.sequence[:position]:
        sub = plan.subtasks[j]
        if sub.predicate != "item-placed":
            continue
        candidates = [
            i
            for i, k in enumerate(state.item_kinds)
            if k == sub.target_kind and not state.item_placed[i]
        ]
        if not candidates:
            raise RuntimeError(f"plan prefix exhausts items of kind {sub.target_kind!r}")
        idx = candidates[int(rng.integers(len(candidates)))]
        state.item_placed[idx] = True
        state.item_positions[idx] = state.container_position.copy()


HOME_START_FRACTION = 0.3  # remaining demos start the arms anywhere reachable
ARM_START_X = (0.05, 0.95)
ARM_START_Y = (0.15, 0.95)


def _randomize_arm_starts(state: WorldState, rng: np.random.Generator) -> None:
    # Recovery coverage: the expert is a feedback controller, so demos from
    # arbitrary arm poses (and stray closed grips) teach the policy to
    # correct its own drift instead of compounding it.
    if rng.uniform() < HOME_START_FRACTION:
        return
    for arm in range(2):
        state.arm_positions[arm] = np.array(
            [rng.uniform(*ARM_START_X), rng.uniform(*ARM_START_Y)]
        )
        state.grip_closed[arm] = bool(rng.uniform() < 0.25)


def _subtask_demo_episode(
    plan: TaskPlan, position: int, seed: int, noise_scale: float
) -> Episode | None:
    """One expert rollout of the plan entry at `position`; None on expert failure."""
    rng = make_rng(seed)
    state = _reset_with_rng(plan, rng)
    _preplace_prefix(state, plan, position, rng)
    _randomize_arm_starts(state, rng)
    subtask = plan.subtasks[plan.sequence[position]]
    min_placed = plan.required_placed(position)
    observations, actions, flags = [], [], []
    tail = 0
    for _ in range(EXPERT_STEP_LIMIT + HOLD_TAIL_FRAMES):
        done = is_subtask_complete(state, subtask, min_placed)
        flags.append(done)
        if done:
            tail += 1
        observations.append(observation_vector(state, subtask.prompt_id, plan.prompt_dim))
        action = scripted_expert(state, subtask, min_placed)
        actions.append(action)
        step(state, _noisy(action, rng, noise_scale))
        if tail >= HOLD_TAIL_FRAMES:
            break
    if tail < HOLD_TAIL_FRAMES:
        return None
    try:
        labels = label_frames(flags)
    except ValueError:
        return None
    frames = [Frame(o, a, l) for o, a, l in zip(observations, actions, labels)]
    return Episode(plan.name, subtask.prompt_id, subtask.prompt, seed, frames, noise_scale)


def generate_subtask_dataset(
    plan: TaskPlan, demos_per_subtask: int, seed: int, noise_scale: float = 0.005
) -> tuple[list[Episode], dict]:
    """Expert demonstrations per distinct subtask with completion labels.

    Demo j of a subtask uses the plan occurrence j mod (number of occurrences)
    as its starting context, so repeated subtasks see both fresh and
    partially-packed scenes. Episodes where the expert fails are dropped and
    counted; a failure rate above 5% aborts.
    """
    if demos_per_subtask < 1:
        raise ValueError("demos_per_subtask must be >= 1")
    episodes: list[Episode] = []
    rejections = 0
    counter = 0
    for sub_index in range(len(plan.subtasks)):
        positions = [p for p, j in enumerate(plan.sequence) if j == sub_index]
        if not positions:
            continue
        for demo in range(demos_per_subtask):
            position = positions[demo % len(positions)]
            episode = None
            for _ in range(20):
                ep_seed = seed * 1000003 + counter
                counter += 1
                episode = _subtask_demo_episode(plan, position, ep_seed, noise_scale)
                if episode is not None:
                    break
                rejections += 1
            if episode is None:
                raise RuntimeError(
                    f"expert failed repeatedly on subtask {plan.subtasks[sub_index].prompt!r}"
                )
            episodes.append(episode)
    total_attempts = len(episodes) + rejections
    if rejections / total_attempts > MAX_EXPERT_FAILURE_RATE:
        raise RuntimeError(
            f"expert failure rate {rejections / total_attempts:.3f} exceeds "
            f"{MAX_EXPERT_FAILURE_RATE:.2f} ({rejections}/{total_attempts})"
        )
    manifest = _manifest(plan, episodes, rejections, seed, noise_scale, "subtask")
    return episodes, manifest


def generate_longhorizon_dataset(
    plan: TaskPlan, demos: int, seed: int, noise_scale: float = 0.005
) -> tuple[list[Episode], dict]:
    """Full-plan expert trajectories under the single task-level prompt.

    Labels are recorded as 1 throughout; the baseline never reads them.
    """
    if demos < 1:
        raise ValueError("demos must be >= 1")
    episodes: list[Episode] = []
    rejections = 0
    counter = 0
    for _ in range(demos):
        episode = None
        for _ in range(20):
            ep_seed = seed * 1000003 + counter
            counter += 1
            episode = _longhorizon_episode(plan, ep_seed, noise_scale)
            if episode is not None:
                break
            rejections += 1
        if episode is None:
            raise RuntimeError("expert failed repeatedly on the long-horizon plan")
        episodes.append(episode)
    total_attempts = len(episodes) + rejections
    if rejections / total_attempts > MAX_EXPERT_FAILURE_RATE:
        raise RuntimeError(
            f"expert failure rate {rejections / total_attempts:.3f} exceeds "
            f"{MAX_EXPERT_FAILURE_RATE:.2f}"
        )
    manifest = _manifest(plan, episodes, rejections, seed, noise_scale, "longhorizon")
    return episodes, manifest


def _longhorizon_episode(plan: TaskPlan, seed: int, noise_scale: float) -> Episode | None:
    rng = make_rng(seed)
    state = _reset_with_rng(plan, rng)
    frames: list[Frame] = []
    for position in range(len(plan.sequence)):
        subtask = plan.subtasks[plan.sequence[position]]
        min_placed = plan.required_placed(position)
        done = False
        for _ in range(EXPERT_STEP_LIMIT):
            if is_subtask_complete(state, subtask, min_placed):
                done = True
                break
            obs = observation_vector(state, plan.task_prompt_id, plan.prompt_dim)
            action = scripted_expert(state, subtask, min_placed)
            frames.append(Frame(obs, action, 1))
            step(state, _noisy(action, rng, noise_scale))
        if not done:
            return None
    return Episode(plan.name, plan.task_prompt_id, plan.task_prompt, seed, frames, noise_scale)


def _manifest(
    plan: TaskPlan,
    episodes: list[Episode],
    rejections: int,
    seed: int,
    noise_scale: float,
    kind: str,
) -> dict:
    counts: dict[str, int] = {}
    for ep in episodes:
        counts[str(ep.subtask_prompt_id)] = counts.get(str(ep.subtask_prompt_id), 0) + 1
    return {
        "format_version": DATASET_FORMAT_VERSION,
        "plan": plan.name,
        "kind": kind,
        "episodes": len(episodes),
        "counts_per_prompt": counts,
        "noise_scale": noise_scale,
        "rejections": rejections,
        "seed": seed,
    }


def write_dataset(path, episodes: list[Episode], manifest: dict) -> None:
    """JSON Lines episodes plus a sidecar '<path>.manifest.json'."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for ep in episodes:
            record = {
                "plan": ep.plan_name,
                "subtask_prompt_id": ep.subtask_prompt_id,
                "prompt_text": ep.prompt_text,
                "seed": ep.seed,
                "frames": [
                    {
                        "obs": [float(v) for v in fr.observation],
                        "action": [float(v) for v in fr.action],
                        "label": int(fr.label),
                    }
                    for fr in ep.frames
                ],
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")
    manifest_path = Path(str(path) + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2), encoding="utf-8")


def read_dataset(path) -> list[Episode]:
    episodes: list[Episode] = []
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            frames = [
                Frame(
                    np.asarray(fr["obs"], dtype=np.float64),
                    np.asarray(fr["action"], dtype=np.float64),
                    int(fr["label"]),
                )
                for fr in doc["frames"]
            ]
            episodes.append(
                Episode(
                    doc["plan"],
                    int(doc["subtask_prompt_id"]),
                    doc["prompt_text"],
                    int(doc["seed"]),
                    frames,
                    float(doc.get("noise_scale", 0.0)),
                )
            )
    return episodes
