"""2D continuous tabletop with colored blocks, a gripper, and two camera views.

World coordinates live in the unit square. Dynamics are deterministic: the
gripper moves by the commanded displacement (clamped to the square), objects
advance by their constant velocity with reflective walls, and an episode ends
the moment the gripper closes: success if it closed within the grasp radius
of the target, failure otherwise. Timeouts end episodes that never commit.

Raster rules (the image format contract, see docs/FORMATS.md):
  * images are [3, 16, 16] float grids in [0, 1], channel x row x column,
    row = y axis, column = x axis, background zero;
  * an object at position (x, y) is a 2x2 stamp of its palette color whose
    lower cell index is floor(p * 16 + 0.5) - 1 per axis, clamped to [0, 14]
    in the third view (stamps stay fully visible);
  * the gripper is a white 5-pixel marker at cell floor(p * 16 + 0.5):
    an X shape (center + diagonals) while open, a + shape (center +
    orthogonals) once closed;
  * the wrist view renders the same rules inside a half-width window
    [p - 0.25, p + 0.25]^2 centered on the gripper (16 cells over a 0.5 span),
    with out-of-window content clipped to background;
  * draw order: distractors, then target, then gripper.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tokens import COLOR_NAMES, encode_instruction

GRID = 16
PALETTE = np.array([
    [1.0, 0.0, 0.0],  # red
    [0.0, 1.0, 0.0],  # green
    [0.0, 0.0, 1.0],  # blue
    [1.0, 1.0, 0.0],  # yellow
    [0.0, 1.0, 1.0],  # cyan
    [1.0, 0.0, 1.0],  # magenta
])
GRIPPER_COLOR = np.array([1.0, 1.0, 1.0])

GRASP_RADIUS = 0.04
ACTION_CLIP = 0.1
DEFAULT_TARGET_SPEED = 0.005
DEFAULT_MAX_STEPS = 80
WRIST_SPAN = 0.5

RUNNING, SUCCESS, FAILURE, TIMEOUT, ERRORED = "running", "success", "failure", "timeout", "errored"


class ResetError(RuntimeError):
    """Could not place objects with the required separation."""


@dataclass
class ObjectState:
    position: np.ndarray
    velocity: np.ndarray
    color: int
    is_target: bool


@dataclass
class WorldState:
    gripper_pos: np.ndarray
    gripper_closed: bool
    objects: list[ObjectState]
    t: int
    instruction: np.ndarray

    @property
    def target(self) -> ObjectState:
        for o in self.objects:
            if o.is_target:
                return o
        raise RuntimeError("world has no target object")


@dataclass
class Observation:
    third: np.ndarray
    wrist: np.ndarray
    instruction: np.ndarray
    step: int


@dataclass
class Action:
    a_pos: np.ndarray
    a_end: int
    a_end_logit: float

    @classmethod
    def from_logit(cls, a_pos: np.ndarray, logit: float) -> "Action":
        return cls(np.asarray(a_pos, dtype=np.float64), int(logit > 0.0), float(logit))


@dataclass
class EpisodeResult:
    outcome: str
    steps_used: int
    time_used: float


@dataclass(frozen=True)
class TaskSpec:
    target_color: int
    n_distractors: int
    target_speed: float


@dataclass(frozen=True)
class TaskDistribution:
    """Uniform product distribution over colors, distractor counts, speeds."""

    colors: tuple = (0, 1, 2, 3, 4)
    distractor_counts: tuple = (0, 1, 2, 3)
    speeds: tuple = (0.0, DEFAULT_TARGET_SPEED)

    def sample(self, rng: np.random.Generator) -> TaskSpec:
        return TaskSpec(
            target_color=int(rng.choice(self.colors)),
            n_distractors=int(rng.choice(self.distractor_counts)),
            target_speed=float(rng.choice(self.speeds)),
        )


# Task splits. Training holds out one color (magenta) and the 4-5 distractor
# counts; the unseen split stresses the held-out distractor counts, and the
# held-out color is kept as a separate diagnostic split since nothing at this
# scale can ground a never-trained color word.
SEEN_COLORS = (0, 1, 2, 3, 4)
HOLDOUT_COLOR = 5
SEEN_COUNTS = (0, 1, 2, 3)
UNSEEN_COUNTS = (4, 5)

SPLITS = {
    "train": TaskDistribution(SEEN_COLORS, SEEN_COUNTS, (0.0, DEFAULT_TARGET_SPEED)),
    "static_seen": TaskDistribution(SEEN_COLORS, SEEN_COUNTS, (0.0,)),
    "static_unseen": TaskDistribution(SEEN_COLORS, UNSEEN_COUNTS, (0.0,)),
    "moving_seen": TaskDistribution(SEEN_COLORS, SEEN_COUNTS, (DEFAULT_TARGET_SPEED,)),
    "moving_unseen": TaskDistribution(SEEN_COLORS, UNSEEN_COUNTS, (DEFAULT_TARGET_SPEED,)),
    "color_holdout": TaskDistribution((HOLDOUT_COLOR,), SEEN_COUNTS,
                                      (0.0, DEFAULT_TARGET_SPEED)),
}


def _stamp_cells(coord: float, cells: int) -> int:
    return int(np.floor(coord * cells + 0.5)) - 1


def _draw_square(img: np.ndarray, col0: int, row0: int, color: np.ndarray, clamp: bool):
    if clamp:
        col0 = min(max(col0, 0), GRID - 2)
        row0 = min(max(row0, 0), GRID - 2)
    for r in (row0, row0 + 1):
        for c in (col0, col0 + 1):
            if 0 <= r < GRID and 0 <= c < GRID:
                img[:, r, c] = color


def _draw_gripper(img: np.ndarray, col: int, row: int, closed: bool):
    offsets = [(0, 0)]
    if closed:
        offsets += [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        offsets += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    for dr, dc in offsets:
        r, c = row + dr, col + dc
        if 0 <= r < GRID and 0 <= c < GRID:
            img[:, r, c] = GRIPPER_COLOR


def render(state: WorldState, view: str) -> np.ndarray:
    """Rasterize a world state; pure function of the state."""
    img = np.zeros((3, GRID, GRID))
    if view == "third":
        origin, span, clamp = np.zeros(2), 1.0, True
    elif view == "wrist":
        origin, span, clamp = state.gripper_pos - WRIST_SPAN / 2.0, WRIST_SPAN, False
    else:
        raise ValueError(f"unknown view '{view}' (expected 'third' or 'wrist')")

    ordered = [o for o in state.objects if not o.is_target] + \
              [o for o in state.objects if o.is_target]
    for obj in ordered:
        rel = (obj.position - origin) / span
        col0 = _stamp_cells(rel[0], GRID)
        row0 = _stamp_cells(rel[1], GRID)
        if not clamp and (col0 < -1 or col0 > GRID - 1 or row0 < -1 or row0 > GRID - 1):
            continue
        _draw_square(img, col0, row0, PALETTE[obj.color], clamp)

    grel = (state.gripper_pos - origin) / span
    gcol = int(np.floor(grel[0] * GRID + 0.5))
    grow = int(np.floor(grel[1] * GRID + 0.5))
    gcol = min(max(gcol, 0), GRID - 1)
    grow = min(max(grow, 0), GRID - 1)
    _draw_gripper(img, gcol, grow, state.gripper_closed)
    return img


def observe(state: WorldState) -> Observation:
    return Observation(
        third=render(state, "third"),
        wrist=render(state, "wrist"),
        instruction=state.instruction,
        step=state.t,
    )


class GridWorld:
    """Configuration holder; all dynamics are pure functions of the state."""

    def __init__(self, max_steps: int = DEFAULT_MAX_STEPS,
                 grasp_radius: float = GRASP_RADIUS,
                 action_clip: float = ACTION_CLIP,
                 margin: float = 0.1, min_separation: float = 0.15):
        self.max_steps = max_steps
        self.grasp_radius = grasp_radius
        self.action_clip = action_clip
        self.margin = margin
        self.min_separation = min_separation

    # -- reset ---------------------------------------------------------------

    def _place(self, rng, placed: list[np.ndarray], tries: int = 200) -> np.ndarray:
        lo, hi = self.margin, 1.0 - self.margin
        for _ in range(tries):
            pos = rng.uniform(lo, hi, size=2)
            if all(np.linalg.norm(pos - q) >= self.min_separation for q in placed):
                return pos
        raise ResetError(
            f"could not place an entity with separation {self.min_separation} "
            f"after {tries} tries"
        )

    def reset(self, seed, task: TaskSpec) -> tuple[WorldState, Observation]:
        if task.target_speed < 0:
            raise ValueError("target speed must be >= 0")
        if not 0 <= task.n_distractors <= 5:
            raise ValueError("distractor count must be in [0, 5]")
        rng = np.random.default_rng(seed)
        placed: list[np.ndarray] = []

        target_pos = self._place(rng, placed)
        placed.append(target_pos)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        target_vel = task.target_speed * np.array([np.cos(angle), np.sin(angle)])
        objects = [ObjectState(target_pos, target_vel, task.target_color, True)]

        other_colors = [c for c in range(len(PALETTE)) if c != task.target_color]
        colors = rng.permutation(other_colors)[: task.n_distractors]
        for c in colors:
            pos = self._place(rng, placed)
            placed.append(pos)
            objects.append(ObjectState(pos, np.zeros(2), int(c), False))

        gripper = self._place(rng, placed)
        state = WorldState(
            gripper_pos=gripper,
            gripper_closed=False,
            objects=objects,
            t=0,
            instruction=encode_instruction(COLOR_NAMES[task.target_color]),
        )
        return state, observe(state)

    # -- dynamics ------------------------------------------------------------

    @staticmethod
    def _advance(obj: ObjectState) -> ObjectState:
        pos = obj.position + obj.velocity
        vel = obj.velocity.copy()
        for ax in range(2):
            if pos[ax] < 0.0:
                pos[ax] = -pos[ax]
                vel[ax] = -vel[ax]
            elif pos[ax] > 1.0:
                pos[ax] = 2.0 - pos[ax]
                vel[ax] = -vel[ax]
        return ObjectState(pos, vel, obj.color, obj.is_target)

    def step(self, state: WorldState, action: Action) -> tuple[WorldState, Observation, str]:
        if np.max(np.abs(action.a_pos)) > self.action_clip + 1e-12:
            raise ValueError(
                f"action {action.a_pos} exceeds clip bound {self.action_clip}"
            )
        gripper = np.clip(state.gripper_pos + action.a_pos, 0.0, 1.0)
        objects = [self._advance(o) for o in state.objects]
        new = WorldState(
            gripper_pos=gripper,
            gripper_closed=bool(action.a_end),
            objects=objects,
            t=state.t + 1,
            instruction=state.instruction,
        )
        if action.a_end:
            dist = float(np.linalg.norm(gripper - new.target.position))
            outcome = SUCCESS if dist <= self.grasp_radius else FAILURE
        elif new.t >= self.max_steps:
            outcome = TIMEOUT
        else:
            outcome = RUNNING
        return new, observe(new), outcome


# -- scripted demonstrator ----------------------------------------------------

DEFAULT_LEAD_GAIN = 6.0


def scripted_expert(state: WorldState, action_clip: float = ACTION_CLIP,
                    lead_gain: float = DEFAULT_LEAD_GAIN,
                    grasp_radius: float = GRASP_RADIUS) -> Action:
    """Proportional pursuit of the target's lead-compensated position.

    The lead scales with the estimated steps left to reach the target (capped
    by lead_gain), so the aim point converges onto the target on final
    approach instead of hovering ahead of it. Closes the gripper once within
    half the grasp radius, aiming one step ahead so the post-move distance
    stays small.
    """
    target = state.target
    dist = float(np.linalg.norm(target.position - state.gripper_pos))
    if dist <= grasp_radius / 2.0:
        aim = target.position + target.velocity
        logit = 10.0
    else:
        steps_to_reach = dist / action_clip
        aim = target.position + min(lead_gain, steps_to_reach) * target.velocity
        logit = -10.0
    a_pos = np.clip(aim - state.gripper_pos, -action_clip, action_clip)
    return Action.from_logit(a_pos, logit)


def run_expert_episode(env: GridWorld, seed, task: TaskSpec,
                       lead_gain: float = DEFAULT_LEAD_GAIN):
    """Roll the scripted expert; returns (observations, actions, result)."""
    state, obs = env.reset(seed, task)
    observations = [obs]
    actions: list[Action] = []
    outcome = RUNNING
    while outcome == RUNNING:
        act = scripted_expert(state, env.action_clip, lead_gain, env.grasp_radius)
        actions.append(act)
        state, obs, outcome = env.step(state, act)
        observations.append(obs)
    # observations[i] pairs with actions[i]; the terminal observation is dropped
    observations = observations[:-1]
    result = EpisodeResult(outcome, state.t, float(state.t))
    return observations, actions, result
