"""2-D tabletop pick-and-place: a cube on a 4x4 placement grid, a plate on the left.

Coordinates live in the unit square with y pointing down the image. Actions
are (dx, dy, grip_cmd); translation is clamped to +/-0.05 per axis and the
gripper closes whenever grip_cmd > 0.5. Closing with the gripper inside the
cube's footprint grasps it. An episode succeeds when the cube centre sits
inside the plate with the gripper open.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

IMAGE_SIZE = 64
ACTION_DIM = 3
MAX_STEP = 0.05
EXPERT_SPEED = 0.035  # below the clamp: longer, finer-grained demonstrations
# Demonstration perturbations (recorded labels stay clean).
MOTION_NOISE = 0.01
NOISE_MIN_DIST = 0.06
FUMBLE_PROB = 0.3
FUMBLE_RADIUS = 0.15
MAX_EPISODE_STEPS = 200

GRID = 4
GRID_X0, GRID_X1 = 0.4375, 0.9375  # cell width 0.125 -> 8 px
GRID_Y0, GRID_Y1 = 0.125, 0.875  # cell height 0.1875 -> 12 px
CELL_JITTER = 0.03
CUBE_SIZE = 0.16
PLATE_POS = (0.1875, 0.5)
PLATE_RADIUS = 0.1
GRIPPER_HOME = (0.3, 0.1)
ARRIVE_TOL = 1e-6

CUBE_COLORS = {
    "red": (0.85, 0.1, 0.1),
    "green": (0.1, 0.7, 0.2),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.9, 0.85, 0.1),
}
BACKGROUNDS = {
    "table": (0.55, 0.45, 0.35),
    "pink": (0.95, 0.7, 0.8),
    "blue": (0.55, 0.7, 0.95),
    "white": (0.97, 0.97, 0.97),
}
LIGHTING = ("normal", "switch", "blink")
SIZE_SCALES = (0.7, 1.0, 1.6)
PLATE_COLOR = (0.25, 0.25, 0.3)
GRIPPER_OPEN_COLOR = (0.0, 0.9, 0.9)
GRIPPER_CLOSED_COLOR = (1.0, 0.55, 0.0)
BLINK_PERIOD = 5
BLINK_LEVELS = (0.7, 1.3)
SWITCH_RANGE = (0.6, 1.4)


@dataclass(frozen=True)
class RobustnessConfig:
    size_scale: float = 1.0
    cube_color: str = "red"
    background: str = "table"
    lighting: str = "normal"

    def __post_init__(self):
        if self.size_scale <= 0:
            raise ValueError(f"size scale must be positive, got {self.size_scale}")
        if self.cube_color not in CUBE_COLORS:
            raise ValueError(f"unknown cube colour {self.cube_color!r}; choose from {sorted(CUBE_COLORS)}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}; choose from {sorted(BACKGROUNDS)}")
        if self.lighting not in LIGHTING:
            raise ValueError(f"unknown lighting mode {self.lighting!r}; choose from {LIGHTING}")

    def to_dict(self) -> dict:
        return asdict(self)

    def varied_fields(self) -> list[str]:
        base = RobustnessConfig()
        return [k for k, v in asdict(self).items() if getattr(base, k) != v]


_ROBUSTNESS_KEYS = {"size": "size_scale", "color": "cube_color", "background": "background", "lighting": "lighting"}


def parse_robustness(items) -> RobustnessConfig:
    """Build a config from ``key=value`` strings (keys: size, color, background, lighting)."""
    kwargs = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in _ROBUSTNESS_KEYS:
            raise ValueError(f"bad robustness setting {item!r}; expected one of {sorted(_ROBUSTNESS_KEYS)}=value")
        field = _ROBUSTNESS_KEYS[key]
        kwargs[field] = float(value.rstrip("x")) if field == "size_scale" else value.strip()
    return RobustnessConfig(**kwargs)


@dataclass(frozen=True)
class EnvState:
    gripper: tuple[float, float]
    grip_closed: bool
    cube: tuple[float, float]
    cube_size: float
    plate: tuple[float, float]
    plate_radius: float
    held: bool
    step_count: int
    seed: int
    brightness: float = 1.0
    failed: bool = False

    def proprio(self) -> np.ndarray:
        return np.array([self.gripper[0], self.gripper[1], float(self.grip_closed)])


def grid_cell(seed: int) -> int:
    return seed % (GRID * GRID)


def cell_center(cell: int) -> tuple[float, float]:
    row, col = divmod(cell, GRID)
    w = (GRID_X1 - GRID_X0) / GRID
    h = (GRID_Y1 - GRID_Y0) / GRID
    return GRID_X0 + (col + 0.5) * w, GRID_Y0 + (row + 0.5) * h


def reset(seed: int, robustness: RobustnessConfig = RobustnessConfig(), jitter: float = CELL_JITTER) -> EnvState:
    """Initial state for ``seed``: grid cell round-robins with the seed, offset by a seeded jitter."""
    cx, cy = cell_center(grid_cell(seed))
    jx, jy = np.random.default_rng(seed).uniform(-jitter, jitter, size=2) if jitter > 0 else (0.0, 0.0)
    brightness = 1.0
    if robustness.lighting == "switch":
        brightness = float(np.random.default_rng([seed, 1]).uniform(*SWITCH_RANGE))
    return EnvState(
        gripper=GRIPPER_HOME,
        grip_closed=False,
        cube=(cx + float(jx), cy + float(jy)),
        cube_size=CUBE_SIZE * robustness.size_scale,
        plate=PLATE_POS,
        plate_radius=PLATE_RADIUS,
        held=False,
        step_count=0,
        seed=seed,
        brightness=brightness,
    )


def is_success(state: EnvState) -> bool:
    if state.grip_closed or state.held or state.failed:
        return False
    return math.dist(state.cube, state.plate) <= state.plate_radius


def step(state: EnvState, action) -> tuple[EnvState, bool, bool]:
    """Advance one control step; returns (next_state, done, success)."""
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape != (ACTION_DIM,) or not np.isfinite(a).all():
        failed = replace(state, failed=True, step_count=state.step_count + 1)
        return failed, True, False
    dx = float(np.clip(a[0], -MAX_STEP, MAX_STEP))
    dy = float(np.clip(a[1], -MAX_STEP, MAX_STEP))
    gx = min(max(state.gripper[0] + dx, 0.0), 1.0)
    gy = min(max(state.gripper[1] + dy, 0.0), 1.0)
    cube = state.cube
    if state.held:
        cube = (
            min(max(cube[0] + gx - state.gripper[0], 0.0), 1.0),
            min(max(cube[1] + gy - state.gripper[1], 0.0), 1.0),
        )
    close = a[2] > 0.5
    grip, held = state.grip_closed, state.held
    if close and not grip:
        grip = True
        half = state.cube_size / 2
        held = abs(gx - cube[0]) <= half and abs(gy - cube[1]) <= half
    elif not close and grip:
        grip, held = False, False
    nxt = replace(state, gripper=(gx, gy), cube=cube, grip_closed=grip, held=held, step_count=state.step_count + 1)
    success = is_success(nxt)
    return nxt, success or nxt.step_count >= MAX_EPISODE_STEPS, success


def brightness_at(state: EnvState, robustness: RobustnessConfig) -> float:
    if robustness.lighting == "switch":
        return state.brightness
    if robustness.lighting == "blink":
        return BLINK_LEVELS[(state.step_count // BLINK_PERIOD) % 2]
    return 1.0


_PIX = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE


def _to_pixel(v: float) -> int:
    return min(max(int(v * IMAGE_SIZE), 0), IMAGE_SIZE - 1)


def render(state: EnvState, robustness: RobustnessConfig = RobustnessConfig()) -> np.ndarray:
    """Nearest-pixel rendering: background, plate disc, cube square, gripper cross."""
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    img[:] = BACKGROUNDS[robustness.background]
    xs, ys = _PIX[None, :], _PIX[:, None]
    px, py = state.plate
    img[(xs - px) ** 2 + (ys - py) ** 2 <= state.plate_radius**2] = PLATE_COLOR
    half = state.cube_size / 2
    cx, cy = state.cube
    img[(np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)] = CUBE_COLORS[robustness.cube_color]
    col, row = _to_pixel(state.gripper[0]), _to_pixel(state.gripper[1])
    color = GRIPPER_CLOSED_COLOR if state.grip_closed else GRIPPER_OPEN_COLOR
    img[row, max(col - 2, 0) : col + 3] = color
    img[max(row - 2, 0) : row + 3, col] = color
    b = brightness_at(state, robustness)
    if b != 1.0:
        np.clip(img * np.float32(b), 0.0, 1.0, out=img)
    return img


def _toward(src: tuple[float, float], dst: tuple[float, float]) -> tuple[float, float, bool]:
    dx, dy = dst[0] - src[0], dst[1] - src[1]
    arrived = abs(dx) <= ARRIVE_TOL and abs(dy) <= ARRIVE_TOL
    return float(np.clip(dx, -EXPERT_SPEED, EXPERT_SPEED)), float(np.clip(dy, -EXPERT_SPEED, EXPERT_SPEED)), arrived


def expert_action(state: EnvState) -> np.ndarray:
    """Scripted phase machine: reach cube, close, carry to plate centre, open."""
    if state.held:
        dx, dy, arrived = _toward(state.gripper, state.plate)
        if arrived:
            return np.array([0.0, 0.0, 0.0])
        return np.array([dx, dy, 1.0])
    dx, dy, arrived = _toward(state.gripper, state.cube)
    if arrived:
        return np.array([0.0, 0.0, 1.0])
    # An empty closed gripper reopens while it travels.
    return np.array([dx, dy, 0.0])


def _perturbed(state: EnvState, action: np.ndarray, rng: np.random.Generator, fumble: bool) -> tuple[np.ndarray, bool]:
    """Executed action for a noisy rollout; returns (action, fumble still pending)."""
    target = state.plate if state.held else state.cube
    dist = math.dist(state.gripper, target)
    out = action.copy()
    if dist > NOISE_MIN_DIST:
        out[:2] += rng.normal(0.0, MOTION_NOISE, size=2)
    if fumble and not state.grip_closed and not state.held and dist < FUMBLE_RADIUS:
        out[2] = 1.0
        fumble = False
    return out, fumble


def run_expert(
    seed: int,
    robustness: RobustnessConfig = RobustnessConfig(),
    with_images: bool = True,
    perturb: bool = False,
):
    """Roll out the expert; returns (images, states, actions, success).

    With ``perturb`` the executed motion is jittered away from the current target
    and some episodes close the gripper early; the recorded actions are always the
    expert's own, so the demonstrations show how to recover from such mistakes.
    """
    state = reset(seed, robustness)
    rng = np.random.default_rng([seed, 2])
    fumble = perturb and rng.random() < FUMBLE_PROB
    images, states, actions = [], [], []
    done = success = False
    while not done:
        action = expert_action(state)
        if with_images:
            images.append(render(state, robustness))
        states.append(state.proprio())
        actions.append(action)
        executed = action
        if perturb:
            executed, fumble = _perturbed(state, action, rng, fumble)
        state, done, success = step(state, executed)
    imgs = np.stack(images) if with_images else None
    return imgs, np.stack(states), np.stack(actions), success
