#!/usr/bin/env python3
"""
Built-in control environments for pixel-based RL
Deterministic 2D physics rendered to 100x100 RGB frames by a small rasterizer,
standing in for the cartpole, reacher and ball-in-cup control tasks
"""

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .logging_config import get_logger
from .utils import make_rng

logger = get_logger("envsim")

FRAME_SIZE = 100
FRAME_STACK = 3
BACKGROUND = (214, 222, 232)


@dataclass(frozen=True)
class EnvSpec:
    name: str
    action_dim: int
    action_repeat: int
    episode_length: int = 1000
    dt: float = 0.01

    def __post_init__(self):
        if self.action_dim < 1:
            raise ValueError(f"action_dim must be >= 1, got {self.action_dim}")
        if self.action_repeat < 1 or self.episode_length % self.action_repeat:
            raise ValueError(
                f"action_repeat {self.action_repeat} must divide episode_length {self.episode_length}"
            )

    @property
    def agent_steps_per_episode(self):
        return self.episode_length // self.action_repeat


ENV_SPECS = {
    "cartpole_swingup": EnvSpec("cartpole_swingup", action_dim=1, action_repeat=8),
    "reacher_easy": EnvSpec("reacher_easy", action_dim=2, action_repeat=4),
    "cup_catch": EnvSpec("cup_catch", action_dim=1, action_repeat=4),
}


@dataclass
class PhysicsState:
    """Underlying MDP state; never shown to the agent except through render()"""
    env_name: str
    q: np.ndarray
    qd: np.ndarray
    aux: np.ndarray = field(default_factory=lambda: np.zeros(0))
    step: int = 0

    def copy(self):
        return PhysicsState(self.env_name, self.q.copy(), self.qd.copy(), self.aux.copy(), self.step)

    def to_vector(self):
        return np.concatenate([[float(self.step)], self.q, self.qd, self.aux])

    def is_finite(self):
        return bool(np.all(np.isfinite(self.to_vector())))


@dataclass
class PixelObservation:
    frames: tuple

    def __post_init__(self):
        if len(self.frames) != FRAME_STACK:
            raise ValueError(f"expected {FRAME_STACK} frames, got {len(self.frames)}")
        for frame in self.frames:
            if frame.shape != (3, FRAME_SIZE, FRAME_SIZE) or frame.dtype != np.uint8:
                raise ValueError(f"frames must be uint8 3x{FRAME_SIZE}x{FRAME_SIZE}, got {frame.dtype} {frame.shape}")

    @property
    def latest(self):
        return self.frames[-1]

    def stacked(self):
        """Channel-concatenated 9x100x100 stack, oldest frame first"""
        return np.concatenate(self.frames, axis=0)


@dataclass
class StepResult:
    observation: PixelObservation
    reward: float
    done: bool
    physics_frames_consumed: int
    # True terminations only; time-limit ends keep this False
    terminated: bool = False


# ---------------------------------------------------------------------------
# Rasterizer

_PIXEL_CENTERS = np.arange(FRAME_SIZE) + 0.5


def blank_canvas(color=BACKGROUND):
    canvas = np.empty((FRAME_SIZE, FRAME_SIZE, 3), dtype=np.uint8)
    canvas[:] = color
    return canvas


def fill_rect(canvas, col0, col1, row0, row1, color):
    """Fill pixels whose centers fall inside [col0, col1] x [row0, row1]"""
    cols = (_PIXEL_CENTERS >= col0) & (_PIXEL_CENTERS <= col1)
    rows = (_PIXEL_CENTERS >= row0) & (_PIXEL_CENTERS <= row1)
    canvas[np.ix_(rows, cols)] = color


def fill_circle(canvas, col, row, radius, color):
    dist2 = (_PIXEL_CENTERS[:, None] - row) ** 2 + (_PIXEL_CENTERS[None, :] - col) ** 2
    canvas[dist2 <= radius ** 2] = color


def draw_segment(canvas, start, end, width, color):
    """Draw a thick segment between two (col, row) points"""
    c0, r0 = start
    c1, r1 = end
    dc, dr = c1 - c0, r1 - r0
    length2 = dc * dc + dr * dr
    pc = _PIXEL_CENTERS[None, :] - c0
    pr = _PIXEL_CENTERS[:, None] - r0
    if length2 == 0.0:
        t = np.zeros_like(pc + pr)
    else:
        t = np.clip((pc * dc + pr * dr) / length2, 0.0, 1.0)
    dist2 = (pc - t * dc) ** 2 + (pr - t * dr) ** 2
    canvas[dist2 <= (width / 2.0) ** 2] = color


def to_chw(canvas):
    return np.ascontiguousarray(canvas.transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# Tasks

class ControlTask:
    """Dynamics, reward and drawing for one environment"""
    name = None
    scale = 1.0
    origin = (FRAME_SIZE / 2.0, FRAME_SIZE / 2.0)

    def initial_state(self, rng):
        raise NotImplementedError

    def physics_step(self, state, action, dt):
        raise NotImplementedError

    def reward(self, state):
        raise NotImplementedError

    def draw(self, canvas, state):
        raise NotImplementedError

    def render(self, state):
        canvas = blank_canvas()
        self.draw(canvas, state)
        return to_chw(canvas)

    def to_pixel(self, x, y):
        """World (x, y) with y up -> pixel (col, row)"""
        return self.origin[0] + x * self.scale, self.origin[1] - y * self.scale


class CartpoleSwingup(ControlTask):
    """Cart on a rail with a free pole; theta = 0 is upright, pi hangs down"""
    name = "cartpole_swingup"
    scale = 20.0
    origin = (FRAME_SIZE / 2.0, 55.0)

    cart_mass = 1.0
    pole_mass = 0.1
    half_length = 0.5
    gravity = 9.8
    force_scale = 10.0
    rail_limit = 1.8

    cart_color = (200, 120, 40)
    pole_color = (70, 90, 160)
    rail_color = (120, 120, 120)

    def initial_state(self, rng):
        theta = np.pi + rng.uniform(-0.05, 0.05)
        return PhysicsState(self.name, q=np.array([0.0, theta]), qd=np.zeros(2))

    def physics_step(self, state, action, dt):
        x, theta = state.q
        x_dot, theta_dot = state.qd
        force = self.force_scale * float(action[0])

        sin, cos = np.sin(theta), np.cos(theta)
        total_mass = self.cart_mass + self.pole_mass
        pole_moment = self.pole_mass * self.half_length

        temp = (force + pole_moment * theta_dot ** 2 * sin) / total_mass
        theta_acc = (self.gravity * sin - cos * temp) / (
            self.half_length * (4.0 / 3.0 - self.pole_mass * cos ** 2 / total_mass)
        )
        x_acc = temp - pole_moment * theta_acc * cos / total_mass

        # semi-implicit Euler: velocities first, positions from the new velocities
        x_dot = x_dot + dt * x_acc
        theta_dot = theta_dot + dt * theta_acc
        x = x + dt * x_dot
        theta = np.remainder(theta + dt * theta_dot, 2 * np.pi)

        if abs(x) > self.rail_limit:
            x = float(np.clip(x, -self.rail_limit, self.rail_limit))
            x_dot = 0.0

        return PhysicsState(self.name, np.array([x, theta]), np.array([x_dot, theta_dot]),
                            state.aux.copy(), state.step + 1)

    def reward(self, state):
        return float((1.0 + np.cos(state.q[1])) / 2.0)

    def draw(self, canvas, state):
        x, theta = state.q
        rail_col0, rail_row = self.to_pixel(-self.rail_limit - 0.3, 0.0)
        rail_col1, _ = self.to_pixel(self.rail_limit + 0.3, 0.0)
        fill_rect(canvas, rail_col0, rail_col1, rail_row - 0.5, rail_row + 0.5, self.rail_color)

        col, row = self.to_pixel(x, 0.0)
        fill_rect(canvas, col - 6.0, col + 6.0, row - 3.0, row + 3.0, self.cart_color)

        pole_length = 2.0 * self.half_length
        tip = self.to_pixel(x + pole_length * np.sin(theta), pole_length * np.cos(theta))
        draw_segment(canvas, (col, row), tip, 2.5, self.pole_color)


class ReacherEasy(ControlTask):
    """Velocity-controlled two-link arm reaching a fixed target"""
    name = "reacher_easy"
    scale = 180.0

    link_lengths = (0.12, 0.12)
    velocity_scale = 2.0
    target_radius_range = (0.05, 0.20)

    arm_color = (60, 60, 150)
    tip_color = (230, 200, 40)
    target_color = (200, 50, 50)

    @property
    def reach(self):
        return float(sum(self.link_lengths))

    def initial_state(self, rng):
        joints = rng.uniform(-np.pi, np.pi, size=2)
        target_angle = rng.uniform(-np.pi, np.pi)
        target_radius = rng.uniform(*self.target_radius_range)
        target = target_radius * np.array([np.cos(target_angle), np.sin(target_angle)])
        return PhysicsState(self.name, q=joints, qd=np.zeros(2), aux=target)

    def physics_step(self, state, action, dt):
        qd = self.velocity_scale * np.asarray(action, dtype=np.float64)
        q = np.remainder(state.q + dt * qd + np.pi, 2 * np.pi) - np.pi
        return PhysicsState(self.name, q, qd, state.aux.copy(), state.step + 1)

    def joint_positions(self, state):
        l1, l2 = self.link_lengths
        q1, q2 = state.q
        elbow = l1 * np.array([np.cos(q1), np.sin(q1)])
        tip = elbow + l2 * np.array([np.cos(q1 + q2), np.sin(q1 + q2)])
        return elbow, tip

    def reward(self, state):
        _, tip = self.joint_positions(state)
        distance = float(np.linalg.norm(tip - state.aux))
        return max(0.0, 1.0 - distance / self.reach)

    def draw(self, canvas, state):
        elbow, tip = self.joint_positions(state)
        fill_circle(canvas, *self.to_pixel(*state.aux), 4.5, self.target_color)
        base = self.to_pixel(0.0, 0.0)
        draw_segment(canvas, base, self.to_pixel(*elbow), 3.0, self.arm_color)
        draw_segment(canvas, self.to_pixel(*elbow), self.to_pixel(*tip), 3.0, self.arm_color)
        fill_circle(canvas, *self.to_pixel(*tip), 2.5, self.tip_color)


class CupCatch(ControlTask):
    """
    Cup moving along a horizontal rail with a ball on an elastic tether.
    q = (cup_x, ball_x, ball_y), qd holds the matching velocities.
    """
    name = "cup_catch"
    scale = 100.0

    cup_height = 0.15
    cup_half_width = 0.06
    cup_depth = 0.08
    cup_limit = 0.4
    ball_radius = 0.02
    tether_length = 0.3
    tether_stiffness = 600.0
    gravity = 9.8
    velocity_scale = 2.0
    world_limit = 0.5

    cup_color = (90, 60, 30)
    ball_color = (200, 60, 60)
    tether_color = (150, 150, 150)

    def initial_state(self, rng):
        angle = rng.uniform(-0.4, 0.4)
        radius = 0.9 * self.tether_length
        ball = np.array([radius * np.sin(angle), self.cup_height - radius * np.cos(angle)])
        return PhysicsState(self.name, q=np.array([0.0, ball[0], ball[1]]), qd=np.zeros(3))

    def _inside_cup(self, cup_x, ball_x, ball_y):
        return (abs(ball_x - cup_x) < self.cup_half_width
                and self.cup_height <= ball_y <= self.cup_height + self.cup_depth)

    def physics_step(self, state, action, dt):
        cup_x, ball_x, ball_y = state.q
        _, ball_vx, ball_vy = state.qd

        cup_vx = self.velocity_scale * float(action[0])
        cup_x = cup_x + dt * cup_vx
        if abs(cup_x) > self.cup_limit:
            cup_x = float(np.clip(cup_x, -self.cup_limit, self.cup_limit))
            cup_vx = 0.0

        acc_x, acc_y = 0.0, -self.gravity
        dx, dy = ball_x - cup_x, ball_y - self.cup_height
        distance = np.hypot(dx, dy)
        if distance > self.tether_length:
            # the tether only pulls when stretched
            pull = self.tether_stiffness * (distance - self.tether_length) / distance
            acc_x -= pull * dx
            acc_y -= pull * dy

        ball_vx = ball_vx + dt * acc_x
        ball_vy = ball_vy + dt * acc_y
        new_x = ball_x + dt * ball_vx
        new_y = ball_y + dt * ball_vy

        floor = self.cup_height + self.ball_radius
        inside_walls = abs(new_x - cup_x) < self.cup_half_width
        if inside_walls and ball_y >= floor > new_y and new_y > self.cup_height - self.cup_depth:
            new_y = floor
            ball_vy = max(ball_vy, 0.0)

        # the only way in is over the rim
        was_outside = not self._inside_cup(state.q[0], ball_x, ball_y)
        below_rim = ball_y <= self.cup_height + self.cup_depth
        if was_outside and below_rim and self._inside_cup(cup_x, new_x, new_y):
            if ball_y < self.cup_height:
                new_y = self.cup_height - self.ball_radius
                ball_vy = min(ball_vy, 0.0)
            else:
                side = 1.0 if ball_x >= state.q[0] else -1.0
                new_x = cup_x + side * (self.cup_half_width + self.ball_radius)
                ball_vx = cup_vx

        if self._inside_cup(cup_x, new_x, new_y):
            wall = self.cup_half_width - self.ball_radius
            if abs(new_x - cup_x) > wall:
                new_x = cup_x + float(np.clip(new_x - cup_x, -wall, wall))
                ball_vx = cup_vx

        if abs(new_x) > self.world_limit:
            new_x = float(np.clip(new_x, -self.world_limit, self.world_limit))
            ball_vx = 0.0
        if abs(new_y) > self.world_limit:
            new_y = float(np.clip(new_y, -self.world_limit, self.world_limit))
            ball_vy = 0.0

        return PhysicsState(self.name, np.array([cup_x, new_x, new_y]),
                            np.array([cup_vx, ball_vx, ball_vy]), state.aux.copy(), state.step + 1)

    def reward(self, state):
        cup_x, ball_x, ball_y = state.q
        return 1.0 if self._inside_cup(cup_x, ball_x, ball_y) else 0.0

    def draw(self, canvas, state):
        cup_x, ball_x, ball_y = state.q
        anchor = self.to_pixel(cup_x, self.cup_height)
        ball = self.to_pixel(ball_x, ball_y)
        draw_segment(canvas, anchor, ball, 1.0, self.tether_color)

        left = self.to_pixel(cup_x - self.cup_half_width, self.cup_height)
        right = self.to_pixel(cup_x + self.cup_half_width, self.cup_height)
        rim = self.cup_depth * self.scale
        draw_segment(canvas, left, right, 2.0, self.cup_color)
        draw_segment(canvas, left, (left[0], left[1] - rim), 2.0, self.cup_color)
        draw_segment(canvas, right, (right[0], right[1] - rim), 2.0, self.cup_color)

        fill_circle(canvas, *ball, self.ball_radius * self.scale, self.ball_color)


TASKS = {task.name: task for task in (CartpoleSwingup(), ReacherEasy(), CupCatch())}


def get_task(name):
    if name not in TASKS:
        raise ValueError(f"Unknown environment '{name}'. Available: {sorted(TASKS)}")
    return TASKS[name]


def physics_step(state, action, dt):
    """Advance a physics state by one step of length dt"""
    return get_task(state.env_name).physics_step(state, np.clip(action, -1.0, 1.0), dt)


def render(state):
    """Rasterize a physics state to a 3x100x100 uint8 image"""
    return get_task(state.env_name).render(state)


# ---------------------------------------------------------------------------
# Episodes

class ReplayLogWriter:
    """Appends (state, action, reward) records as little-endian float32"""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, state, action, reward):
        record = np.concatenate([state.to_vector(), np.asarray(action, dtype=np.float64), [reward]])
        with open(self.path, "ab") as f:
            f.write(record.astype("<f4").tobytes())

    @staticmethod
    def record_size(spec, state):
        return state.to_vector().size + spec.action_dim + 1


def read_replay_log(path, record_size):
    data = np.fromfile(path, dtype="<f4")
    if data.size % record_size:
        raise ValueError(f"Replay log {path} is truncated: {data.size} values, record size {record_size}")
    return data.reshape(-1, record_size)


class ControlEnv:
    """One environment instance with action repeat and 3-frame stacking"""

    def __init__(self, spec, replay_log=None):
        self.spec = spec
        self.task = get_task(spec.name)
        self.replay_log = replay_log
        self.state = None
        self._frames = deque(maxlen=FRAME_STACK)
        self._done = True

    @property
    def observation(self):
        return PixelObservation(tuple(self._frames))

    def reset(self, seed):
        rng = make_rng(seed)
        self.state = self.task.initial_state(rng)
        frame = self.task.render(self.state)
        self._frames.clear()
        for _ in range(FRAME_STACK):
            self._frames.append(frame)
        self._done = False
        return self.observation

    def step(self, action):
        if self.state is None:
            raise RuntimeError("step() called before reset()")
        if self._done:
            raise RuntimeError("step() called after the episode ended; call reset() first")

        action = np.clip(np.asarray(action, dtype=np.float64).reshape(-1), -1.0, 1.0)
        if action.shape != (self.spec.action_dim,):
            raise ValueError(f"{self.spec.name} expects {self.spec.action_dim} action dims, got {action.shape}")

        reward = 0.0
        consumed = 0
        for _ in range(self.spec.action_repeat):
            self.state = self.task.physics_step(self.state, action, self.spec.dt)
            reward += self.task.reward(self.state)
            consumed += 1
            if self.state.step >= self.spec.episode_length:
                self._done = True
                break

        if self.replay_log is not None:
            self.replay_log.append(self.state, action, reward)

        self._frames.append(self.task.render(self.state))
        return StepResult(self.observation, reward, self._done, consumed)

    def get_state(self):
        return {
            "physics": None if self.state is None else self.state.copy(),
            "frames": [f.copy() for f in self._frames],
            "done": self._done,
        }

    def set_state(self, snapshot):
        self.state = None if snapshot["physics"] is None else snapshot["physics"].copy()
        self._frames.clear()
        for frame in snapshot["frames"]:
            self._frames.append(frame.copy())
        self._done = snapshot["done"]


def make_env(name, episode_length=None, replay_log=None, action_repeat=None):
    """
    Build an environment by name

    Args:
        name (str): One of ENV_SPECS
        episode_length (int): Optional override of the 1000-step episode length
        replay_log (ReplayLogWriter): Optional binary capture of every agent step
        action_repeat (int): Optional override of the per-task action repeat

    Returns:
        ControlEnv: Environment ready for reset()
    """
    if name not in ENV_SPECS:
        raise ValueError(f"Unknown environment '{name}'. Available: {sorted(ENV_SPECS)}")
    spec = ENV_SPECS[name]
    if episode_length is not None or action_repeat is not None:
        spec = EnvSpec(
            spec.name,
            spec.action_dim,
            spec.action_repeat if action_repeat is None else action_repeat,
            spec.episode_length if episode_length is None else episode_length,
            spec.dt,
        )
    logger.debug(f"Created environment {spec}")
    return ControlEnv(spec, replay_log=replay_log)
