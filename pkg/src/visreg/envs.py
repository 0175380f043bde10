"""Desk-scale MDPs: the 3x3 gridworld and a pixel-rendered cartpole.

Both environments expose the same contract::

    env.reset(rng) -> state
    env.step(action) -> (state, reward, done)
    env.payload() -> np.ndarray

``payload`` is the randomization-free content of the current observation
(grid position, or a stack of rendered label masks).  A randomizer turns a
payload into the actual network input, so dynamics never see it.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


class EpisodeOver(RuntimeError):
    """Raised when stepping an environment whose episode has finished."""


@dataclass(frozen=True)
class MDPSpec:
    action_count: int
    gamma: float
    time_limit: int
    r_max: float


# --- gridworld ----------------------------------------------------------------

UP, RIGHT = 0, 1
GRID_SIZE = 3
GOAL = (2, 2)
FIRE = (1, 1)


@dataclass(frozen=True)
class GridState:
    x: int = 0
    y: int = 0
    t: int = 0
    done: bool = False


def grid_reset() -> GridState:
    return GridState(0, 0, 0)


def grid_step(s: GridState, a: int, time_limit: int = 10) -> tuple[GridState, float, bool]:
    if s.done or s.t >= time_limit:
        raise EpisodeOver("gridworld episode already finished")
    if a not in (UP, RIGHT):
        raise ValueError(f"invalid gridworld action {a!r}")
    x, y = (s.x, s.y + 1) if a == UP else (s.x + 1, s.y)
    t = s.t + 1
    if not (0 <= x < GRID_SIZE and 0 <= y < GRID_SIZE):
        x, y, reward, terminal = s.x, s.y, -1.0, False
    elif (x, y) == GOAL:
        reward, terminal = 1.0, True
    elif (x, y) == FIRE:
        reward, terminal = -1.0, True
    else:
        reward, terminal = 0.0, False
    done = terminal or t >= time_limit
    return GridState(x, y, t, done), reward, done


class GridWorld:
    kind = "gridworld"
    n_actions = 2

    def __init__(self, time_limit: int = 10, gamma: float = 1.0):
        if time_limit < 1:
            raise ValueError("time_limit must be >= 1")
        self.time_limit = time_limit
        self.gamma = gamma
        self.state = grid_reset()

    @property
    def spec(self) -> MDPSpec:
        return MDPSpec(self.n_actions, self.gamma, self.time_limit, 1.0)

    @property
    def payload_shape(self):
        return (2,)

    def reset(self, rng=None) -> GridState:
        self.state = grid_reset()
        return self.state

    def step(self, action: int):
        self.state, r, done = grid_step(self.state, int(action), self.time_limit)
        return self.state, r, done

    def payload(self) -> np.ndarray:
        return grid_payload(self.state)

    def blank_payload(self) -> np.ndarray:
        return np.zeros(2)

    @staticmethod
    def positions() -> list[GridState]:
        return [GridState(x, y) for y in range(GRID_SIZE) for x in range(GRID_SIZE)]


def grid_payload(s: GridState) -> np.ndarray:
    return np.array([s.x, s.y], dtype=np.float64)


# --- cartpole -----------------------------------------------------------------

LEFT, PUSH_RIGHT = 0, 1


@dataclass(frozen=True)
class CartpoleParams:
    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    force: float = 10.0
    tau: float = 0.02
    angle_threshold: float = 12 * 2 * math.pi / 360
    x_threshold: float = 2.4
    time_limit: int = 200


@dataclass(frozen=True)
class CartpoleState:
    x: float = 0.0
    x_dot: float = 0.0
    theta: float = 0.0
    theta_dot: float = 0.0
    t: int = 0
    done: bool = False


def cartpole_reset(rng, params: CartpoleParams = CartpoleParams()) -> CartpoleState:
    """Initial state with every component drawn from U[-0.05, 0.05]."""
    x, x_dot, theta, theta_dot = (float(v) for v in rng.uniform(-0.05, 0.05, size=4))
    return CartpoleState(x, x_dot, theta, theta_dot, 0)


def cartpole_step(s: CartpoleState, a: int, params: CartpoleParams = CartpoleParams()):
    """Semi-implicit Euler step: velocities update first, positions use them."""
    if s.done:
        raise EpisodeOver("cartpole episode already finished")
    if a not in (LEFT, PUSH_RIGHT):
        raise ValueError(f"invalid cartpole action {a!r}")
    p = params
    force = p.force if a == PUSH_RIGHT else -p.force
    total_mass = p.cart_mass + p.pole_mass
    polemass_length = p.pole_mass * p.half_length
    cos, sin = math.cos(s.theta), math.sin(s.theta)
    temp = (force + polemass_length * s.theta_dot ** 2 * sin) / total_mass
    theta_acc = (p.gravity * sin - cos * temp) / (
        p.half_length * (4.0 / 3.0 - p.pole_mass * cos ** 2 / total_mass))
    x_acc = temp - polemass_length * theta_acc * cos / total_mass

    x_dot = s.x_dot + p.tau * x_acc
    x = s.x + p.tau * x_dot
    theta_dot = s.theta_dot + p.tau * theta_acc
    theta = s.theta + p.tau * theta_dot
    t = s.t + 1

    failed = abs(x) > p.x_threshold or abs(theta) > p.angle_threshold
    done = failed or t >= p.time_limit
    reward = 0.0 if failed else 1.0
    return CartpoleState(x, x_dot, theta, theta_dot, t, done), reward, done


# rendering: label 0 = background, 1 = cart, 2 = pole
BACKGROUND, CART, POLE = 0, 1, 2
CART_COLOR = (0.0, 0.0, 0.0)
POLE_COLOR = (0.8, 0.6, 0.4)


def render_labels(s: CartpoleState, size: int = 32,
                  params: CartpoleParams = CartpoleParams()) -> np.ndarray:
    """Per-pixel class map of a cartpole state, shape (size, size), uint8.

    Geometry is in screen fractions so every resolution shows the same
    picture; the pole is drawn longer than its physical length so that
    small angles stay visible at low resolution.
    """
    h = w = size
    world_width = 2 * params.x_threshold
    cx = (s.x + params.x_threshold) / world_width * w
    cart_w, cart_h = 0.14 * w, 0.10 * h
    cart_top = 0.72 * h
    pole_len = 0.45 * h
    pole_half_width = max(0.55, 0.03 * w)

    rows = np.arange(h)[:, None] + 0.5
    cols = np.arange(w)[None, :] + 0.5
    labels = np.zeros((h, w), dtype=np.uint8)

    cart = (np.abs(cols - cx) <= cart_w / 2) & (rows >= cart_top) & (rows <= cart_top + cart_h)
    labels[cart] = CART

    # pole: segment from the axle upward, tilted by theta (positive = clockwise)
    x0, y0 = cx, cart_top
    x1 = x0 + pole_len * math.sin(s.theta)
    y1 = y0 - pole_len * math.cos(s.theta)
    dx, dy = x1 - x0, y1 - y0
    u = np.clip(((cols - x0) * dx + (rows - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    dist = np.hypot(cols - (x0 + u * dx), rows - (y0 + u * dy))
    labels[dist <= pole_half_width] = POLE
    return labels


def paint(labels: np.ndarray, background) -> np.ndarray:
    """Colour label maps.

    ``labels`` has shape (..., H, W); ``background`` is one RGB triple or an
    array with one triple per leading index.  Returns (..., H, W, 3).
    """
    bg = np.asarray(background, dtype=np.float64)
    lead = labels.shape[:-2]
    palette = np.empty(bg.shape[:-1] + (3, 3))
    palette[..., BACKGROUND, :] = bg
    palette[..., CART, :] = CART_COLOR
    palette[..., POLE, :] = POLE_COLOR
    if bg.ndim == 1:
        return palette[labels]
    # one palette per leading batch index
    nb = bg.shape[0]
    idx = np.arange(nb).reshape((nb,) + (1,) * (len(lead) - 1 + 2))
    return palette[idx, labels]


def paint_planes(labels: np.ndarray, background) -> np.ndarray:
    """Like ``paint`` but channels-first: (..., k, H, W) -> (..., 3k, H, W).

    Frame-major, RGB-minor channel order.  This is the observation hot path,
    so it uses one table lookup per item and channel.
    """
    bg = np.asarray(background, dtype=np.float64)
    if bg.ndim == 1:
        return paint_planes(labels[None], bg[None])[0]
    n = bg.shape[0]
    if labels.shape[0] != n:
        raise ValueError("one background per batch item")
    lut = np.empty((n, 3, 3))
    lut[:, :, BACKGROUND] = bg
    lut[:, :, CART] = CART_COLOR
    lut[:, :, POLE] = POLE_COLOR
    inner = labels.shape[1:-2]
    out = np.empty((n,) + inner + (3,) + labels.shape[-2:])
    for i in range(n):
        for c in range(3):
            np.take(lut[i, c], labels[i], out=out[i, ..., c, :, :])
    return out.reshape((n,) + inner[:-1] + (3 * inner[-1],) + labels.shape[-2:])


def render(s: CartpoleState, background, size: int = 32,
           params: CartpoleParams = CartpoleParams()) -> np.ndarray:
    """RGB raster of shape (size, size, 3), values in [0, 1]."""
    bg = np.asarray(background, dtype=np.float64)
    if bg.shape != (3,) or np.any(bg < 0) or np.any(bg > 1):
        raise ValueError(f"background must be an RGB triple in [0, 1], got {background!r}")
    return paint(render_labels(s, size, params), bg)


def write_ppm(raster: np.ndarray, path) -> None:
    """Write an (H, W, 3) raster in [0, 1] as binary PPM (P6)."""
    img = np.clip(np.rint(np.asarray(raster) * 255), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(Path(path), "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def stack_frames(history, new_frame, k: int):
    """Push ``new_frame`` onto ``history`` and return the k newest, oldest first.

    An empty history is seeded by repeating ``new_frame`` k times.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    history = list(history)
    if history and np.shape(history[-1]) != np.shape(new_frame):
        raise ValueError(f"frame shape {np.shape(new_frame)} does not match history {np.shape(history[-1])}")
    if not history:
        history = [new_frame] * (k - 1)
    history.append(new_frame)
    return history[-k:]


class CartPole:
    kind = "cartpole"
    n_actions = 2

    def __init__(self, params: CartpoleParams = CartpoleParams(), resolution: int = 32,
                 frame_stack: int = 3, forced_actions: int = 2, gamma: float = 0.99):
        self.params = params
        self.resolution = resolution
        self.k = frame_stack
        self.n_forced = forced_actions
        self.gamma = gamma
        self.state = CartpoleState()
        self.forced_actions: list[int] = []
        self._frames: deque = deque(maxlen=frame_stack)

    @property
    def spec(self) -> MDPSpec:
        return MDPSpec(self.n_actions, self.gamma, self.params.time_limit, 1.0)

    @property
    def payload_shape(self):
        return (self.k, self.resolution, self.resolution)

    def _push(self):
        frame = render_labels(self.state, self.resolution, self.params)
        self._frames = deque(stack_frames(self._frames, frame, self.k), maxlen=self.k)

    def reset(self, rng) -> CartpoleState:
        self.state = cartpole_reset(rng, self.params)
        self._frames.clear()
        self._push()
        self.forced_actions = [int(rng.integers(self.n_actions)) for _ in range(self.n_forced)]
        for a in self.forced_actions:
            self.state, _, _ = cartpole_step(self.state, a, self.params)
            self._push()
        self.state = replace(self.state, t=0, done=False)
        return self.state

    def step(self, action: int):
        self.state, r, done = cartpole_step(self.state, int(action), self.params)
        self._push()
        return self.state, r, done

    def payload(self) -> np.ndarray:
        return np.stack(self._frames)

    def blank_payload(self) -> np.ndarray:
        return np.zeros(self.payload_shape, np.uint8)


def make_env(kind: str, **kwargs):
    if kind == "gridworld":
        return GridWorld(**kwargs)
    if kind == "cartpole":
        return CartPole(**kwargs)
    raise ValueError(f"unknown environment {kind!r}")
