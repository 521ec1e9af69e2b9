"""Scripted generator of labelled two-vehicle highway scenes.

Trajectories are assembled from constant-acceleration speed ramps, quintic
lane changes and sinusoidal lateral excursions, then perturbed with Gaussian
position noise. Every scene is a pure function of its :class:`ScenarioSpec`
and the map.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ParameterError
from .scene_data import ABNORMAL, IGNORED, NORMAL, MapSpec, Scene, default_map

NORMAL_KINDS = ("side_by_side", "overtaking", "following", "opposite_directions")
ANOMALY_KINDS = (
    "aggressive_overtaking",
    "pushing_aside",
    "tailgating",
    "off_road",
    "wrong_way",
    "skidding",
    "left_spreading",
    "right_spreading",
    "reeving",
)
KINDS = NORMAL_KINDS + ANOMALY_KINDS

CRUISE = (20.0, 30.0)  # m/s
LANE_CHANGE_STEPS = (25, 35)


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    duration: int = 50
    noise_std: float = 0.005
    seed: int = 0
    anomaly_window: Optional[tuple] = None
    n_vehicles: int = 2
    dt: float = 0.1
    ignore_width: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown scenario kind {self.kind!r}")
        if self.duration < 2:
            raise ParameterError("duration must be at least 2")
        if self.n_vehicles < 2:
            raise ParameterError("scenarios script two interacting vehicles; n_vehicles must be >= 2")
        if self.noise_std < 0:
            raise ParameterError("noise_std must be non-negative")
        if self.anomaly_window is not None:
            if self.kind in NORMAL_KINDS:
                raise ParameterError(f"normal kind {self.kind!r} cannot carry an anomaly window")
            a, b = self.anomaly_window
            if not (0 <= a < b <= self.duration):
                raise ParameterError(f"anomaly window {self.anomaly_window} outside [0, {self.duration})")

    @property
    def is_anomalous(self) -> bool:
        return self.kind in ANOMALY_KINDS


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * u * (10 - 15 * u + 6 * u * u)


class _Track:
    """One vehicle: signed x-velocity per step and lateral position per timestep."""

    def __init__(self, T, dt, x0, y0, speed, direction):
        self.T, self.dt, self.x0 = T, dt, x0
        self.direction = direction
        self.v = np.full(T, speed * direction, dtype=np.float64)
        self.y = np.full(T, y0, dtype=np.float64)

    def ramp_speed(self, t0, n, speed):
        """Constant acceleration from the speed at ``t0`` to ``speed`` over ``n`` steps."""
        t0 = max(int(t0), 0)
        if t0 >= self.T:
            return
        n = max(int(n), 1)
        cur = self.v[t0]
        target = speed * self.direction
        k = np.arange(1, n + 1)
        seg = cur + (target - cur) * k / n
        end = min(t0 + n, self.T)
        self.v[t0:end] = seg[: end - t0]
        self.v[end:] = target

    def decelerate(self, t0, t1, accel, floor=3.0):
        """Brake at ``accel`` m/s^2 on [t0, t1), never below ``floor`` m/s."""
        t0, t1 = max(int(t0), 0), min(int(t1), self.T)
        speed = abs(self.v[t0]) if t0 < self.T else 0.0
        for t in range(t0, t1):
            speed = max(speed - accel * self.dt, floor)
            self.v[t] = speed * self.direction
        self.v[t1:] = speed * self.direction

    def shift(self, t0, n, dy):
        t = np.arange(self.T)
        self.y += dy * _smoothstep((t - t0) / max(n, 1))

    def bump(self, t0, n, amp):
        t = np.arange(self.T)
        u = (t - t0) / max(n, 1)
        inside = (u >= 0) & (u <= 1)
        self.y += np.where(inside, amp * np.sin(np.pi * u), 0.0)

    def oscillate(self, t0, t1, amp, period):
        t = np.arange(self.T)
        inside = (t >= t0) & (t < t1)
        self.y += np.where(inside, amp * np.sin(2 * np.pi * (t - t0) / period), 0.0)

    def positions(self):
        x = self.x0 + self.dt * np.concatenate([[0.0], np.cumsum(self.v[:-1])])
        return np.stack([x, self.y], axis=-1)


class _Builder:
    def __init__(self, spec: ScenarioSpec, map: MapSpec):
        self.spec, self.map = spec, map
        self.T, self.dt = spec.duration, spec.dt
        self.rng = np.random.default_rng(spec.seed)
        self.tracks: list[_Track] = []
        self.margin = None

    def u(self, lo, hi):
        return float(self.rng.uniform(lo, hi))

    def direction(self):
        return int(self.rng.choice(sorted(set(self.map.lane_direction))))

    def lanes(self, direction):
        """Lanes travelling in ``direction``, innermost (next to divider) first."""
        ks = [k for k, d in enumerate(self.map.lane_direction) if d == direction]
        return sorted(ks, key=lambda k: abs(self.map.lane_centers_y[k] - self.map.divider_y))

    def toward_divider(self, lane):
        return 1.0 if self.map.lane_centers_y[lane] < self.map.divider_y else -1.0

    def left_sign(self, direction):
        # facing +x, left is +y
        return float(direction)

    def start_x(self, direction, ahead=0.0):
        if self.margin is None:
            self.margin = self.u(20.0, 50.0)
        if direction > 0:
            return self.map.x_min + self.margin + ahead
        return self.map.x_max - self.margin - ahead

    def track(self, lane, speed, direction, ahead=0.0):
        tr = _Track(self.T, self.dt, self.start_x(direction, ahead), self.map.lane_centers_y[lane], speed, direction)
        self.tracks.append(tr)
        return tr

    def window(self, min_len, max_len, earliest=None):
        """Anomaly window: the explicit one if given, else a random fit inside the scene."""
        if self.spec.anomaly_window is not None:
            return tuple(int(v) for v in self.spec.anomaly_window)
        T = self.T
        length = int(self.rng.integers(min_len, max_len + 1))
        length = max(1, min(length, T - 3))
        lo = max(2, T // 5 if earliest is None else earliest)
        hi = T - length
        lo = min(lo, hi)
        a = int(self.rng.integers(lo, hi + 1))
        return a, a + length


# -- normal behaviours ---------------------------------------------------------

def _following(g: _Builder):
    d = g.direction()
    lane = int(g.rng.choice(g.lanes(d)))
    v = g.u(*CRUISE)
    gap = g.u(15.0, 40.0)
    g.track(lane, v, d)
    g.track(lane, v, d, ahead=gap)
    return None


def _side_by_side(g: _Builder):
    d = g.direction()
    lanes = g.lanes(d)
    v = g.u(*CRUISE)
    offset = g.u(-4.0, 4.0)
    g.track(lanes[0], v, d, ahead=max(offset, 0))
    g.track(lanes[-1], v + g.u(-0.5, 0.5), d, ahead=max(-offset, 0))
    return None


def _overtaking(g: _Builder):
    d = g.direction()
    inner, outer = g.lanes(d)[0], g.lanes(d)[-1]
    v_slow = g.u(20.0, 24.0)
    dv = g.u(4.0, 7.0)
    gap = g.u(15.0, 30.0)
    fast = g.track(outer, v_slow + dv, d)
    g.track(outer, v_slow, d, ahead=gap)
    if inner == outer:
        return None
    n = int(g.rng.integers(*LANE_CHANGE_STEPS))
    dy = g.map.lane_centers_y[inner] - g.map.lane_centers_y[outer]
    closing = dv * g.dt  # metres of relative motion per step
    t_out = int(max(gap - 12.0, 0.0) / closing) - n // 2
    t_back = int((gap + 12.0) / closing) - n // 2
    fast.shift(max(t_out, 0), n, dy)
    fast.shift(max(t_back, t_out + n), n, -dy)
    return None


def _opposite(g: _Builder):
    dirs = sorted(set(g.map.lane_direction))
    for d in dirs[:2]:
        g.track(int(g.rng.choice(g.lanes(d))), g.u(*CRUISE), d, ahead=g.u(0.0, 60.0))
    if len(dirs) == 1:
        g.track(g.lanes(dirs[0])[-1], g.u(*CRUISE), dirs[0], ahead=g.u(30.0, 60.0))
    return None


# -- anomalies -----------------------------------------------------------------

def _wrong_way(g: _Builder):
    d = g.direction()
    inner = g.lanes(d)[0]
    v = g.u(*CRUISE)
    actor = g.track(inner, v, d)
    other_dirs = [k for k in sorted(set(g.map.lane_direction)) if k != d]
    od = other_dirs[0] if other_dirs else d
    g.track(g.lanes(od)[-1], g.u(*CRUISE), od, ahead=g.u(0.0, 60.0))
    accel = g.u(6.0, 9.0)
    # braking has to last the whole span, so cap its length by the speed budget
    max_len = int((v - 3.0) / (accel * g.dt)) - 1
    a, b = g.window(10, min(18, max_len), earliest=12)
    target = g.lanes(od)[0] if other_dirs else inner
    dy = g.map.lane_centers_y[target] - g.map.lane_centers_y[inner]
    n = min(20, 2 * a)
    # start so the divider is already behind the vehicle at step a
    actor.shift(a - n // 2 - 1, n, dy)
    # velocity index t moves the car between timesteps t and t+1
    actor.decelerate(a - 1, b - 1, accel)
    return a, b


def _off_road(g: _Builder):
    d = g.direction()
    outer = g.lanes(d)[-1]
    actor = g.track(outer, g.u(*CRUISE), d)
    g.track(g.lanes(d)[0], g.u(*CRUISE), d, ahead=g.u(-20.0, 30.0))
    a, b = g.window(12, 25)
    lo, hi = g.map.road_band
    edge = hi if g.map.lane_centers_y[outer] > g.map.divider_y else lo
    out_sign = np.sign(edge - g.map.lane_centers_y[outer])
    dy = (edge - g.map.lane_centers_y[outer]) + out_sign * g.u(2.0, 5.0)
    actor.shift(a, int(g.rng.integers(10, 15)), dy)
    actor.decelerate(a, b, g.u(3.0, 6.0))
    jitter = g.rng.normal(0.0, 0.08, size=g.T)
    t = np.arange(g.T)
    actor.y += np.where((t >= a) & (t < b), jitter, 0.0)
    return a, b


def _skidding(g: _Builder):
    d = g.direction()
    lane = int(g.rng.choice(g.lanes(d)))
    actor = g.track(lane, g.u(*CRUISE), d)
    other = [k for k in g.lanes(d) if k != lane] or [lane]
    g.track(other[0], g.u(*CRUISE), d, ahead=g.u(-15.0, 15.0) + (25.0 if other[0] == lane else 0.0))
    a, b = g.window(10, 20)
    actor.oscillate(a, b, g.u(0.5, 1.0), g.u(4.0, 7.0))
    actor.decelerate(a, b, g.u(4.0, 6.0), floor=10.0)
    return a, b


def _spreading(g: _Builder, side: float):
    d = g.direction()
    inner, outer = g.lanes(d)[0], g.lanes(d)[-1]
    # the actor sits in the lane on the spreading side
    lane = inner if side * g.left_sign(d) * g.toward_divider(inner) > 0 else outer
    actor = g.track(lane, g.u(*CRUISE), d)
    g.track(outer if lane == inner else inner, g.u(*CRUISE), d, ahead=g.u(-5.0, 5.0) + (25.0 if inner == outer else 0.0))
    a, b = g.window(8, 14)
    actor.bump(a, b - a, side * g.left_sign(d) * g.u(1.5, 2.5))
    return a, b


def _left_spreading(g):
    return _spreading(g, 1.0)


def _right_spreading(g):
    return _spreading(g, -1.0)


def _aggressive_overtaking(g: _Builder):
    d = g.direction()
    inner, outer = g.lanes(d)[0], g.lanes(d)[-1]
    v_slow = g.u(20.0, 23.0)
    dv = g.u(8.0, 12.0)
    a, b = g.window(14, 24)
    length = b - a
    n = int(np.clip(length // 3, 4, 10))
    closing = dv * g.dt
    # fast car draws level with the slow one halfway through the span
    fast = g.track(outer, v_slow + dv, d)
    g.track(outer, v_slow, d, ahead=closing * (a + length / 2))
    if inner != outer:
        dy = g.map.lane_centers_y[inner] - g.map.lane_centers_y[outer]
        fast.shift(a, n, dy)
        fast.shift(b - n, n, -dy)
    fast.ramp_speed(b - n, n, v_slow + dv * 0.5)
    return a, b


def _pushing_aside(g: _Builder):
    d = g.direction()
    inner, outer = g.lanes(d)[0], g.lanes(d)[-1]
    v = g.u(*CRUISE)
    actor = g.track(inner, v, d, ahead=g.u(0.0, 3.0))
    victim = g.track(outer, v + g.u(-0.3, 0.3), d)
    a, b = g.window(10, 16)
    toward = np.sign(g.map.lane_centers_y[outer] - g.map.lane_centers_y[inner]) or 1.0
    push = g.u(2.0, 3.0)
    n = b - a
    actor.bump(a, n, toward * push)
    victim.bump(a + 1, n - 1, toward * g.u(1.5, 2.5))
    return a, b


def _tailgating(g: _Builder):
    d = g.direction()
    lane = int(g.rng.choice(g.lanes(d)))
    v = g.u(20.0, 26.0)
    dv = g.u(3.0, 5.0)
    a, b = g.window(20, 28)
    closing = dv * g.dt
    # the gap shrinks through 10 m exactly at step a
    follower = g.track(lane, v + dv, d)
    g.track(lane, v, d, ahead=10.0 + closing * a)
    target_gap = g.u(2.0, 5.0)
    t_match = a + int((10.0 - target_gap) / closing)
    follower.ramp_speed(t_match, 3, v)
    t = np.arange(g.T)
    osc = (t >= t_match + 3) & (t < b)
    follower.v += np.where(osc, d * 2.0 * np.sin(2 * np.pi * (t - t_match - 3) / 8.0), 0.0)
    return a, b


def _reeving(g: _Builder):
    d = g.direction()
    inner, outer = g.lanes(d)[0], g.lanes(d)[-1]
    actor = g.track(outer, g.u(24.0, 30.0), d)
    g.track(inner if inner != outer else outer, g.u(20.0, 23.0), d, ahead=g.u(5.0, 20.0))
    a, b = g.window(16, 28)
    dy = g.map.lane_centers_y[inner] - g.map.lane_centers_y[outer]
    if dy == 0:
        dy = g.toward_divider(outer) * g.map.width
    n_changes = 3
    n = max(4, (b - a) // n_changes)
    for k in range(n_changes):
        actor.shift(a + k * n, n, dy if k % 2 == 0 else -dy)
    return a, b


_SCENARIOS = {
    "following": _following,
    "side_by_side": _side_by_side,
    "overtaking": _overtaking,
    "opposite_directions": _opposite,
    "wrong_way": _wrong_way,
    "off_road": _off_road,
    "skidding": _skidding,
    "left_spreading": _left_spreading,
    "right_spreading": _right_spreading,
    "aggressive_overtaking": _aggressive_overtaking,
    "pushing_aside": _pushing_aside,
    "tailgating": _tailgating,
    "reeving": _reeving,
}


def _labels(T, window, ignore_width):
    labels = [NORMAL] * T
    if window is None:
        return tuple(labels)
    a, b = window
    for t in range(max(a - ignore_width, 0), a):
        labels[t] = IGNORED
    for t in range(b, min(b + ignore_width, T)):
        labels[t] = IGNORED
    for t in range(a, b):
        labels[t] = ABNORMAL
    return tuple(labels)


def generate(spec: ScenarioSpec, map: Optional[MapSpec] = None, scene_id: Optional[str] = None) -> Scene:
    map = map or default_map()
    g = _Builder(spec, map)
    window = _SCENARIOS[spec.kind](g)
    while len(g.tracks) < spec.n_vehicles:
        d = g.direction()
        g.track(int(g.rng.choice(g.lanes(d))), g.u(*CRUISE), d, ahead=g.u(60.0, 120.0))
    pos = np.stack([tr.positions() for tr in g.tracks[: spec.n_vehicles]])
    if spec.noise_std > 0:
        pos = pos + g.rng.normal(0.0, spec.noise_std, size=pos.shape)
    return Scene(
        scene_id=scene_id or f"{spec.kind}-{spec.seed}",
        timestep_dt=spec.dt,
        positions=pos,
        labels=_labels(spec.duration, window, spec.ignore_width),
        anomaly_type=spec.kind if spec.is_anomalous else None,
        map=map,
    )


def default_counts() -> tuple[dict, dict]:
    """80 normal training scenes and 66 mixed test scenes."""
    train = {"following": 20, "side_by_side": 20, "overtaking": 20, "opposite_directions": 20}
    test = {"following": 8, "side_by_side": 8, "overtaking": 7, "opposite_directions": 7}
    test.update({k: 4 for k in ANOMALY_KINDS})
    return train, test


def _scene_seed(master: int, split: int, index: int) -> int:
    return int(np.random.SeedSequence([master, split, index]).generate_state(1)[0])


def generate_dataset(
    train_counts: dict,
    test_counts: dict,
    seed: int = 0,
    map: Optional[MapSpec] = None,
    duration_range: tuple = (25, 80),
    noise_std: float = 0.005,
    n_vehicles: int = 2,
) -> tuple[list[Scene], list[Scene]]:
    """Generate ``(train, test)`` scene lists; training scenes are normal only."""
    map = map or default_map()
    for kind, n in list(train_counts.items()) + list(test_counts.items()):
        if kind not in KINDS:
            raise ParameterError(f"unknown scenario kind {kind!r}")
        if n < 0:
            raise ParameterError(f"negative count for {kind!r}")
    bad = [k for k, n in train_counts.items() if k in ANOMALY_KINDS and n > 0]
    if bad:
        raise ParameterError(f"anomalous kinds {bad} cannot appear in the training split")
    lo, hi = duration_range
    if not 2 <= lo <= hi:
        raise ParameterError("duration_range must satisfy 2 <= lo <= hi")

    out = []
    for split, (name, counts) in enumerate((("train", train_counts), ("test", test_counts))):
        scenes = []
        idx = 0
        for kind in KINDS:
            for _ in range(counts.get(kind, 0)):
                s = _scene_seed(seed, split, idx)
                T = int(np.random.default_rng(s).integers(lo, hi + 1))
                spec = ScenarioSpec(kind=kind, duration=T, noise_std=noise_std, seed=s, n_vehicles=n_vehicles)
                scenes.append(generate(spec, map, scene_id=f"{name}-{idx:04d}-{kind}"))
                idx += 1
        out.append(scenes)
    return out[0], out[1]
