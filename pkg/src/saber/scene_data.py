"""Scene and map data model, lane-node lookup, observations and windowing.

Coordinates are meters in a road-aligned frame: ``x`` runs along the highway,
``y`` across it. Lanes are listed bottom-to-top and each carries a travel
direction of ``+1`` (toward +x) or ``-1`` (toward -x).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .errors import ParameterError, SceneFormatError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

NORMAL = "normal"
IGNORED = "ignored"
ABNORMAL = "abnormal"
LABELS = (NORMAL, IGNORED, ABNORMAL)

# lane-tuple slot order
FRONT, LEFT, RIGHT = 0, 1, 2


@dataclass(frozen=True)
class MapSpec:
    x_min: float
    x_max: float
    lane_centers_y: tuple
    divider_y: float
    lane_direction: tuple
    block_length: float = 5.0
    lane_width: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "lane_centers_y", tuple(float(c) for c in self.lane_centers_y))
        object.__setattr__(self, "lane_direction", tuple(int(d) for d in self.lane_direction))
        if not self.block_length > 0:
            raise ParameterError("block_length must be positive")
        if not self.x_max > self.x_min:
            raise ParameterError("x_max must exceed x_min")
        if not self.lane_centers_y:
            raise ParameterError("map needs at least one lane")
        if len(self.lane_direction) != len(self.lane_centers_y):
            raise ParameterError("one travel direction per lane required")
        if any(b <= a for a, b in zip(self.lane_centers_y, self.lane_centers_y[1:])):
            raise ParameterError("lane centers must be strictly increasing")
        for y, d in zip(self.lane_centers_y, self.lane_direction):
            if d not in (1, -1):
                raise ParameterError(f"lane direction must be +1 or -1, got {d}")
            if y == self.divider_y:
                raise ParameterError("a lane center cannot sit on the divider")
        below = {d for y, d in zip(self.lane_centers_y, self.lane_direction) if y < self.divider_y}
        above = {d for y, d in zip(self.lane_centers_y, self.lane_direction) if y > self.divider_y}
        if len(below) > 1 or len(above) > 1:
            raise ParameterError("lanes on one side of the divider must share a direction")
        if below and above and below == above:
            raise ParameterError("the two sides of the divider must travel in opposite directions")
        if self.lane_width is not None and not self.lane_width > 0:
            raise ParameterError("lane_width must be positive")

    @property
    def n_lanes(self) -> int:
        return len(self.lane_centers_y)

    @property
    def n_blocks(self) -> int:
        return int(math.ceil((self.x_max - self.x_min) / self.block_length - 1e-12))

    @property
    def width(self) -> float:
        if self.lane_width is not None:
            return self.lane_width
        if self.n_lanes > 1:
            return float(np.min(np.diff(self.lane_centers_y)))
        return 3.5

    @property
    def road_band(self) -> tuple:
        half = self.width / 2
        return self.lane_centers_y[0] - half, self.lane_centers_y[-1] + half

    def side(self, lane: int) -> int:
        return 1 if self.lane_centers_y[lane] > self.divider_y else -1

    def to_dict(self) -> dict:
        return {
            "x_min": self.x_min,
            "x_max": self.x_max,
            "lane_centers_y": list(self.lane_centers_y),
            "divider_y": self.divider_y,
            "lane_direction": list(self.lane_direction),
            "block_length": self.block_length,
            "lane_width": self.lane_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MapSpec":
        return cls(
            x_min=float(d["x_min"]),
            x_max=float(d["x_max"]),
            lane_centers_y=d["lane_centers_y"],
            divider_y=float(d["divider_y"]),
            lane_direction=d["lane_direction"],
            block_length=float(d.get("block_length", 5.0)),
            lane_width=None if d.get("lane_width") is None else float(d["lane_width"]),
        )


def default_map() -> MapSpec:
    """Straight four-lane highway, two lanes per direction, 400 m long."""
    return MapSpec(
        x_min=0.0,
        x_max=400.0,
        lane_centers_y=(-5.25, -1.75, 1.75, 5.25),
        divider_y=0.0,
        lane_direction=(1, 1, -1, -1),
        block_length=5.0,
        lane_width=3.5,
    )


class BlockIndexer:
    """Maps x-coordinates to road blocks and (block, lane) pairs to lane nodes."""

    def __init__(self, map: MapSpec):
        self.map = map
        self.n_blocks = map.n_blocks

    def block_index(self, x: float) -> tuple[int, bool]:
        """Return ``(block, clamped)``; out-of-range x is clamped to a boundary block."""
        b = math.floor((x - self.map.x_min) / self.map.block_length)
        if b < 0:
            return 0, True
        if b >= self.n_blocks or x >= self.map.x_max:
            return self.n_blocks - 1, True
        return b, False

    def block_indices(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raw = np.floor((np.asarray(x, dtype=np.float64) - self.map.x_min) / self.map.block_length)
        clamped = (raw < 0) | (raw >= self.n_blocks)
        return np.clip(raw, 0, self.n_blocks - 1).astype(np.int64), clamped

    def node(self, block: int, lane: int) -> tuple[float, float]:
        x = self.map.x_min + (block + 0.5) * self.map.block_length
        return x, self.map.lane_centers_y[lane]

    def nearest_lane(self, y: float) -> int:
        # argmin returns the first minimum, so ties go to the lower lane index
        return int(np.argmin(np.abs(np.asarray(self.map.lane_centers_y) - y)))


def discretize_map(map: MapSpec) -> BlockIndexer:
    return BlockIndexer(map)


@dataclass(frozen=True)
class LaneTuple:
    front: Optional[tuple] = None
    left: Optional[tuple] = None
    right: Optional[tuple] = None

    @property
    def mask(self) -> tuple:
        return (self.front is not None, self.left is not None, self.right is not None)

    def slots(self) -> tuple:
        return (self.front, self.left, self.right)


def _adjacent_lanes(map: MapSpec, lane: int) -> tuple[Optional[int], Optional[int]]:
    """(left, right) lanes of ``lane`` relative to its travel direction, same side only."""
    direction = map.lane_direction[lane]
    # facing +x, left is +y (higher index); facing -x it flips
    left, right = (lane + 1, lane - 1) if direction > 0 else (lane - 1, lane + 1)

    def ok(k):
        return 0 <= k < map.n_lanes and map.side(k) == map.side(lane)

    return (left if ok(left) else None), (right if ok(right) else None)


def lane_nodes_for(position: Sequence[float], map: MapSpec, indexer: Optional[BlockIndexer] = None) -> LaneTuple:
    """Permissible front/left/right lane nodes for a vehicle at ``position``."""
    indexer = indexer or BlockIndexer(map)
    x, y = float(position[0]), float(position[1])
    lane = indexer.nearest_lane(y)
    block, _ = indexer.block_index(x)
    front_block = block + map.lane_direction[lane]
    if not 0 <= front_block < indexer.n_blocks:
        return LaneTuple()
    left, right = _adjacent_lanes(map, lane)
    return LaneTuple(
        front=indexer.node(front_block, lane),
        left=None if left is None else indexer.node(front_block, left),
        right=None if right is None else indexer.node(front_block, right),
    )


def lane_node_arrays(positions: np.ndarray, map: MapSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised :func:`lane_nodes_for` over an array of positions ``[..., 2]``.

    Returns ``(nodes [..., 3, 2], mask [..., 3], clamped [...])``. Masked node
    coordinates are zero.
    """
    indexer = BlockIndexer(map)
    pos = np.asarray(positions, dtype=np.float64)
    centers = np.asarray(map.lane_centers_y)
    lane = np.argmin(np.abs(pos[..., 1:2] - centers), axis=-1)
    block, clamped = indexer.block_indices(pos[..., 0])
    direction = np.asarray(map.lane_direction)[lane]
    front_block = block + direction
    front_ok = (front_block >= 0) & (front_block < indexer.n_blocks)
    adj = np.array([_adjacent_lanes(map, k) for k in range(map.n_lanes)], dtype=object)
    left_lane = np.array([-1 if a is None else a for a in adj[:, 0]])[lane]
    right_lane = np.array([-1 if a is None else a for a in adj[:, 1]])[lane]

    node_x = map.x_min + (front_block + 0.5) * map.block_length
    nodes = np.zeros(pos.shape[:-1] + (3, 2))
    mask = np.zeros(pos.shape[:-1] + (3,), dtype=bool)
    for slot, lanes in ((FRONT, lane), (LEFT, left_lane), (RIGHT, right_lane)):
        ok = front_ok & (lanes >= 0)
        mask[..., slot] = ok
        nodes[..., slot, 0] = np.where(ok, node_x, 0.0)
        nodes[..., slot, 1] = np.where(ok, centers[np.maximum(lanes, 0)], 0.0)
    return nodes, mask, clamped


@dataclass(eq=False)
class Scene:
    """One multi-vehicle episode.

    ``positions`` is ``[vehicles, T, 2]``; ``present`` is ``[vehicles, T]``.
    Positions of absent vehicles are stored as zeros.
    """

    scene_id: str
    timestep_dt: float
    positions: np.ndarray
    labels: tuple
    map: MapSpec
    present: Optional[np.ndarray] = None
    anomaly_type: Optional[str] = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64)
        if pos.ndim != 3 or pos.shape[-1] != 2:
            raise SceneFormatError(f"positions must have shape [V, T, 2], got {pos.shape}", self.scene_id)
        present = np.ones(pos.shape[:2], dtype=bool) if self.present is None else np.array(self.present, dtype=bool)
        if present.shape != pos.shape[:2]:
            raise SceneFormatError("presence mask shape does not match positions", self.scene_id)
        if not np.all(np.isfinite(pos[present])):
            raise SceneFormatError("non-finite coordinate", self.scene_id)
        pos[~present] = 0.0
        labels = tuple(self.labels)
        if len(labels) != pos.shape[1]:
            raise SceneFormatError(f"{len(labels)} labels for {pos.shape[1]} timesteps", self.scene_id)
        bad = set(labels) - set(LABELS)
        if bad:
            raise SceneFormatError(f"unknown labels {sorted(bad)}", self.scene_id)
        self.positions = pos
        self.present = present
        self.labels = labels

    @property
    def n_vehicles(self) -> int:
        return self.positions.shape[0]

    @property
    def length(self) -> int:
        return self.positions.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.timestep_dt == other.timestep_dt
            and self.labels == other.labels
            and self.anomaly_type == other.anomaly_type
            and self.map == other.map
            and np.array_equal(self.present, other.present)
            and np.array_equal(self.positions, other.positions)
        )

    def to_record(self) -> dict:
        positions = [
            [[float(x), float(y)] if p else None for (x, y), p in zip(traj, pres)]
            for traj, pres in zip(self.positions, self.present)
        ]
        return {
            "schema_version": SCHEMA_VERSION,
            "scene_id": self.scene_id,
            "timestep_dt": self.timestep_dt,
            "anomaly_type": self.anomaly_type,
            "labels": list(self.labels),
            "map": self.map.to_dict(),
            "positions": positions,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Scene":
        scene_id = rec.get("scene_id") if isinstance(rec, dict) else None
        if not isinstance(rec, dict):
            raise SceneFormatError("record is not an object")
        version = rec.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SceneFormatError(f"unsupported schema version {version!r}", scene_id)
        missing = {"scene_id", "timestep_dt", "labels", "map", "positions"} - rec.keys()
        if missing:
            raise SceneFormatError(f"missing fields {sorted(missing)}", scene_id)
        try:
            traj = rec["positions"]
            n_t = len(rec["labels"])
            pos = np.zeros((len(traj), n_t, 2))
            present = np.zeros((len(traj), n_t), dtype=bool)
            for v, seq in enumerate(traj):
                if len(seq) != n_t:
                    raise SceneFormatError(f"vehicle {v} has {len(seq)} steps, expected {n_t}", scene_id)
                for t, c in enumerate(seq):
                    if c is None:
                        continue
                    x, y = float(c[0]), float(c[1])
                    if not (math.isfinite(x) and math.isfinite(y)):
                        raise SceneFormatError(f"non-finite coordinate at vehicle {v}, t={t}", scene_id)
                    pos[v, t] = (x, y)
                    present[v, t] = True
            return cls(
                scene_id=str(rec["scene_id"]),
                timestep_dt=float(rec["timestep_dt"]),
                positions=pos,
                present=present,
                labels=tuple(rec["labels"]),
                anomaly_type=rec.get("anomaly_type"),
                map=MapSpec.from_dict(rec["map"]),
            )
        except SceneFormatError:
            raise
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise SceneFormatError(f"malformed record: {exc}", scene_id) from exc


def save_scenes(scenes: Iterable[Scene], path) -> None:
    """Write scenes as JSON lines, one scene per line, keys sorted."""
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene.to_record(), sort_keys=True, allow_nan=False, separators=(",", ":")))
            fh.write("\n")


def load_scenes(path) -> list[Scene]:
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SceneFormatError(f"line {lineno}: invalid JSON ({exc})") from exc
            scenes.append(Scene.from_record(rec))
    return scenes


_LABEL_CODES = {0: NORMAL, 1: ABNORMAL, 2: IGNORED, -1: IGNORED}


def scene_from_arrays(scene_id, coords, labels, map: MapSpec, timestep_dt=0.1, anomaly_type=None) -> Scene:
    """Build a scene from MAAD-style arrays.

    ``coords`` is ``[V, T, 2]`` with NaN marking absent vehicles. ``labels`` may
    be strings or integer codes (0 normal, 1 abnormal, 2 or -1 ignored).
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 3 or coords.shape[-1] != 2:
        raise SceneFormatError(f"coords must have shape [V, T, 2], got {coords.shape}", scene_id)
    present = ~np.any(np.isnan(coords), axis=-1)
    out = []
    for lab in np.asarray(labels).tolist():
        if isinstance(lab, str):
            out.append(lab)
        elif int(lab) in _LABEL_CODES:
            out.append(_LABEL_CODES[int(lab)])
        else:
            raise SceneFormatError(f"unknown label code {lab!r}", scene_id)
    return Scene(
        scene_id=str(scene_id),
        timestep_dt=float(timestep_dt),
        positions=np.nan_to_num(coords),
        present=present,
        labels=tuple(out),
        anomaly_type=anomaly_type,
        map=map,
    )


def import_maad(directory, map_sidecar) -> list[Scene]:
    """Import a directory of ``*.npz`` scenes sharing one map sidecar (JSON).

    Each archive holds ``coords`` ``[V, T, 2]`` and ``labels`` ``[T]``; optional
    ``anomaly_type`` and ``dt`` entries are honoured. Scene ids are file stems.
    """
    with open(map_sidecar, encoding="utf-8") as fh:
        map = MapSpec.from_dict(json.load(fh))
    scenes = []
    for f in sorted(Path(directory).glob("*.npz")):
        with np.load(f, allow_pickle=False) as z:
            kind = str(z["anomaly_type"]) if "anomaly_type" in z else None
            dt = float(z["dt"]) if "dt" in z else 0.1
            scenes.append(scene_from_arrays(f.stem, z["coords"], z["labels"], map, dt, kind or None))
    return scenes


@dataclass
class SceneObservations:
    """Per-vehicle observations for timesteps 1..T-1 of a scene.

    Index ``k`` along the time axis is scene timestep ``k + 1``.
    """

    scene_id: str
    X: np.ndarray  # [V, T-1, 2]
    L: np.ndarray  # [V, T-1, 3, 2]
    lane_mask: np.ndarray  # [V, T-1, 3]
    R: np.ndarray  # [V, T-1, V, 2]
    nbr_mask: np.ndarray  # [V, T-1, V]
    present: np.ndarray  # [V, T-1]
    labels: tuple = ()
    anomaly_type: Optional[str] = None
    clamped: Optional[np.ndarray] = None

    @property
    def length(self) -> int:
        return self.X.shape[1]

    @property
    def n_vehicles(self) -> int:
        return self.X.shape[0]


def build_observations(scene: Scene, d: float = 45.0) -> SceneObservations:
    if scene.length < 2:
        raise ParameterError(f"scene {scene.scene_id!r} needs at least 2 timesteps")
    if not d > 0:
        raise ParameterError("neighbour radius d must be positive")
    pos, pres = scene.positions, scene.present
    cur, prev = pos[:, 1:], pos[:, :-1]
    present = pres[:, 1:] & pres[:, :-1]

    X = np.where(present[..., None], cur - prev, 0.0)

    nodes, lane_mask, clamped = lane_node_arrays(cur, scene.map)
    lane_mask &= present[..., None]
    L = np.where(lane_mask[..., None], nodes - cur[:, :, None, :], 0.0)

    # R[a, t, b] = c_t^(b) - c_t^(a)
    rel = np.transpose(cur[None, :, :, :] - cur[:, None, :, :], (0, 2, 1, 3))
    dist = np.linalg.norm(rel, axis=-1)
    n = scene.n_vehicles
    nbr_mask = (
        (dist <= d)
        & present[:, :, None]
        & np.transpose(present, (1, 0))[None, :, :]
        & ~np.eye(n, dtype=bool)[:, None, :]
    )
    R = np.where(nbr_mask[..., None], rel, 0.0)

    if np.any(present & ~lane_mask.any(-1)):
        logger.warning("scene %s: %d vehicle-steps with no permissible lane node",
                       scene.scene_id, int(np.sum(present & ~lane_mask.any(-1))))
    return SceneObservations(
        scene_id=scene.scene_id,
        X=X,
        L=L,
        lane_mask=lane_mask,
        R=R,
        nbr_mask=nbr_mask,
        present=present,
        labels=scene.labels,
        anomaly_type=scene.anomaly_type,
        clamped=clamped & present,
    )


@dataclass
class Window:
    """A fixed-length slice of a scene's observations."""

    scene_id: str
    start: int
    X: np.ndarray
    L: np.ndarray
    lane_mask: np.ndarray
    R: np.ndarray
    nbr_mask: np.ndarray
    present: np.ndarray

    @property
    def length(self) -> int:
        return self.X.shape[1]


def make_windows(obs: SceneObservations, length: int = 15, stride: int = 1) -> list[Window]:
    if length < 2:
        raise ParameterError("window length must be at least 2")
    if stride < 1:
        raise ParameterError("stride must be at least 1")
    n = obs.length
    if n < length:
        logger.warning("scene %s: %d observations shorter than window %d; no windows",
                       obs.scene_id, n, length)
        return []
    out = []
    for s in range(0, n - length + 1, stride):
        sl = slice(s, s + length)
        out.append(Window(
            scene_id=obs.scene_id,
            start=s,
            X=obs.X[:, sl],
            L=obs.L[:, sl],
            lane_mask=obs.lane_mask[:, sl],
            R=obs.R[:, sl],
            nbr_mask=obs.nbr_mask[:, sl],
            present=obs.present[:, sl],
        ))
    return out


@dataclass
class WindowBatch:
    """Stacked windows as tensors, vehicles padded to the widest window.

    Shapes: ``X [B, V, W, 2]``, ``L [B, V, W, 3, 2]``, ``lane_mask [B, V, W, 3]``,
    ``R [B, V, W, V, 2]``, ``nbr_mask [B, V, W, V]``, ``present [B, V, W]``.
    """

    X: torch.Tensor
    L: torch.Tensor
    lane_mask: torch.Tensor
    R: torch.Tensor
    nbr_mask: torch.Tensor
    present: torch.Tensor
    source: list = field(default_factory=list)

    @property
    def shape(self):
        return tuple(self.X.shape[:3])

    def to(self, dtype=None, device=None) -> "WindowBatch":
        def cv(t):
            return t.to(dtype=dtype, device=device) if t.is_floating_point() else t.to(device=device)

        return WindowBatch(cv(self.X), cv(self.L), self.lane_mask.to(device=device), cv(self.R),
                           self.nbr_mask.to(device=device), self.present.to(device=device), list(self.source))

    def select(self, idx) -> "WindowBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return WindowBatch(self.X[idx], self.L[idx], self.lane_mask[idx], self.R[idx],
                           self.nbr_mask[idx], self.present[idx], [self.source[i] for i in idx.tolist()])


def collate(windows: Sequence[Window], n_vehicles: Optional[int] = None, dtype=torch.float32) -> WindowBatch:
    if not windows:
        raise ParameterError("cannot collate an empty list of windows")
    W = windows[0].length
    if any(w.length != W for w in windows):
        raise ParameterError("all windows in a batch must share one length")
    V = max(w.X.shape[0] for w in windows) if n_vehicles is None else n_vehicles
    B = len(windows)
    X = np.zeros((B, V, W, 2))
    L = np.zeros((B, V, W, 3, 2))
    lm = np.zeros((B, V, W, 3), dtype=bool)
    R = np.zeros((B, V, W, V, 2))
    nm = np.zeros((B, V, W, V), dtype=bool)
    pr = np.zeros((B, V, W), dtype=bool)
    for i, w in enumerate(windows):
        n = w.X.shape[0]
        X[i, :n], L[i, :n], lm[i, :n], pr[i, :n] = w.X, w.L, w.lane_mask, w.present
        R[i, :n, :, :n], nm[i, :n, :, :n] = w.R, w.nbr_mask
    t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
    return WindowBatch(t(X), t(L), torch.as_tensor(lm), t(R), torch.as_tensor(nm), torch.as_tensor(pr),
                       [(w.scene_id, w.start) for w in windows])
