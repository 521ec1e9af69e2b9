"""Sliding-window scoring: per-window errors, overlap averaging, anomaly scores."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
import torch

from . import metrics
from .scene_data import IGNORED, Scene, build_observations, collate, make_windows


class WindowScorer(Protocol):
    def window_errors(self, batch) -> tuple[torch.Tensor, torch.Tensor, int]:
        """Return ``(errors [B, V, K], valid [B, V, K], offset)``.

        ``errors[..., k]`` belongs to window position ``offset + k``.
        """


@dataclass
class WindowErrors:
    scene_id: str
    start: int  # observation index of the window's first step
    offset: int
    errors: np.ndarray  # [V, K]
    valid: np.ndarray  # [V, K]

    def timesteps(self) -> np.ndarray:
        # observation index i is scene timestep i + 1
        return self.start + self.offset + np.arange(self.errors.shape[1]) + 1


def window_pred_errors(model, batch) -> tuple[torch.Tensor, torch.Tensor, int]:
    if model is None:
        raise RuntimeError("no model loaded")
    with torch.no_grad():
        return model.window_errors(batch)


def average_overlaps(windows: Sequence[WindowErrors], n_vehicles: int, length: int):
    """Mean error per (vehicle, timestep) over every window that covers it.

    Returns ``(mean [V, T], count [V, T])``; uncovered entries are NaN / 0.
    """
    total = np.zeros((n_vehicles, length))
    count = np.zeros((n_vehicles, length), dtype=np.int64)
    for w in windows:
        ts = w.timesteps()
        v = w.errors.shape[0]
        total[:v, ts] += np.where(w.valid, w.errors, 0.0)
        count[:v, ts] += w.valid
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return mean, count


def anomaly_score(per_vehicle: np.ndarray) -> np.ndarray:
    """Max over vehicles per timestep; NaN where no vehicle is scored."""
    per_vehicle = np.asarray(per_vehicle, dtype=np.float64)
    scored = ~np.all(np.isnan(per_vehicle), axis=0)
    out = np.full(per_vehicle.shape[1], np.nan)
    out[scored] = np.nanmax(per_vehicle[:, scored], axis=0)
    return out


@dataclass
class ScoreSeries:
    scene_id: str
    labels: tuple
    scores: np.ndarray  # [T]
    scored: np.ndarray  # [T] bool
    per_vehicle: np.ndarray  # [V, T], NaN where unscored
    coverage: np.ndarray  # [V, T]
    anomaly_type: Optional[str] = None

    @classmethod
    def from_per_vehicle(cls, scene_id, labels, per_vehicle, coverage, anomaly_type=None):
        raw = anomaly_score(per_vehicle)
        scored = ~np.isnan(raw)
        scores = raw.copy()
        if scored.any():
            # unscored steps (the scene head) inherit the nearest scored value
            idx = np.where(scored, np.arange(raw.size), -1)
            np.maximum.accumulate(idx, out=idx)
            first = int(np.argmax(scored))
            idx[idx < 0] = first
            scores = raw[idx]
        else:
            scores = np.zeros_like(raw)
        return cls(scene_id, tuple(labels), scores, scored, per_vehicle, coverage, anomaly_type)

    def metric_mask(self) -> np.ndarray:
        return self.scored & (np.asarray(self.labels) != IGNORED)

    def to_csv(self, path) -> None:
        V = self.per_vehicle.shape[0]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["timestep", "score", "label", "scored"] + [f"vehicle_{i}" for i in range(V)])
            for t in range(self.scores.size):
                row = [t, repr(float(self.scores[t])), self.labels[t], int(self.scored[t])]
                row += ["" if np.isnan(e) else repr(float(e)) for e in self.per_vehicle[:, t]]
                w.writerow(row)

    @classmethod
    def from_csv(cls, path, scene_id, anomaly_type=None) -> "ScoreSeries":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        V = len(header) - 4
        scores = np.array([float(r[1]) for r in body])
        labels = tuple(r[2] for r in body)
        scored = np.array([r[3] == "1" for r in body])
        pv = np.array([[np.nan if c == "" else float(c) for c in r[4:]] for r in body]).reshape(len(body), V).T
        return cls(scene_id, labels, scores, scored, pv, (~np.isnan(pv)).astype(np.int64), anomaly_type)


def scene_window_errors(scorer, scene: Scene, window_length=15, stride=1, d=45.0, batch_size=256,
                        dtype=torch.float32) -> list[WindowErrors]:
    obs = build_observations(scene, d)
    windows = make_windows(obs, window_length, stride)
    out = []
    for i in range(0, len(windows), batch_size):
        chunk = windows[i:i + batch_size]
        batch = collate(chunk, n_vehicles=scene.n_vehicles, dtype=dtype)
        err, valid, offset = window_pred_errors(scorer, batch)
        err, valid = err.detach().cpu().double().numpy(), valid.cpu().numpy()
        for j, w in enumerate(chunk):
            out.append(WindowErrors(scene.scene_id, w.start, offset, err[j], valid[j]))
    return out


def score_scene(scorer, scene: Scene, window_length=15, stride=1, d=45.0, dtype=torch.float32) -> ScoreSeries:
    wins = scene_window_errors(scorer, scene, window_length, stride, d, dtype=dtype)
    mean, count = average_overlaps(wins, scene.n_vehicles, scene.length)
    return ScoreSeries.from_per_vehicle(scene.scene_id, scene.labels, mean, count, scene.anomaly_type)


def score_scenes(scorer, scenes: Sequence[Scene], window_length=15, stride=1, d=45.0, jobs=1,
                 dtype=torch.float32) -> list[ScoreSeries]:
    """Score every scene; results keep the input order regardless of ``jobs``."""
    def one(scene):
        return score_scene(scorer, scene, window_length, stride, d, dtype)

    if jobs <= 1:
        return [one(s) for s in scenes]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, scenes))


def pooled(series: Sequence[ScoreSeries]):
    """Concatenate metric-eligible (score, label, type) triples over scenes."""
    s, l, t = [], [], []
    for ss in series:
        m = ss.metric_mask()
        s.append(ss.scores[m])
        l.extend(np.asarray(ss.labels)[m].tolist())
        t.extend([ss.anomaly_type] * int(m.sum()))
    return (np.concatenate(s) if s else np.zeros(0)), l, t


def evaluate_series(series: Sequence[ScoreSeries]) -> dict:
    scores, labels, types = pooled(series)
    return {
        "overall": metrics.detection_report(scores, labels),
        "per_type_auroc": metrics.per_type_auroc(scores, labels, types),
        "n_timesteps": int(len(labels)),
        "n_abnormal": int(sum(1 for x in labels if x == "abnormal")),
    }


def write_scores(series: Sequence[ScoreSeries], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for ss in series:
        name = f"{ss.scene_id}.csv"
        ss.to_csv(out / name)
        index.append({"scene_id": ss.scene_id, "file": name, "anomaly_type": ss.anomaly_type})
    with open(out / "index.json", "w", encoding="utf-8") as fh:
        json.dump({"scenes": index}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out / "index.json"


def read_scores(score_dir) -> list[ScoreSeries]:
    d = Path(score_dir)
    with open(d / "index.json", encoding="utf-8") as fh:
        index = json.load(fh)["scenes"]
    return [ScoreSeries.from_csv(d / e["file"], e["scene_id"], e.get("anomaly_type")) for e in index]
