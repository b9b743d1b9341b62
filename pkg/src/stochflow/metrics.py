"""Trajectory similarity: DTW, discrete Frechet distance and swept area."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import Trajectory


def _pts(t) -> np.ndarray:
    p = t.points if isinstance(t, Trajectory) else np.asarray(t, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    return p


def _pair_distances(a, b) -> np.ndarray:
    a, b = _pts(a), _pts(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("trajectories must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ValueError("trajectories have different dimensions")
    return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)


def dtw_path(t1, t2) -> tuple[float, int]:
    """(minimal cumulative distance, length of the minimizing alignment).

    Among equal-cost alignments the shortest one is taken, which keeps the
    normalized value symmetric in its arguments.
    """
    d = _pair_distances(t1, t2)
    n, m = d.shape
    cost = np.full((n + 1, m + 1), np.inf)
    length = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best = (cost[i - 1, j - 1], length[i - 1, j - 1])
            for cand in ((cost[i - 1, j], length[i - 1, j]), (cost[i, j - 1], length[i, j - 1])):
                if cand < best:
                    best = cand
            cost[i, j] = best[0] + d[i - 1, j - 1]
            length[i, j] = best[1] + 1
    return float(cost[n, m]), int(length[n, m])


def dtw(t1, t2, normalize: bool = True) -> float:
    """Dynamic time warping distance, by default divided by the alignment length."""
    total, steps = dtw_path(t1, t2)
    return total / steps if normalize else total


def discrete_frechet(t1, t2) -> float:
    d = _pair_distances(t1, t2)
    n, m = d.shape
    ca = np.empty((n, m))
    ca[0, 0] = d[0, 0]
    for j in range(1, m):
        ca[0, j] = max(ca[0, j - 1], d[0, j])
    for i in range(1, n):
        ca[i, 0] = max(ca[i - 1, 0], d[i, 0])
        for j in range(1, m):
            ca[i, j] = max(min(ca[i - 1, j], ca[i - 1, j - 1], ca[i, j - 1]), d[i, j])
    return float(ca[-1, -1])


def resample_arclength(points, n: int) -> np.ndarray:
    """``n`` points spaced uniformly in arc length along a polyline."""
    p = _pts(points)
    if n < 2 or len(p) < 2:
        raise ValueError("resampling needs at least two points on both sides")
    seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0:
        return np.repeat(p[:1], n, axis=0)
    target = np.linspace(0.0, s[-1], n)
    out = np.stack([np.interp(target, s, p[:, k]) for k in range(p.shape[1])], axis=1)
    out[0], out[-1] = p[0], p[-1]
    return out


def _triangle_area(a, b, c) -> np.ndarray:
    return 0.5 * np.abs((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1]))


def swept_area(reproduced, demo) -> float:
    """Area swept between a 2-D reproduction and its demonstration.

    Index alignment convention: the reproduction is resampled (uniform in arc
    length) to the demo's point count when the counts differ, and reversed when
    it runs the opposite way (its start lies nearer the demo's end). Each pair of
    consecutive indices contributes the quadrilateral demo_i, demo_i+1, rep_i+1,
    rep_i, split into two triangles.
    """
    rep, dem = _pts(reproduced), _pts(demo)
    if rep.shape[1] != 2 or dem.shape[1] != 2:
        raise ValueError("swept area is defined for 2-D trajectories only")
    if len(dem) < 2:
        raise ValueError("swept area needs at least two demo points")
    if len(rep) != len(dem):
        rep = resample_arclength(rep, len(dem))
    same = np.linalg.norm(rep[0] - dem[0]) + np.linalg.norm(rep[-1] - dem[-1])
    flipped = np.linalg.norm(rep[0] - dem[-1]) + np.linalg.norm(rep[-1] - dem[0])
    if flipped < same:
        rep = rep[::-1]
    a, b, c, e = dem[:-1], dem[1:], rep[1:], rep[:-1]
    return float((_triangle_area(a, b, c) + _triangle_area(a, c, e)).sum())


METRICS = ("dtw", "frechet", "swept_area")


@dataclass
class MetricReport:
    values: dict[str, list[float]] = field(default_factory=lambda: {k: [] for k in METRICS})

    def add(self, **metrics: float) -> None:
        for k, v in metrics.items():
            if v < 0:
                raise ValueError(f"metric {k} is negative")
            self.values[k].append(float(v))

    def mean(self, metric: str) -> float:
        return float(np.mean(self.values[metric])) if self.values[metric] else float("nan")

    def median(self, metric: str) -> float:
        return float(np.median(self.values[metric])) if self.values[metric] else float("nan")

    def to_dict(self) -> dict:
        present = [k for k in METRICS if self.values[k]]
        return {
            "per_demo": {k: self.values[k] for k in present},
            "mean": {k: self.mean(k) for k in present},
            "median": {k: self.median(k) for k in present},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        present = [k for k in METRICS if self.values[k]]
        n = len(self.values[present[0]]) if present else 0
        rows = ["demo " + " ".join(f"{k:>14}" for k in present)]
        for i in range(n):
            rows.append(f"{i:>4} " + " ".join(f"{self.values[k][i]:>14.6g}" for k in present))
        rows.append("mean " + " ".join(f"{self.mean(k):>14.6g}" for k in present))
        rows.append("med  " + " ".join(f"{self.median(k):>14.6g}" for k in present))
        return "\n".join(rows) + "\n"


def evaluate(model, dataset) -> MetricReport:
    """Compare expected (noise-free) reproductions from each demo's start with the demo."""
    report = MetricReport()
    for traj in dataset:
        pts = _pts(traj)
        rep = model.generate(pts[0], len(pts) - 1, noise_scale=0.0)
        metrics = {"dtw": dtw(rep, pts), "frechet": discrete_frechet(rep, pts)}
        if pts.shape[1] == 2:
            metrics["swept_area"] = swept_area(rep, pts)
        report.add(**metrics)
    return report
