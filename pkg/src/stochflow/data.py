"""Trajectories, the plain-text dataset format, and synthetic demonstrations.

File format::

    dim=2 dt=0.02
    x y
    x y
    <blank line>
    x y
    ...

One header line, then blank-line separated trajectory blocks with one
whitespace separated point per line. ``#`` starts a comment line.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DataFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Trajectory:
    points: np.ndarray
    dt: float

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("trajectory needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("trajectory contains non-finite values")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "dt", float(self.dt))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def duration(self) -> float:
        return (len(self) - 1) * self.dt

    def arc_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


@dataclass(frozen=True)
class Dataset:
    trajectories: tuple[Trajectory, ...]
    dim: int
    dt: float

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        if not trajs:
            raise ValueError("no trajectories")
        for i, t in enumerate(trajs):
            if t.dim != self.dim:
                raise ValueError(f"trajectory {i} has dim {t.dim}, expected {self.dim}")
            if not math.isclose(t.dt, self.dt, rel_tol=1e-12):
                raise ValueError(f"trajectory {i} has dt {t.dt}, expected {self.dt}")
        object.__setattr__(self, "trajectories", trajs)

    @classmethod
    def from_arrays(cls, arrays: Iterable[np.ndarray], dt: float) -> "Dataset":
        trajs = tuple(Trajectory(a, dt) for a in arrays)
        if not trajs:
            raise ValueError("no trajectories")
        return cls(trajs, trajs[0].dim, dt)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i) -> Trajectory:
        return self.trajectories[i]

    def all_points(self) -> np.ndarray:
        return np.concatenate([t.points for t in self.trajectories])


def _parse_header(line: str) -> tuple[int, float]:
    fields = dict(tok.split("=", 1) for tok in line.split() if "=" in tok)
    if set(fields) != {"dim", "dt"} or len(line.split()) != 2:
        raise DataFormatError("header must be 'dim=<d> dt=<dt>'", 1)
    try:
        dim, dt = int(fields["dim"]), float(fields["dt"])
    except ValueError as exc:
        raise DataFormatError(f"bad header value: {exc}", 1) from None
    if dim < 1 or not (dt > 0 and math.isfinite(dt)):
        raise DataFormatError("header needs dim >= 1 and finite dt > 0", 1)
    return dim, dt


def parse(text: str) -> Dataset:
    lines = text.splitlines()
    header_at = next((i for i, ln in enumerate(lines) if ln.strip() and not ln.lstrip().startswith("#")), None)
    if header_at is None:
        raise DataFormatError("no trajectories")
    dim, dt = _parse_header(lines[header_at].strip())
    blocks: list[list[list[float]]] = []
    current: list[list[float]] = []
    for lineno, raw in enumerate(lines[header_at + 1 :], start=header_at + 2):
        line = raw.strip()
        if line.startswith("#"):
            continue
        if not line:
            if current:
                blocks.append(current)
                current = []
            continue
        parts = line.split()
        if len(parts) != dim:
            raise DataFormatError(f"expected {dim} values, found {len(parts)}", lineno)
        try:
            values = [float(p) for p in parts]
        except ValueError:
            raise DataFormatError(f"cannot parse number in {line!r}", lineno) from None
        if not all(math.isfinite(v) for v in values):
            raise DataFormatError("non-finite value", lineno)
        current.append(values)
    if current:
        blocks.append(current)
    if not blocks:
        raise DataFormatError("no trajectories")
    return Dataset.from_arrays([np.array(b) for b in blocks], dt)


def load(path: str | Path) -> Dataset:
    return parse(Path(path).read_text())


def format_dataset(dataset: Dataset | Sequence[Trajectory]) -> str:
    trajs = list(dataset)
    if not trajs:
        raise ValueError("no trajectories")
    out = [f"dim={trajs[0].dim} dt={trajs[0].dt!r}"]
    for k, t in enumerate(trajs):
        if k:
            out.append("")
        out.extend(" ".join(repr(float(v)) for v in p) for p in t.points)
    return "\n".join(out) + "\n"


def save(dataset: Dataset | Sequence[Trajectory], path: str | Path) -> None:
    Path(path).write_text(format_dataset(dataset))


def resample(traj: Trajectory, new_dt: float) -> Trajectory:
    """Linear interpolation onto a uniform grid that keeps both endpoints.

    The number of intervals is round(duration / new_dt), so the returned dt is
    duration / intervals, which equals ``new_dt`` whenever it divides the duration.
    """
    if not new_dt > 0:
        raise ValueError("new dt must be positive")
    if len(traj) < 2:
        raise ValueError("resampling needs at least two points")
    if math.isclose(new_dt, traj.dt, rel_tol=1e-12):
        return traj
    duration = traj.duration
    intervals = max(1, int(round(duration / new_dt)))
    t_old = np.arange(len(traj)) * traj.dt
    t_new = np.linspace(0.0, duration, intervals + 1)
    pts = np.stack([np.interp(t_new, t_old, traj.points[:, j]) for j in range(traj.dim)], axis=1)
    pts[0], pts[-1] = traj.points[0], traj.points[-1]
    return Trajectory(pts, duration / intervals)


# Synthetic demonstrations


def _smooth_noise(rng: np.random.Generator, u: np.ndarray, dim: int, n_modes: int = 3) -> np.ndarray:
    """Gaussian random low-frequency curve on u in [0, 1] with unit-order amplitude."""
    coeffs = rng.standard_normal((n_modes, dim)) / np.sqrt(n_modes)
    phases = rng.uniform(0, 2 * np.pi, size=(n_modes, 1))
    basis = np.stack([np.sin(np.pi * (k + 1) * u[None, :] + phases[k]) for k in range(n_modes)])[:, 0]
    return basis.T @ coeffs


POINT_TO_POINT_SHAPES = ("line", "sine", "s-curve")


def _p2p_path(shape: str, u: np.ndarray) -> np.ndarray:
    if shape == "line":
        return np.stack([-8.0 * (1 - u), 4.0 * (1 - u)], axis=1)
    if shape == "sine":
        return np.stack([-10.0 * (1 - u), 3.0 * np.sin(2 * np.pi * u)], axis=1)
    if shape == "s-curve":
        return np.stack([4.0 * np.sin(2 * np.pi * u), 8.0 * (1 - u)], axis=1)
    raise ValueError(f"unknown shape {shape!r}; expected one of {POINT_TO_POINT_SHAPES}")


def synth_point_to_point(
    shape: str,
    n_demos: int,
    noise: float,
    seed: int,
    n_points: int = 100,
    dt: float = 0.02,
    rate: float = 2.5,
) -> Dataset:
    """Demonstrations that decelerate into the goal at the origin.

    Progress along the path follows (1 - exp(-rate t)) / (1 - exp(-rate T)) so
    the speed decays roughly exponentially, as recorded reaching motions do.
    Each demo gets a smooth Gaussian perturbation of scale ``noise`` that
    vanishes at the goal, so every demo ends exactly at the goal.
    """
    if n_demos < 1:
        raise ValueError("n_demos must be >= 1")
    rng = np.random.default_rng(seed)
    t = np.arange(n_points) * dt
    T = t[-1]
    u = -np.expm1(-rate * t) / -np.expm1(-rate * T)
    u[-1] = 1.0
    base = _p2p_path(shape, u)
    demos = []
    for _ in range(n_demos):
        pts = base + noise * (1.0 - u)[:, None] * _smooth_noise(rng, u, 2)
        pts[-1] = 0.0
        demos.append(pts)
    return Dataset.from_arrays(demos, dt)


CYCLE_SHAPES = ("circle", "ellipse", "lissajous")


def _cycle_path(shape: str, theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    if shape == "circle":
        return np.stack([c, s], axis=1)
    if shape == "ellipse":
        x, y = 1.5 * c, 0.6 * s
        rot = np.pi / 6
        return np.stack([np.cos(rot) * x - np.sin(rot) * y, np.sin(rot) * x + np.cos(rot) * y], axis=1)
    if shape == "lissajous":
        # second harmonic in y only; the curve stays simple (non self-intersecting)
        return np.stack([c, 0.6 * s + 0.25 * np.cos(2 * theta)], axis=1)
    raise ValueError(f"unknown shape {shape!r}; expected one of {CYCLE_SHAPES}")


def synth_limit_cycle(
    shape: str,
    n_demos: int,
    noise: float,
    seed: int,
    n_points: int = 400,
    dt: float = 0.02,
    omega: float = math.pi,
) -> Dataset:
    """Periodic demonstrations traversing ``shape`` at angular rate ``omega``.

    Each demo starts at a random phase and carries a smooth Gaussian position
    perturbation of scale ``noise``.
    """
    if n_demos < 1:
        raise ValueError("n_demos must be >= 1")
    rng = np.random.default_rng(seed)
    t = np.arange(n_points) * dt
    u = t / max(t[-1], dt)
    demos = []
    for _ in range(n_demos):
        phase = rng.uniform(-np.pi, np.pi)
        pts = _cycle_path(shape, omega * t + phase)
        pts = pts + noise * _smooth_noise(rng, u, 2, n_modes=4)
        demos.append(pts)
    return Dataset.from_arrays(demos, dt)
