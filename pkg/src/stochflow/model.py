"""ImitationModel: a flow stack over stable latent dynamics.

Raw observations are first normalized per dimension, then pulled back through
the flow into the latent space where the dynamics live. For linear latents the
emission is anchored, h(z) - h(0), so the latent equilibrium always lands on the
normalized goal.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from .data import Trajectory
from .diffcore import DTYPE, NonFiniteError, ParamVector
from .flows import FlowStack
from .latent import LimitCycleSDE, LinearSDE, rollout

MAGIC = b"IFLOW1"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Normalizer:
    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        shift = np.asarray(self.shift, dtype=np.float64).reshape(-1)
        scale = np.asarray(self.scale, dtype=np.float64).reshape(-1)
        if shift.shape != scale.shape:
            raise ValueError("shift and scale must have the same length")
        if not np.all(scale > 0):
            raise ValueError("normalizer scales must be positive")
        object.__setattr__(self, "shift", shift)
        object.__setattr__(self, "scale", scale)

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, trajectories: Sequence[np.ndarray], kind: str) -> "Normalizer":
        """Unit per-dimension std; shift to the mean endpoint (linear) or centroid (cycle)."""
        pts = np.concatenate([np.asarray(t, dtype=np.float64) for t in trajectories])
        scale = pts.std(axis=0)
        if not np.all(scale > 1e-12 * max(1.0, float(np.abs(pts).max()))):
            raise ValueError("degenerate data: a coordinate is constant over all demonstrations")
        if kind == "linear":
            shift = np.mean([np.asarray(t)[-1] for t in trajectories], axis=0)
        else:
            shift = pts.mean(axis=0)
        return cls(shift, scale)

    @property
    def log_scale(self) -> float:
        return float(np.log(self.scale).sum())

    def apply(self, y):
        if isinstance(y, torch.Tensor):
            return (y - torch.as_tensor(self.shift)) / torch.as_tensor(self.scale)
        return (np.asarray(y, dtype=np.float64) - self.shift) / self.scale

    def invert(self, y):
        if isinstance(y, torch.Tensor):
            return y * torch.as_tensor(self.scale) + torch.as_tensor(self.shift)
        return np.asarray(y, dtype=np.float64) * self.scale + self.shift


def _points(traj) -> np.ndarray:
    return traj.points if isinstance(traj, Trajectory) else np.asarray(traj, dtype=np.float64)


class ImitationModel(nn.Module):
    def __init__(
        self,
        flow: FlowStack,
        latent: LinearSDE | LimitCycleSDE,
        normalizer: Normalizer,
        dt: float,
        anchor: bool | None = None,
    ):
        super().__init__()
        if not (flow.dim == latent.dim == normalizer.shift.size):
            raise ValueError("flow, latent and normalizer dimensions differ")
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.flow = flow
        self.latent = latent
        self.normalizer = normalizer
        self.dt = float(dt)
        self.anchor = latent.kind == "linear" if anchor is None else bool(anchor)

    @property
    def dim(self) -> int:
        return self.flow.dim

    # Maps between normalized observations and latent states.

    def _offset(self) -> torch.Tensor:
        if not self.anchor:
            return torch.zeros(1, self.dim, dtype=DTYPE)
        y0, _ = self.flow(torch.zeros(1, self.dim, dtype=DTYPE))
        return y0

    def emit(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        y, logdet = self.flow(z)
        return y - self._offset(), logdet

    def to_latent(self, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.flow.inverse(y + self._offset())

    def latent_of(self, y_raw) -> tuple[torch.Tensor, torch.Tensor]:
        """Latent states and log|det dz/dy_raw| for raw observations (n, d)."""
        y = torch.as_tensor(self.normalizer.apply(np.asarray(y_raw, dtype=np.float64)))
        z, logdet = self.to_latent(y)
        return z, logdet - self.normalizer.log_scale

    # Densities

    def loss_terms(self, trajectory, stride: int = 1) -> dict[str, torch.Tensor]:
        """Log-likelihood pieces of a trajectory under the backward-conditioned chain.

        Points i = 0 .. n-s are scored by p(z_i | z_{i+s}); the last point by the
        stationary density. ``logdet`` sums the volume terms of all scored points.
        """
        pts = _points(trajectory)
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise ValueError("trajectory needs at least two points")
        if pts.shape[1] != self.dim:
            raise ValueError(f"trajectory dim {pts.shape[1]} does not match model dim {self.dim}")
        n = pts.shape[0] - 1
        s = min(int(stride), n)
        if s < 1:
            raise ValueError("stride must be >= 1")
        z, logdet = self.latent_of(pts)
        endpoint = self.latent.stationary_log_density(z[n], self.dt)
        cond = self.latent.backward_log_density(z[: n - s + 1], z[s:], self.dt, s).sum()
        vol = logdet[: n - s + 1].sum() + logdet[n]
        total = endpoint + cond + vol
        return {"total": total, "endpoint": endpoint, "conditionals": cond, "logdet": vol}

    def log_likelihood(self, trajectory, stride: int = 1) -> torch.Tensor:
        return self.loss_terms(trajectory, stride)["total"]

    def stationary_log_density(self, y_raw) -> np.ndarray:
        """Log-density of the stationary distribution in raw observation space."""
        with torch.no_grad():
            z, logdet = self.latent_of(np.atleast_2d(y_raw))
            return (self.latent.stationary_log_density(z, self.dt) + logdet).numpy()

    # Generation

    @torch.no_grad()
    def generate(self, y0, n_steps: int, noise_scale: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
        """Roll the latent dynamics from the image of ``y0`` and map back.

        ``y0`` may be one point (d,) or a batch (N, d); the result is
        (n_steps + 1, d) or (n_steps + 1, N, d).
        """
        rng = np.random.default_rng(0) if rng is None else rng
        y0 = np.asarray(y0, dtype=np.float64)
        single = y0.ndim == 1
        y0 = np.atleast_2d(y0)
        if y0.shape[1] != self.dim:
            raise ValueError(f"start point dim {y0.shape[1]} does not match model dim {self.dim}")
        z0, _ = self.to_latent(torch.as_tensor(self.normalizer.apply(y0)))
        path = rollout(self.latent, z0.numpy(), n_steps, self.dt, rng, noise_scale)
        flat = torch.as_tensor(path.reshape(-1, self.dim))
        y, _ = self.emit(flat)
        out = self.normalizer.invert(y.numpy()).reshape(path.shape)
        out[0] = y0
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("generated trajectory is not finite", "flow")
        return out[:, 0] if single else out

    @torch.no_grad()
    def attractor(self) -> np.ndarray | None:
        """Observed-space equilibrium for linear latents, None for limit cycles."""
        if self.latent.kind != "linear":
            return None
        y, _ = self.emit(torch.zeros(1, self.dim, dtype=DTYPE))
        return self.normalizer.invert(y.numpy()[0])

    @torch.no_grad()
    def vector_field(self, points) -> np.ndarray:
        """Expected velocity J(z) f(z) at raw points, in raw units per second."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        z, _ = self.to_latent(torch.as_tensor(self.normalizer.apply(pts)))
        jac = self.flow.jacobian(z)
        v = (jac @ self.latent.expected_velocity(z).unsqueeze(-1)).squeeze(-1)
        return v.numpy() * self.normalizer.scale

    # Flat parameter access

    def param_vector(self) -> ParamVector:
        layout, offset = {}, 0
        for name, p in self.named_parameters():
            layout[name] = slice(offset, offset + p.numel())
            offset += p.numel()
        values = torch.cat([p.detach().reshape(-1) for p in self.parameters()]).numpy().copy()
        return ParamVector(values, layout)

    @torch.no_grad()
    def set_param_vector(self, values) -> None:
        values = values.values if isinstance(values, ParamVector) else values
        flat = torch.as_tensor(np.asarray(values, dtype=np.float64))
        offset = 0
        for p in self.parameters():
            p.copy_(flat[offset : offset + p.numel()].reshape(p.shape))
            offset += p.numel()
        if offset != flat.numel():
            raise ValueError(f"expected {offset} parameters, got {flat.numel()}")

    def flat_loss(self, trajectory, stride: int = 1):
        """Negative log-likelihood as a function of a flat parameter tensor."""
        names = [n for n, _ in self.named_parameters()]
        shapes = [p.shape for _, p in self.named_parameters()]

        def loss(flat: torch.Tensor) -> torch.Tensor:
            params, offset = {}, 0
            for name, shape in zip(names, shapes):
                count = int(np.prod(shape)) if len(shape) else 1
                params[name] = flat[offset : offset + count].reshape(shape)
                offset += count
            return -functional_call(self, params, (trajectory,), {"stride": stride})

        return loss

    def forward(self, trajectory, stride: int = 1) -> torch.Tensor:
        return self.log_likelihood(trajectory, stride)


def build_model(
    dim: int,
    latent_kind: str,
    dt: float,
    normalizer: Normalizer | None = None,
    depth: int = 10,
    hidden: Sequence[int] = (64, 64),
    seed: int = 0,
    eps: float = 0.01,
) -> ImitationModel:
    flow = FlowStack.build(dim, depth=depth, hidden=hidden, seed=seed)
    if latent_kind == "linear":
        latent = LinearSDE(dim, eps)
    elif latent_kind == "cycle":
        latent = LimitCycleSDE(dim, eps)
    else:
        raise ValueError(f"unknown latent kind {latent_kind!r}")
    return ImitationModel(flow, latent, normalizer or Normalizer.identity(dim), dt)


def log_likelihood_trajectory(model: ImitationModel, trajectory, stride: int = 1) -> float:
    with torch.no_grad():
        return float(model.log_likelihood(trajectory, stride))


def generate(model: ImitationModel, y0, n_steps: int, noise_scale: float = 0.0, rng=None) -> np.ndarray:
    return model.generate(y0, n_steps, noise_scale, rng)


def vector_field(model: ImitationModel, points) -> np.ndarray:
    return model.vector_field(points)


def classify(trajectory, models: Sequence[ImitationModel], stride: int = 1) -> tuple[int, list[float]]:
    """Index of the model with the highest likelihood (lowest index on ties)."""
    if not models:
        raise ValueError("need at least one model")
    dim = _points(trajectory).shape[1]
    for k, m in enumerate(models):
        if m.dim != dim:
            raise ValueError(f"model {k} has dim {m.dim}, trajectory has dim {dim}")
    scores = [log_likelihood_trajectory(m, trajectory, stride) for m in models]
    best = max(range(len(scores)), key=lambda k: (scores[k], -k))
    return best, scores


# Files


def grid_points(lo: Sequence[float], hi: Sequence[float], counts: Sequence[int]) -> np.ndarray:
    axes = [np.linspace(a, b, n) for a, b, n in zip(lo, hi, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def format_vector_field(points: np.ndarray, velocities: np.ndarray, grid_shape: Sequence[int]) -> str:
    """Header ``# dim=<d> grid=<n0>x<n1>...`` then ``x_0 .. x_{d-1} v_0 .. v_{d-1}`` rows."""
    d = points.shape[1]
    lines = [f"# dim={d} grid={'x'.join(str(int(n)) for n in grid_shape)}"]
    for p, v in zip(points, velocities):
        lines.append(" ".join(repr(float(x)) for x in (*p, *v)))
    return "\n".join(lines) + "\n"


def parse_vector_field(text: str) -> tuple[int, tuple[int, ...], np.ndarray, np.ndarray]:
    lines = text.splitlines()
    head = dict(tok.split("=", 1) for tok in lines[0].lstrip("#").split())
    dim = int(head["dim"])
    shape = tuple(int(n) for n in head["grid"].split("x"))
    rows = np.array([[float(x) for x in ln.split()] for ln in lines[1:] if ln.strip()]).reshape(-1, 2 * dim)
    return dim, shape, rows[:, :dim], rows[:, dim:]


def save_model(model: ImitationModel, path: str | Path) -> None:
    """Write the IFLOW1 binary container (layout documented in docs/model_format.md)."""
    pv = model.param_vector()
    header = {
        "dim": model.dim,
        "dt": model.dt,
        "anchor": model.anchor,
        "flow": model.flow.describe(),
        "latent": model.latent.describe(),
        "normalizer": {"shift": model.normalizer.shift.tolist(), "scale": model.normalizer.scale.tolist()},
        "params": [
            {"name": name, "offset": sl.start, "count": sl.stop - sl.start, "shape": list(p.shape)}
            for (name, sl), (_, p) in zip(pv.layout.items(), model.named_parameters())
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", len(pv)))
        fh.write(pv.values.astype("<f8").tobytes())


def load_model(path: str | Path) -> ImitationModel:
    raw = Path(path).read_bytes()
    if raw[:6] != MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 6)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    header = json.loads(raw[14 : 14 + hlen].decode("utf-8"))
    (count,) = struct.unpack_from("<Q", raw, 14 + hlen)
    start = 22 + hlen
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=start).astype(np.float64)
    dim = header["dim"]
    flow = FlowStack.from_description(dim, header["flow"])
    lat = header["latent"]
    latent = LinearSDE(dim, lat["eps"]) if lat["kind"] == "linear" else LimitCycleSDE(dim, lat["eps"])
    norm = Normalizer(header["normalizer"]["shift"], header["normalizer"]["scale"])
    model = ImitationModel(flow, latent, norm, header["dt"], header["anchor"])
    expected = [p["name"] for p in header["params"]]
    if expected != [n for n, _ in model.named_parameters()]:
        raise ValueError(f"{path}: parameter layout does not match the described architecture")
    model.set_param_vector(values)
    return model
