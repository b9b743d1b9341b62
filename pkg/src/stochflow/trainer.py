"""Maximum-likelihood training of an ImitationModel.

Each iteration draws one demonstration and a stride s uniformly from
{1..s_max}, scores it with the backward-conditioned chain likelihood and takes
one Adam step on the negative log-likelihood for flow and dynamics jointly.
"""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .data import Dataset, Trajectory
from .diffcore import NonFiniteError
from .latent import LimitCycleSDE, LinearSDE, OriginError, UnstableDiscretizationError
from .model import ImitationModel, Normalizer, build_model

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 2000
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    s_max: int = 5
    clip_norm: float = 100.0
    seed: int = 0
    latent: str = "linear"
    depth: int = 10
    hidden: tuple[int, ...] = (64, 64)
    eps: float = 0.01
    plateau_tol: float = 1e-5
    plateau_window: int = 50
    init_dynamics: bool = True
    eval_every: int = 50

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.s_max < 1:
            raise ValueError("s_max must be >= 1")
        if not self.clip_norm > 0:
            raise ValueError("clip norm must be positive")
        if self.latent not in ("linear", "cycle"):
            raise ValueError(f"latent must be 'linear' or 'cycle', not {self.latent!r}")
        self.betas = tuple(self.betas)
        self.hidden = tuple(self.hidden)


@dataclass
class LossReport:
    """Per-epoch negative log-likelihood and its split into terms.

    ``nll[e] == endpoint[e] + conditionals[e] + logdet[e]`` where each entry is
    the negated log-likelihood contribution of that term. ``eval_epochs`` and
    ``eval_nll`` hold the periodic full-dataset scores used to pick the
    returned parameters (``best_epoch`` updates completed; 0 is the start).
    """

    nll: list[float] = field(default_factory=list)
    endpoint: list[float] = field(default_factory=list)
    conditionals: list[float] = field(default_factory=list)
    logdet: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    clipped_norm: list[float] = field(default_factory=list)
    stride: list[int] = field(default_factory=list)
    trajectory: list[int] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    eval_epochs: list[int] = field(default_factory=list)
    eval_nll: list[float] = field(default_factory=list)
    initial_nll: float = math.nan
    final_nll: float = math.nan
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.nll)

    def records(self) -> list[str]:
        return [
            f"epoch={e} nll={self.nll[e]!r} endpoint={self.endpoint[e]!r} "
            f"conditionals={self.conditionals[e]!r} logdet={self.logdet[e]!r} "
            f"grad_norm={self.grad_norm[e]!r} stride={self.stride[e]} "
            f"trajectory={self.trajectory[e]} time={self.wall_time[e]:.6f}"
            for e in range(self.epochs_run)
        ]

    def format_log(self) -> str:
        head = (
            f"# initial_nll={self.initial_nll!r} final_nll={self.final_nll!r} "
            f"epochs={self.epochs_run} best_epoch={self.best_epoch}"
        )
        return "\n".join([head, *self.records()]) + "\n"


class TrainingAborted(RuntimeError):
    """Training hit a non-finite or unstable state; carries the last finite model."""

    def __init__(self, message: str, model: ImitationModel, report: LossReport):
        super().__init__(message)
        self.model = model
        self.report = report


def _arrays(trajectories) -> tuple[list[np.ndarray], float | None]:
    if isinstance(trajectories, Dataset):
        return [t.points for t in trajectories], trajectories.dt
    arrays, dt = [], None
    for t in trajectories:
        if isinstance(t, Trajectory):
            arrays.append(t.points)
            dt = t.dt
        else:
            arrays.append(np.asarray(t, dtype=np.float64))
    return arrays, dt


# Initialization heuristics


def init_linear_from_mean_velocity(trajectories, dt: float, eps: float = 0.01) -> LinearSDE:
    """Isotropic decay A = -(mean speed / mean start distance to goal) I, K = 0.1 I.

    The goal of each demonstration is its last point.
    """
    arrays, _ = _arrays(trajectories)
    if not arrays or any(len(a) < 2 for a in arrays):
        raise ValueError("need at least one trajectory with two or more points")
    speeds = np.concatenate([np.linalg.norm(np.diff(a, axis=0), axis=1) / dt for a in arrays])
    dist = float(np.mean([np.linalg.norm(a[0] - a[-1]) for a in arrays]))
    if not dist > 0:
        raise ValueError("degenerate data: demonstrations start at their goal")
    rate = max(float(speeds.mean()) / dist, 2.0 * eps)
    dim = arrays[0].shape[1]
    return LinearSDE(dim, eps).set_matrices(-rate * np.eye(dim), 0.1 * np.eye(dim))


def dominant_frequency(signal: np.ndarray, dt: float) -> float:
    """Frequency in Hz of the strongest non-DC Fourier bin; error if that is DC."""
    x = np.asarray(signal, dtype=np.float64)
    spectrum = np.abs(np.fft.rfft(x - x.mean()))
    freqs = np.fft.rfftfreq(x.size, dt)
    k = int(np.argmax(spectrum))
    if k == 0 or spectrum[k] <= 1e-12 * max(1.0, np.abs(x).max()):
        raise ValueError("no oscillation detected: dominant frequency bin is zero")
    return float(freqs[k])


def init_cycle_from_pca_fft(trajectories, dt: float, eps: float = 0.01) -> LimitCycleSDE:
    """Angular rate from the main frequency of the first principal component.

    rho* starts at the mean distance of the points from their centroid, a at -1,
    both noise scales at 0.1. The rotation sign follows the demonstrations'
    mean angular momentum about the centroid.
    """
    arrays, _ = _arrays(trajectories)
    if not arrays or any(len(a) < 8 for a in arrays):
        raise ValueError("limit-cycle initialization needs trajectories of length >= 8")
    pts = np.concatenate(arrays)
    center = pts.mean(axis=0)
    centered = pts - center
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axis = vt[0]
    freqs = [dominant_frequency((a - center) @ axis, dt) for a in arrays]
    omega = 2.0 * np.pi * float(np.median(freqs))
    momentum = 0.0
    for a in arrays:
        c = a[:, :2] - center[:2]
        v = np.diff(a[:, :2], axis=0)
        momentum += float(np.sum(c[:-1, 0] * v[:, 1] - c[:-1, 1] * v[:, 0]))
    b = omega if momentum >= 0 else -omega
    rho = float(np.linalg.norm(centered, axis=1).mean())
    dim = pts.shape[1]
    sde = LimitCycleSDE(dim, eps).set_values(a=-1.0, b=b, rho_star=rho, sigma1=0.1, sigma2=0.1)
    if sde.extra is not None:
        sde.extra.set_matrices(-np.eye(dim - 2), 0.1 * np.eye(dim - 2))
    return sde


# Training loop


def dataset_nll(model: ImitationModel, arrays: Sequence[np.ndarray], stride: int = 1) -> float:
    with torch.no_grad():
        return float(sum(-model.log_likelihood(a, stride) for a in arrays))


def _safe_nll(model: ImitationModel, arrays: Sequence[np.ndarray]) -> float:
    try:
        value = dataset_nll(model, arrays)
    except (NonFiniteError, UnstableDiscretizationError, OriginError, torch.linalg.LinAlgError):
        return math.inf
    return value if math.isfinite(value) else math.inf


def _plateaued(nll: list[float], window: int, tol: float) -> bool:
    if len(nll) < 2 * window:
        return False
    recent = float(np.mean(nll[-window:]))
    before = float(np.mean(nll[-2 * window : -window]))
    return abs(recent - before) <= tol * max(abs(before), 1e-12)


def _validated(trajectories, dt: float | None) -> tuple[list[np.ndarray], float]:
    arrays, data_dt = _arrays(trajectories)
    dt = data_dt if dt is None else dt
    if dt is None:
        raise ValueError("sampling interval dt is required for raw arrays")
    if not arrays:
        raise ValueError("no trajectories")
    dim = arrays[0].shape[1]
    for i, a in enumerate(arrays):
        if a.ndim != 2 or a.shape[1] != dim:
            raise ValueError(f"trajectory {i} has inconsistent dimension")
        if len(a) < 2:
            raise ValueError(f"trajectory {i} has fewer than two points")
    return arrays, dt


def prepare_model(trajectories, config: TrainConfig | None = None, dt: float | None = None) -> ImitationModel:
    """The untrained model: fitted normalizer, identity flow, heuristic dynamics."""
    config = config or TrainConfig()
    arrays, dt = _validated(trajectories, dt)
    dim = arrays[0].shape[1]
    normalizer = Normalizer.fit(arrays, config.latent)
    model = build_model(dim, config.latent, dt, normalizer, config.depth, config.hidden, config.seed, config.eps)
    normed = [normalizer.apply(a) for a in arrays]
    if config.init_dynamics:
        if config.latent == "linear":
            init = init_linear_from_mean_velocity(normed, dt, config.eps)
        else:
            init = init_cycle_from_pca_fft(normed, dt, config.eps)
        model.latent.load_state_dict(init.state_dict())
    return model


def train(
    trajectories,
    config: TrainConfig | None = None,
    rng: np.random.Generator | None = None,
    dt: float | None = None,
) -> tuple[ImitationModel, LossReport]:
    config = config or TrainConfig()
    arrays, dt = _validated(trajectories, dt)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    model = prepare_model(arrays, config, dt)

    report = LossReport()
    report.initial_nll = dataset_nll(model, arrays)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas)
    params = list(model.parameters())
    checkpoint = copy.deepcopy(model.state_dict())
    # per-iteration losses are noisy, so the returned parameters are the best
    # of the periodic full-dataset evaluations
    best_state, best_nll = copy.deepcopy(model.state_dict()), report.initial_nll
    start = time.perf_counter()

    for epoch in range(config.epochs):
        k = int(rng.integers(len(arrays)))
        stride = int(rng.integers(1, config.s_max + 1))
        stride = min(stride, len(arrays[k]) - 1)
        opt.zero_grad()
        try:
            terms = model.loss_terms(arrays[k], stride)
            loss = -terms["total"]
            if not torch.isfinite(loss):
                raise NonFiniteError(f"loss is {loss.item()} at epoch {epoch}")
            loss.backward()
            grads = [p.grad for p in params if p.grad is not None]
            norm = float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads])))
            if not math.isfinite(norm):
                raise NonFiniteError(f"gradient is not finite at epoch {epoch}")
        except (NonFiniteError, UnstableDiscretizationError, OriginError, torch.linalg.LinAlgError) as exc:
            model.load_state_dict(checkpoint)
            report.final_nll = dataset_nll(model, arrays)
            raise TrainingAborted(str(exc), model, report) from exc

        if norm > config.clip_norm:
            factor = config.clip_norm / norm
            for g in grads:
                g.mul_(factor)
        clipped = float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads])))
        checkpoint = copy.deepcopy(model.state_dict())
        opt.step()

        report.nll.append(loss.item())
        report.endpoint.append(-terms["endpoint"].item())
        report.conditionals.append(-terms["conditionals"].item())
        report.logdet.append(-terms["logdet"].item())
        report.grad_norm.append(norm)
        report.clipped_norm.append(clipped)
        report.stride.append(stride)
        report.trajectory.append(k)
        report.wall_time.append(time.perf_counter() - start)
        if epoch % 100 == 0:
            log.debug("epoch %d nll %.6g grad %.3g", epoch, loss.item(), norm)
        done = epoch + 1
        stop = _plateaued(report.nll, config.plateau_window, config.plateau_tol)
        if done % config.eval_every == 0 or stop or done == config.epochs:
            score = _safe_nll(model, arrays)
            report.eval_epochs.append(done)
            report.eval_nll.append(score)
            if score < best_nll:
                best_state, best_nll, report.best_epoch = copy.deepcopy(model.state_dict()), score, done
        if stop:
            report.stopped_early = True
            break

    model.load_state_dict(best_state)
    report.final_nll = best_nll
    if not math.isfinite(best_nll):
        raise TrainingAborted("no finite evaluation of the training loss", model, report)
    return model, report
