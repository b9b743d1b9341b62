"""Dense linear algebra helpers and gradient utilities over flat parameter vectors.

Everything here works on float64. The matrix helpers accept numpy arrays or
torch tensors and return the same kind they were given, so the same code path
serves both the differentiable loss and plain numerical checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch

DTYPE = torch.float64
MAX_CONDITION = 1e12


class SingularMatrixError(ValueError):
    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


class NonFiniteError(FloatingPointError):
    """Raised when a value that must be finite is not; `group` names the culprit."""

    def __init__(self, message: str, group: str | None = None):
        super().__init__(message if group is None else f"{message} [{group}]")
        self.group = group


def _is_torch(x) -> bool:
    return isinstance(x, torch.Tensor)


def as_tensor(x) -> torch.Tensor:
    if _is_torch(x):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def matmul(a, b):
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"dimension mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    if _is_torch(a) or _is_torch(b):
        return as_tensor(a) @ as_tensor(b)
    return np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)


def condition_number(a) -> float:
    a_np = a.detach().cpu().numpy() if _is_torch(a) else np.asarray(a, dtype=np.float64)
    with np.errstate(all="ignore"):
        c = np.linalg.cond(a_np)
    return float(c) if np.isfinite(c) else float("inf")


def solve(a, b, max_condition: float = MAX_CONDITION):
    """Solve a @ x = b, refusing ill-conditioned systems."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"solve needs a square matrix, got {tuple(a.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    cond = condition_number(a)
    if not cond < max_condition:
        raise SingularMatrixError("matrix is singular or ill-conditioned", cond)
    if _is_torch(a) or _is_torch(b):
        return torch.linalg.solve(as_tensor(a), as_tensor(b))
    return np.linalg.solve(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


def kron(a, b):
    """Kronecker product; block (i, j) is a[i, j] * b.

    With column-stacking vec this satisfies vec(B X A^T) = kron(A, B) vec(X).
    """
    if _is_torch(a) or _is_torch(b):
        return torch.kron(as_tensor(a), as_tensor(b))
    return np.kron(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


def vec(x):
    """Column-stacking vectorization."""
    return x.T.reshape(-1) if _is_torch(x) else np.asarray(x).T.reshape(-1)


def unvec(v, rows: int, cols: int | None = None):
    cols = rows if cols is None else cols
    return v.reshape(cols, rows).T


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter values with a named-slice layout."""

    values: np.ndarray
    layout: Mapping[str, slice] = field(default_factory=dict)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "values", values)
        if self.layout:
            covered = np.zeros(values.size, dtype=int)
            for sl in self.layout.values():
                covered[sl] += 1
            if not np.all(covered == 1):
                raise ValueError("layout slices must be disjoint and cover the vector")

    def __len__(self) -> int:
        return self.values.size

    def group(self, name: str) -> np.ndarray:
        return self.values[self.layout[name]]

    def group_of(self, index: int) -> str | None:
        for name, sl in self.layout.items():
            if sl.start <= index < sl.stop:
                return name
        return None

    def with_values(self, values) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64), self.layout)


@dataclass(frozen=True)
class GradientReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_err: float


LossFn = Callable[[torch.Tensor], torch.Tensor]


def _values(at) -> np.ndarray:
    return at.values if isinstance(at, ParamVector) else np.asarray(at, dtype=np.float64)


def gradient(loss: LossFn, at) -> np.ndarray:
    """Reverse-mode gradient of a scalar loss of a flat float64 vector."""
    p = torch.tensor(_values(at), dtype=DTYPE, requires_grad=True)
    value = loss(p)
    if not torch.isfinite(value):
        raise NonFiniteError(f"loss is not finite: {float(value.detach())}")
    if not value.requires_grad:
        return np.zeros_like(_values(at))
    (grad,) = torch.autograd.grad(value, p, allow_unused=True)
    if grad is None:
        return np.zeros_like(_values(at))
    g = grad.detach().numpy().copy()
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        group = at.group_of(int(bad[0])) if isinstance(at, ParamVector) else None
        raise NonFiniteError("non-finite gradient entry", group)
    return g


def finite_difference_gradient(loss: LossFn, at, step: float = 1e-5) -> np.ndarray:
    if step <= 0:
        raise ValueError("step must be positive")
    x = _values(at).copy()
    g = np.empty_like(x)
    with torch.no_grad():
        for i in range(x.size):
            orig = x[i]
            x[i] = orig + step
            up = float(loss(torch.from_numpy(x.copy())))
            x[i] = orig - step
            down = float(loss(torch.from_numpy(x.copy())))
            x[i] = orig
            g[i] = (up - down) / (2.0 * step)
    return g


def check_gradient(loss: LossFn, at, step: float = 1e-5) -> GradientReport:
    """Compare reverse-mode and central-difference gradients.

    The error is measured in the max norm relative to the numeric gradient's
    max norm, so tiny coordinates do not dominate through rounding noise.
    """
    analytic = gradient(loss, at)
    numeric = finite_difference_gradient(loss, at, step)
    scale = max(float(np.max(np.abs(numeric), initial=0.0)), 1e-300)
    err = float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale
    return GradientReport(analytic, numeric, err)
