"""Invertible emission maps: affine coupling layers and Householder rotations.

All layers act on batches shaped (N, d). ``forward`` maps latent -> observed and
returns the log |det| of its Jacobian per point; ``inverse`` maps back and
returns the log |det| of the inverse Jacobian.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .diffcore import DTYPE, NonFiniteError

SCALE_CLAMP = 5.0


class MLP(nn.Module):
    """tanh network with a linear output layer."""

    def __init__(self, n_in: int, n_out: int, hidden: Sequence[int] = (64, 64)):
        super().__init__()
        widths = [n_in, *hidden, n_out]
        self.linears = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(widths[:-1], widths[1:])
        )
        self.reset_parameters()

    @property
    def widths(self) -> list[int]:
        return [self.linears[0].in_features] + [lin.out_features for lin in self.linears]

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        with torch.no_grad():
            for lin in self.linears[:-1]:
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.uniform_(-bound, bound, generator=generator)
                lin.bias.uniform_(-bound, bound, generator=generator)
            self.linears[-1].weight.zero_()
            self.linears[-1].bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for lin in self.linears[:-1]:
            x = torch.tanh(lin(x))
        return self.linears[-1](x)

    def jacobian(self, x: torch.Tensor) -> torch.Tensor:
        """Per-sample Jacobian, shape (N, n_out, n_in)."""
        jac = None
        for lin in self.linears[:-1]:
            x = torch.tanh(lin(x))
            local = (1.0 - x**2).unsqueeze(-1) * lin.weight
            jac = local if jac is None else local @ jac
        w = self.linears[-1].weight
        return w.expand(x.shape[0], *w.shape) if jac is None else w @ jac


def _squash(raw: torch.Tensor) -> torch.Tensor:
    return SCALE_CLAMP * torch.tanh(raw / SCALE_CLAMP)


class CouplingLayer(nn.Module):
    """Affine coupling: y_A = z_A * exp(s(z_P)) + t(z_P), y_P = z_P.

    ``parity`` selects which coordinates are active: indices i with i % 2 == parity.
    """

    def __init__(self, dim: int, parity: int, hidden: Sequence[int] = (64, 64)):
        super().__init__()
        if dim < 2:
            raise ValueError("coupling layers need dim >= 2")
        self.dim = dim
        self.parity = parity % 2
        active = [i for i in range(dim) if i % 2 == self.parity]
        passive = [i for i in range(dim) if i % 2 != self.parity]
        self.register_buffer("active", torch.tensor(active, dtype=torch.long), persistent=False)
        self.register_buffer("passive", torch.tensor(passive, dtype=torch.long), persistent=False)
        self.hidden = tuple(hidden)
        self.scale_net = MLP(len(passive), len(active), hidden)
        self.translate_net = MLP(len(passive), len(active), hidden)

    def _assemble(self, active_part: torch.Tensor, passive_part: torch.Tensor) -> torch.Tensor:
        out = torch.empty(active_part.shape[0], self.dim, dtype=active_part.dtype)
        out = out.index_copy(1, self.active, active_part)
        return out.index_copy(1, self.passive, passive_part)

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        zp = z[:, self.passive]
        s = _squash(self.scale_net(zp))
        ya = z[:, self.active] * torch.exp(s) + self.translate_net(zp)
        return self._assemble(ya, zp), s.sum(dim=1)

    def inverse(self, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        yp = y[:, self.passive]
        s = _squash(self.scale_net(yp))
        za = (y[:, self.active] - self.translate_net(yp)) * torch.exp(-s)
        return self._assemble(za, yp), -s.sum(dim=1)

    def jacobian(self, z: torch.Tensor) -> torch.Tensor:
        zp = z[:, self.passive]
        raw = self.scale_net(zp)
        s = _squash(raw)
        es = torch.exp(s)
        ds_draw = 1.0 - torch.tanh(raw / SCALE_CLAMP) ** 2
        ds = ds_draw.unsqueeze(-1) * self.scale_net.jacobian(zp)
        dya_dzp = (z[:, self.active] * es).unsqueeze(-1) * ds + self.translate_net.jacobian(zp)
        n = z.shape[0]
        jac = torch.zeros(n, self.dim, self.dim, dtype=z.dtype)
        a, p = self.active, self.passive
        jac[:, a, a] = es
        jac[:, p, p] = 1.0
        jac[:, a[:, None], p[None, :]] = dya_dzp
        return jac


class OrthogonalLayer(nn.Module):
    """y = Q z with Q a product of Householder reflections H_1 ... H_m.

    The inverse is the transpose and the log-determinant is zero.
    """

    def __init__(self, dim: int, n_reflections: int | None = None):
        super().__init__()
        self.dim = dim
        m = default_reflections(dim) if n_reflections is None else n_reflections
        if m < 1:
            raise ValueError("need at least one Householder vector")
        self.vectors = nn.Parameter(torch.zeros(m, dim, dtype=DTYPE))
        self.reset_parameters(identity=m % 2 == 0)

    def reset_parameters(self, generator: torch.Generator | None = None, identity: bool = True) -> None:
        """Random vectors; with ``identity`` they come in equal pairs so Q = I."""
        m = self.vectors.shape[0]
        with torch.no_grad():
            v = torch.randn(m, self.dim, dtype=DTYPE, generator=generator)
            if identity:
                if m % 2:
                    raise ValueError("identity initialization needs an even reflection count")
                v[1::2] = v[0::2]
            self.vectors.copy_(v)

    def matrix(self) -> torch.Tensor:
        norms = self.vectors.norm(dim=1)
        if bool((norms < 1e-12).any()):
            raise NonFiniteError("Householder vector collapsed to zero", "orthogonal")
        q = torch.eye(self.dim, dtype=DTYPE)
        for v in self.vectors / norms[:, None]:
            # q <- q @ (I - 2 v v^T)
            q = q - 2.0 * torch.outer(q @ v, v)
        return q

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return z @ self.matrix().T, torch.zeros(z.shape[0], dtype=z.dtype)

    def inverse(self, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return y @ self.matrix(), torch.zeros(y.shape[0], dtype=y.dtype)

    def jacobian(self, z: torch.Tensor) -> torch.Tensor:
        return self.matrix().expand(z.shape[0], self.dim, self.dim)


def default_reflections(dim: int) -> int:
    # even count so the layer can start as the identity
    return dim + (dim % 2)


def _as_batch(x) -> tuple[torch.Tensor, bool, bool]:
    """Return (tensor of shape (N, d), was_numpy, was_1d)."""
    was_numpy = not isinstance(x, torch.Tensor)
    t = torch.as_tensor(np.asarray(x, dtype=np.float64)) if was_numpy else x
    was_1d = t.ndim == 1
    return (t.unsqueeze(0) if was_1d else t), was_numpy, was_1d


class FlowStack(nn.Module):
    """Composition h = L_k o ... o L_1 of invertible layers."""

    def __init__(self, dim: int, layers: Sequence[nn.Module]):
        super().__init__()
        for layer in layers:
            if layer.dim != dim:
                raise ValueError(f"layer dim {layer.dim} does not match stack dim {dim}")
        self.dim = dim
        self.layers = nn.ModuleList(layers)

    @classmethod
    def build(
        cls,
        dim: int,
        depth: int = 10,
        hidden: Sequence[int] = (64, 64),
        n_reflections: int | None = None,
        seed: int = 0,
    ) -> "FlowStack":
        """``depth`` (coupling, orthogonal) pairs, initialized to the identity map."""
        gen = torch.Generator().manual_seed(seed)
        layers: list[nn.Module] = []
        for k in range(depth):
            coupling = CouplingLayer(dim, parity=k, hidden=hidden)
            coupling.scale_net.reset_parameters(gen)
            coupling.translate_net.reset_parameters(gen)
            ortho = OrthogonalLayer(dim, n_reflections)
            ortho.reset_parameters(gen, identity=ortho.vectors.shape[0] % 2 == 0)
            layers += [coupling, ortho]
        return cls(dim, layers)

    def randomize(self, seed: int, output_scale: float = 0.3) -> "FlowStack":
        """Give every layer random (non-identity) parameters; for testing."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for layer in self.layers:
                if isinstance(layer, OrthogonalLayer):
                    layer.reset_parameters(gen, identity=False)
                else:
                    for net in (layer.scale_net, layer.translate_net):
                        net.reset_parameters(gen)
                        last = net.linears[-1]
                        last.weight.normal_(0.0, output_scale, generator=gen)
                        last.bias.normal_(0.0, output_scale, generator=gen)
        return self

    def describe(self) -> list[dict]:
        out = []
        for layer in self.layers:
            if isinstance(layer, CouplingLayer):
                out.append({"kind": "coupling", "parity": layer.parity, "hidden": list(layer.hidden)})
            else:
                out.append({"kind": "orthogonal", "reflections": int(layer.vectors.shape[0])})
        return out

    @classmethod
    def from_description(cls, dim: int, layers: list[dict]) -> "FlowStack":
        built: list[nn.Module] = []
        for spec in layers:
            if spec["kind"] == "coupling":
                built.append(CouplingLayer(dim, spec["parity"], spec["hidden"]))
            elif spec["kind"] == "orthogonal":
                built.append(OrthogonalLayer(dim, spec["reflections"]))
            else:
                raise ValueError(f"unknown layer kind {spec['kind']!r}")
        return cls(dim, built)

    # Batched torch maps (differentiable).

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        logdet = torch.zeros(z.shape[0], dtype=z.dtype)
        for layer in self.layers:
            z, ld = layer(z)
            logdet = logdet + ld
        return z, logdet

    def inverse(self, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        logdet = torch.zeros(y.shape[0], dtype=y.dtype)
        for layer in reversed(self.layers):
            y, ld = layer.inverse(y)
            logdet = logdet + ld
        return y, logdet

    def jacobian(self, z: torch.Tensor) -> torch.Tensor:
        """dy/dz per point, shape (N, d, d), by chaining exact layer Jacobians."""
        jac = torch.eye(self.dim, dtype=z.dtype).expand(z.shape[0], self.dim, self.dim)
        for layer in self.layers:
            jac = layer.jacobian(z) @ jac
            z, _ = layer(z)
        return jac


def _checked(values: torch.Tensor, logdet: torch.Tensor, what: str) -> None:
    ok = torch.isfinite(values).all(dim=1) & torch.isfinite(logdet)
    if not bool(ok.all()):
        idx = int(torch.nonzero(~ok)[0, 0])
        raise NonFiniteError(f"non-finite {what} output at point {idx}", "flow")


def _apply(fn, x, what: str):
    t, was_numpy, was_1d = _as_batch(x)
    if was_numpy:
        with torch.no_grad():
            out, ld = fn(t)
    else:
        out, ld = fn(t)
    _checked(out, ld, what)
    if was_numpy:
        out, ld = out.numpy(), ld.numpy()
    if was_1d:
        out, ld = out[0], (float(ld[0]) if was_numpy else ld[0])
    return out, ld


def forward(stack: FlowStack, z):
    """Apply h to one point (d,) or a batch (n, d). numpy in gives numpy out."""
    return _apply(stack.forward, z, "forward")


def inverse(stack: FlowStack, y):
    return _apply(stack.inverse, y, "inverse")


def forward_trajectory(stack: FlowStack, trajectory):
    traj = np.asarray(trajectory, dtype=np.float64).reshape(-1, stack.dim)
    if traj.shape[0] == 0:
        return traj.copy(), np.zeros(0)
    return forward(stack, traj)


def inverse_trajectory(stack: FlowStack, trajectory):
    traj = np.asarray(trajectory, dtype=np.float64).reshape(-1, stack.dim)
    if traj.shape[0] == 0:
        return traj.copy(), np.zeros(0)
    return inverse(stack, traj)


def jacobian(stack: FlowStack, z) -> np.ndarray:
    t, _, was_1d = _as_batch(z)
    with torch.no_grad():
        jac = stack.jacobian(t)
    jac = jac.numpy()
    return jac[0] if was_1d else jac
