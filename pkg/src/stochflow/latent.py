"""Latent stochastic dynamics that are stable by construction.

``LinearSDE`` is dz = A z dt + K dB with A = S - (L L^T + eps I), S skew and L
lower triangular with a positive diagonal, so A + A^T is negative definite and
A is Hurwitz for any raw parameter values.

``LimitCycleSDE`` runs linear dynamics in polar coordinates on the first two
latent coordinates (radius attracted to rho*, phase rotating at rate b) and a
``LinearSDE`` on any remaining coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as tfn

from .diffcore import DTYPE, NonFiniteError, kron, solve, vec

ORIGIN_RADIUS = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


class UnstableDiscretizationError(ValueError):
    def __init__(self, radius: float, dt: float):
        super().__init__(f"discretized system unstable: spectral radius {radius:.6g} >= 1 at dt={dt:g}")
        self.radius = radius


class OriginError(ValueError):
    """A point is too close to the origin for the polar map."""


def softplus_inverse(x):
    x = torch.as_tensor(x, dtype=DTYPE)
    return x + torch.log(-torch.expm1(-x))


def wrap_angle(x: torch.Tensor) -> torch.Tensor:
    """Map angles into (-pi, pi]."""
    return torch.atan2(torch.sin(x), torch.cos(x))


# Gaussians


class GaussianDensity:
    """Multivariate normal with a cached Cholesky factor.

    ``mean`` may carry leading batch dimensions; the covariance is shared.
    """

    def __init__(self, mean, covariance):
        self.mean = torch.as_tensor(mean, dtype=DTYPE)
        cov = torch.as_tensor(covariance, dtype=DTYPE)
        if cov.ndim == 0:
            cov = cov.reshape(1, 1)
        self.covariance = 0.5 * (cov + cov.T)
        self.chol = _cholesky(self.covariance)

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    def log_density(self, x) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=DTYPE)
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected last dimension {self.dim}, got {tuple(x.shape)}")
        diff = (x - self.mean).reshape(-1, self.dim)
        white = torch.linalg.solve_triangular(self.chol, diff.T, upper=False)
        maha = (white**2).sum(dim=0)
        logdet = 2.0 * torch.log(torch.diagonal(self.chol)).sum()
        out = -0.5 * (maha + logdet + self.dim * LOG_2PI)
        return out.reshape(torch.broadcast_shapes(x.shape, self.mean.shape)[:-1])

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        shape = (self.dim,) if n is None else (n, self.dim)
        xi = rng.standard_normal(shape)
        return self.mean.detach().numpy() + xi @ self.chol.detach().numpy().T


def _cholesky(cov: torch.Tensor) -> torch.Tensor:
    chol, info = torch.linalg.cholesky_ex(cov)
    if int(info) == 0:
        return chol
    d = cov.shape[0]
    jitter = 1e-9 * float(torch.trace(cov).detach()) / d
    chol, info = torch.linalg.cholesky_ex(cov + jitter * torch.eye(d, dtype=DTYPE))
    if int(info) != 0 or jitter <= 0:
        raise ValueError("covariance is not symmetric positive definite")
    return chol


def log_density(g: GaussianDensity, x) -> torch.Tensor:
    return g.log_density(x)


# Linear dynamics


@dataclass(frozen=True)
class DiscretizedLinear:
    F: torch.Tensor
    Sigma: torch.Tensor
    dt: float


def spectral_radius(m: torch.Tensor) -> float:
    return float(torch.linalg.eigvals(m.detach()).abs().max())


class LinearSDE(nn.Module):
    kind = "linear"

    def __init__(self, dim: int, eps: float = 0.01):
        super().__init__()
        if eps <= 0:
            raise ValueError("stability margin must be positive")
        self.dim = dim
        self.eps = float(eps)
        self.raw_skew = nn.Parameter(torch.zeros(dim * (dim - 1) // 2, dtype=DTYPE))
        self.raw_spd = nn.Parameter(torch.zeros(dim * (dim + 1) // 2, dtype=DTYPE))
        self.raw_diffusion = nn.Parameter(0.1 * torch.eye(dim, dtype=DTYPE))
        self._tril = torch.tril_indices(dim, dim)
        self._triu = torch.triu_indices(dim, dim, offset=1)

    def spd_factor(self) -> torch.Tensor:
        d = self.dim
        lower = torch.zeros(d, d, dtype=DTYPE).index_put((self._tril[0], self._tril[1]), self.raw_spd)
        diag = torch.diagonal(lower)
        return lower - torch.diag(diag) + torch.diag(tfn.softplus(diag))

    def skew(self) -> torch.Tensor:
        d = self.dim
        upper = torch.zeros(d, d, dtype=DTYPE).index_put((self._triu[0], self._triu[1]), self.raw_skew)
        return upper - upper.T

    def drift_matrix(self) -> torch.Tensor:
        lower = self.spd_factor()
        eye = torch.eye(self.dim, dtype=DTYPE)
        return self.skew() - (lower @ lower.T + self.eps * eye)

    def diffusion_matrix(self) -> torch.Tensor:
        return self.raw_diffusion

    @torch.no_grad()
    def set_matrices(self, A, K) -> "LinearSDE":
        """Realize a given drift and diffusion; A + A^T must be below -2 eps I."""
        A = torch.as_tensor(np.asarray(A, dtype=np.float64))
        K = torch.as_tensor(np.asarray(K, dtype=np.float64))
        sym = -(A + A.T) / 2 - self.eps * torch.eye(self.dim, dtype=DTYPE)
        lower, info = torch.linalg.cholesky_ex(sym)
        if int(info) != 0:
            raise ValueError("drift matrix is outside the stable parameterization")
        raw = lower.clone()
        raw.diagonal().copy_(softplus_inverse(torch.diagonal(lower)))
        self.raw_spd.copy_(raw[self._tril[0], self._tril[1]])
        skew = (A - A.T) / 2
        self.raw_skew.copy_(skew[self._triu[0], self._triu[1]])
        self.raw_diffusion.copy_(K)
        return self

    def drift(self, z):
        return z @ self.drift_matrix().T

    def discretize(self, dt: float) -> DiscretizedLinear:
        return discretize(self, dt)

    def stationary_log_density(self, z: torch.Tensor, dt: float) -> torch.Tensor:
        disc = self.discretize(dt)
        cov = stationary_covariance(disc)
        return GaussianDensity(torch.zeros(self.dim, dtype=DTYPE), cov).log_density(z)

    def backward_log_density(self, z_prev: torch.Tensor, z_next: torch.Tensor, dt: float, steps: int = 1):
        return backward_conditional(self.discretize(dt), z_next, steps).log_density(z_prev)

    def em_step(self, z: np.ndarray, dt: float, rng: np.random.Generator, noise_scale: float = 1.0):
        with torch.no_grad():
            A = self.drift_matrix().numpy()
            K = noise_scale * self.diffusion_matrix().numpy()
        return euler_maruyama_step(lambda x: x @ A.T, lambda x: K, z, dt, rng)

    def expected_velocity(self, z: torch.Tensor) -> torch.Tensor:
        return self.drift(z)

    def equilibrium(self) -> np.ndarray:
        return np.zeros(self.dim)

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "eps": self.eps}


def discretize(sde: LinearSDE, dt: float) -> DiscretizedLinear:
    """Euler discretization F = I + A dt, Sigma = K K^T dt."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    A = sde.drift_matrix()
    K = sde.diffusion_matrix()
    F = torch.eye(sde.dim, dtype=DTYPE) + A * dt
    radius = spectral_radius(F)
    if radius >= 1.0:
        raise UnstableDiscretizationError(radius, dt)
    return DiscretizedLinear(F, K @ K.T * dt, dt)


def stationary_covariance(disc: DiscretizedLinear) -> torch.Tensor:
    """Solve Sigma_inf = F Sigma_inf F^T + Sigma through its vectorized form."""
    F = disc.F
    d = F.shape[0]
    if spectral_radius(F) >= 1.0:
        raise UnstableDiscretizationError(spectral_radius(F), disc.dt)
    lhs = torch.eye(d * d, dtype=DTYPE) - kron(F, F)
    sol = solve(lhs, vec(disc.Sigma).unsqueeze(1)).squeeze(1)
    cov = sol.reshape(d, d).T
    return 0.5 * (cov + cov.T)


def multistep(disc: DiscretizedLinear, steps: int) -> tuple[torch.Tensor, torch.Tensor]:
    """(F^s, sum_{i<s} F^i Sigma F^i^T)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    power = torch.eye(disc.F.shape[0], dtype=DTYPE)
    acc = torch.zeros_like(disc.Sigma)
    for _ in range(steps):
        acc = acc + power @ disc.Sigma @ power.T
        power = disc.F @ power
    return power, acc


def backward_conditional(disc: DiscretizedLinear, z_next, steps: int = 1) -> GaussianDensity:
    """p(z_i | z_{i+s}) = N(F^-s z_{i+s}, F^-s Sigma_s F^-s^T)."""
    Fs, Sigma_s = multistep(disc, steps)
    Finv = solve(Fs, torch.eye(Fs.shape[0], dtype=DTYPE))
    z_next = torch.as_tensor(z_next, dtype=DTYPE)
    return GaussianDensity(z_next @ Finv.T, Finv @ Sigma_s @ Finv.T)


# Polar coordinates


def cartesian_to_polar(p, origin_radius: float = ORIGIN_RADIUS):
    """(rho, psi, log |d(rho, psi)/d(x, y)|) for points (..., 2)."""
    p = torch.as_tensor(p, dtype=DTYPE)
    x, y = p[..., 0], p[..., 1]
    r2 = x * x + y * y
    if bool((r2 <= origin_radius**2).any()):
        raise OriginError(f"point within {origin_radius:g} of the origin; polar map is singular there")
    return torch.sqrt(r2), torch.atan2(y, x), -0.5 * torch.log(r2)


def polar_to_cartesian(rho, psi):
    rho = torch.as_tensor(rho, dtype=DTYPE)
    psi = torch.as_tensor(psi, dtype=DTYPE)
    if bool((rho <= 0).any()):
        raise ValueError("radius must be positive")
    return torch.stack([rho * torch.cos(psi), rho * torch.sin(psi)], dim=-1)


class LimitCycleSDE(nn.Module):
    """d rho = a (rho - rho*) dt + s1 dB, d psi = b dt + s2 dB, plus linear extra dims."""

    kind = "cycle"

    def __init__(self, dim: int = 2, eps: float = 0.01):
        super().__init__()
        if dim < 2:
            raise ValueError("limit cycle needs dim >= 2")
        self.dim = dim
        self.raw_a = nn.Parameter(softplus_inverse(1.0).reshape(()))
        self.b = nn.Parameter(torch.tensor(1.0, dtype=DTYPE))
        self.raw_rho = nn.Parameter(softplus_inverse(1.0).reshape(()))
        self.raw_sigma1 = nn.Parameter(softplus_inverse(0.1).reshape(()))
        self.raw_sigma2 = nn.Parameter(softplus_inverse(0.1).reshape(()))
        self.eps = eps
        self.extra = LinearSDE(dim - 2, eps) if dim > 2 else None

    @property
    def a(self) -> torch.Tensor:
        return -tfn.softplus(self.raw_a)

    @property
    def rho_star(self) -> torch.Tensor:
        return tfn.softplus(self.raw_rho)

    @property
    def sigma1(self) -> torch.Tensor:
        return tfn.softplus(self.raw_sigma1)

    @property
    def sigma2(self) -> torch.Tensor:
        return tfn.softplus(self.raw_sigma2)

    @torch.no_grad()
    def set_values(self, a: float, b: float, rho_star: float, sigma1: float, sigma2: float) -> "LimitCycleSDE":
        if a >= 0 or rho_star <= 0 or sigma1 <= 0 or sigma2 <= 0:
            raise ValueError("need a < 0 and positive rho*, sigma1, sigma2")
        self.raw_a.copy_(softplus_inverse(-a))
        self.b.fill_(b)
        self.raw_rho.copy_(softplus_inverse(rho_star))
        self.raw_sigma1.copy_(softplus_inverse(sigma1))
        self.raw_sigma2.copy_(softplus_inverse(sigma2))
        return self

    def radial_discretized(self, dt: float) -> DiscretizedLinear:
        if not dt > 0:
            raise ValueError("dt must be positive")
        F = (1.0 + self.a * dt).reshape(1, 1)
        radius = abs(float(F.detach()))
        if radius >= 1.0:
            raise UnstableDiscretizationError(radius, dt)
        return DiscretizedLinear(F, (self.sigma1**2 * dt).reshape(1, 1), dt)

    def stationary_log_density(self, z: torch.Tensor, dt: float) -> torch.Tensor:
        return cycle_stationary_logdensity(self, z, dt)

    def backward_log_density(self, z_prev: torch.Tensor, z_next: torch.Tensor, dt: float, steps: int = 1):
        return cycle_backward_conditional(self, z_next, dt, steps)(z_prev)

    def em_step(self, z: np.ndarray, dt: float, rng: np.random.Generator, noise_scale: float = 1.0):
        z = np.atleast_2d(z)
        with torch.no_grad():
            a, b = float(self.a), float(self.b)
            rho_star = float(self.rho_star)
            s1, s2 = noise_scale * float(self.sigma1), noise_scale * float(self.sigma2)
        rho = np.hypot(z[:, 0], z[:, 1])
        if np.any(rho <= ORIGIN_RADIUS):
            raise OriginError("rollout reached the polar origin")
        polar = np.stack([rho, np.arctan2(z[:, 1], z[:, 0])], axis=1)
        g = np.diag([s1, s2])
        polar = euler_maruyama_step(
            lambda q: np.stack([a * (q[:, 0] - rho_star), np.full(q.shape[0], b)], axis=1),
            lambda q: g,
            polar,
            dt,
            rng,
        )
        # a noisy step can cross the origin; reflect through it
        flip = polar[:, 0] < 0
        polar[flip, 0] *= -1
        polar[flip, 1] += np.pi
        out = np.empty_like(z)
        out[:, 0] = polar[:, 0] * np.cos(polar[:, 1])
        out[:, 1] = polar[:, 0] * np.sin(polar[:, 1])
        if self.extra is not None:
            out[:, 2:] = self.extra.em_step(z[:, 2:], dt, rng, noise_scale)
        return out

    def expected_velocity(self, z: torch.Tensor) -> torch.Tensor:
        """Deterministic drift mapped to cartesian coordinates."""
        rho, psi, _ = cartesian_to_polar(z[..., :2])
        rho_dot = self.a * (rho - self.rho_star)
        c, s = torch.cos(psi), torch.sin(psi)
        planar = torch.stack([rho_dot * c - rho * self.b * s, rho_dot * s + rho * self.b * c], dim=-1)
        if self.extra is None:
            return planar
        return torch.cat([planar, self.extra.drift(z[..., 2:])], dim=-1)

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "eps": self.eps}


def cycle_stationary_logdensity(sde: LimitCycleSDE, p, dt: float) -> torch.Tensor:
    """Gaussian radius around rho*, uniform phase, mapped to cartesian coordinates."""
    p = torch.as_tensor(p, dtype=DTYPE)
    rho, _, logdet = cartesian_to_polar(p[..., :2])
    var = stationary_covariance(sde.radial_discretized(dt))[0, 0]
    radial = -0.5 * ((rho - sde.rho_star) ** 2 / var + torch.log(var) + LOG_2PI)
    out = radial - LOG_2PI + logdet
    if sde.extra is not None:
        out = out + sde.extra.stationary_log_density(p[..., 2:], dt)
    return out


def _wrapped_normal_logpdf(residual: torch.Tensor, var: torch.Tensor) -> torch.Tensor:
    r = wrap_angle(residual)
    shifts = torch.tensor([-2.0 * math.pi, 0.0, 2.0 * math.pi], dtype=DTYPE)
    terms = -0.5 * ((r.unsqueeze(-1) + shifts) ** 2 / var + torch.log(var) + LOG_2PI)
    return torch.logsumexp(terms, dim=-1)


def cycle_backward_conditional(
    sde: LimitCycleSDE, z_next, dt: float, steps: int = 1
) -> Callable[[torch.Tensor], torch.Tensor]:
    """Log-density of z_i given z_{i+s}, as a function of z_i."""
    z_next = torch.as_tensor(z_next, dtype=DTYPE)
    rho_next, psi_next, _ = cartesian_to_polar(z_next[..., :2])
    radial = backward_conditional(sde.radial_discretized(dt), (rho_next - sde.rho_star).unsqueeze(-1), steps)
    phase_mean = psi_next - sde.b * dt * steps
    phase_var = sde.sigma2**2 * dt * steps
    extra = backward_conditional(sde.extra.discretize(dt), z_next[..., 2:], steps) if sde.extra is not None else None

    def logpdf(z_prev) -> torch.Tensor:
        z_prev = torch.as_tensor(z_prev, dtype=DTYPE)
        rho, psi, logdet = cartesian_to_polar(z_prev[..., :2])
        out = radial.log_density((rho - sde.rho_star).unsqueeze(-1))
        out = out + _wrapped_normal_logpdf(psi - phase_mean, phase_var) + logdet
        if extra is not None:
            out = out + extra.log_density(z_prev[..., 2:])
        return out

    return logpdf


# Simulation


def euler_maruyama_step(drift, diffusion, z, dt: float, rng: np.random.Generator):
    """z' = z + f(z) dt + g(z) sqrt(dt) xi for a batch z of shape (N, d) or (d,)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    z = np.asarray(z, dtype=np.float64)
    f = np.asarray(drift(z), dtype=np.float64)
    g = np.asarray(diffusion(z), dtype=np.float64)
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise NonFiniteError("non-finite drift or diffusion", "latent")
    xi = rng.standard_normal(z.shape)
    if g.ndim == z.ndim + 1:
        noise = np.einsum("...ij,...j->...i", g, xi)
    else:
        noise = xi @ g.T
    return z + f * dt + math.sqrt(dt) * noise


def rollout(dynamics, z0, n_steps: int, dt: float, rng: np.random.Generator, noise_scale: float = 1.0) -> np.ndarray:
    """Iterate Euler-Maruyama; returns (n_steps + 1, d) or (n_steps + 1, N, d) for batched z0."""
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    if not 0.0 <= noise_scale <= 1.0:
        raise ValueError("noise_scale must lie in [0, 1]")
    z = np.asarray(z0, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    path = [z]
    for _ in range(n_steps):
        z = dynamics.em_step(z, dt, rng, noise_scale)
        path.append(z)
    out = np.stack(path)
    return out[:, 0] if single else out
