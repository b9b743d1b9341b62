import math

import numpy as np
import pytest
import torch
from scipy.stats import multivariate_normal

from stochflow.diffcore import DTYPE
from stochflow.latent import (
    DiscretizedLinear,
    GaussianDensity,
    LimitCycleSDE,
    LinearSDE,
    OriginError,
    UnstableDiscretizationError,
    backward_conditional,
    cartesian_to_polar,
    cycle_backward_conditional,
    cycle_stationary_logdensity,
    discretize,
    euler_maruyama_step,
    log_density,
    polar_to_cartesian,
    rollout,
    stationary_covariance,
)


def scalar_disc(F, Sigma, dt=0.1):
    return DiscretizedLinear(torch.tensor([[F]], dtype=DTYPE), torch.tensor([[Sigma]], dtype=DTYPE), dt)


def random_linear(dim, seed, scale=1.0):
    sde = LinearSDE(dim)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in sde.parameters():
            p.copy_(scale * torch.randn(p.shape, dtype=DTYPE, generator=gen))
    return sde


def test_discretize_example():
    sde = LinearSDE(2).set_matrices(-np.eye(2), np.eye(2))
    disc = discretize(sde, 0.1)
    np.testing.assert_allclose(disc.F.detach(), 0.9 * np.eye(2), atol=1e-14)
    np.testing.assert_allclose(disc.Sigma.detach(), 0.1 * np.eye(2), atol=1e-14)


def test_discretize_rejects_bad_steps():
    sde = LinearSDE(2).set_matrices(-np.eye(2), np.eye(2))
    with pytest.raises(ValueError):
        discretize(sde, 0.0)
    with pytest.raises(UnstableDiscretizationError) as info:
        discretize(sde, 2.5)
    assert info.value.radius == pytest.approx(1.5)


def test_hurwitz_by_construction():
    rng = np.random.default_rng(0)
    for k in range(1000):
        dim = int(rng.integers(1, 6))
        sde = random_linear(dim, k, scale=float(rng.uniform(0.1, 5)))
        eig = np.linalg.eigvals(sde.drift_matrix().detach().numpy())
        assert eig.real.max() < -sde.eps / 2


def test_set_matrices_round_trip():
    A = np.array([[-1.0, 0.8], [-0.8, -2.0]])
    sde = LinearSDE(2).set_matrices(A, 0.3 * np.eye(2))
    np.testing.assert_allclose(sde.drift_matrix().detach(), A, atol=1e-12)
    with pytest.raises(ValueError):
        LinearSDE(2).set_matrices(np.array([[0.5, 0.0], [0.0, -1.0]]), np.eye(2))


def test_stationary_covariance_examples():
    np.testing.assert_allclose(stationary_covariance(scalar_disc(0.5, 0.75)), [[1.0]], rtol=1e-14)
    sigma = torch.tensor([[0.3, 0.1], [0.1, 0.2]], dtype=DTYPE)
    disc = DiscretizedLinear(torch.zeros(2, 2, dtype=DTYPE), sigma, 0.1)
    np.testing.assert_allclose(stationary_covariance(disc), sigma, atol=1e-15)


def test_stationary_fixed_point_and_series():
    sde = random_linear(3, 42)
    disc = discretize(sde, 0.05)
    cov = stationary_covariance(disc).detach().numpy()
    F, S = disc.F.detach().numpy(), disc.Sigma.detach().numpy()
    resid = np.abs(F @ cov @ F.T + S - cov).max()
    assert resid < 1e-8 * np.abs(cov).max()
    # truncated series as an independent check
    series, power = np.zeros_like(S), np.eye(3)
    for _ in range(20000):
        series += power @ S @ power.T
        power = F @ power
    np.testing.assert_allclose(cov, series, rtol=1e-6)


def test_backward_conditional_examples():
    g = backward_conditional(scalar_disc(0.5, 0.1), torch.tensor([1.0], dtype=DTYPE), 1)
    np.testing.assert_allclose(g.mean, [2.0])
    np.testing.assert_allclose(g.covariance, [[0.4]], rtol=1e-14)
    g2 = backward_conditional(scalar_disc(0.5, 0.1), torch.tensor([1.0], dtype=DTYPE), 2)
    np.testing.assert_allclose(g2.mean, [4.0])
    np.testing.assert_allclose(g2.covariance, [[2.0]], rtol=1e-14)
    sigma = torch.tensor([[0.2, 0.05], [0.05, 0.1]], dtype=DTYPE)
    z = torch.tensor([0.3, -0.4], dtype=DTYPE)
    g3 = backward_conditional(DiscretizedLinear(torch.eye(2, dtype=DTYPE), sigma, 0.1), z, 1)
    np.testing.assert_allclose(g3.mean, z)
    np.testing.assert_allclose(g3.covariance, sigma, atol=1e-15)


def test_log_density_examples():
    std = GaussianDensity(torch.zeros(1, dtype=DTYPE), torch.ones(1, 1, dtype=DTYPE))
    assert float(log_density(std, torch.zeros(1, dtype=DTYPE))) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
    four = GaussianDensity(torch.zeros(1, dtype=DTYPE), 4.0 * torch.ones(1, 1, dtype=DTYPE))
    assert float(four.log_density(torch.zeros(1, dtype=DTYPE))) == pytest.approx(-0.5 * math.log(8 * math.pi), abs=1e-15)


def test_log_density_matches_scipy_and_integrates():
    rng = np.random.default_rng(1)
    m = rng.standard_normal((3, 3))
    cov = 0.3 * (m @ m.T) + 0.2 * np.eye(3)
    mean = rng.standard_normal(3)
    g = GaussianDensity(mean, cov)
    x = rng.standard_normal((10, 3))
    np.testing.assert_allclose(g.log_density(x), multivariate_normal(mean, cov).logpdf(x), rtol=1e-12)
    half = 6 * np.sqrt(np.diag(cov))
    axes = [np.linspace(mu - h, mu + h, 70) for mu, h in zip(mean, half)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    cell = np.prod([a[1] - a[0] for a in axes])
    total = np.exp(g.log_density(grid).numpy()).sum() * cell
    assert abs(total - 1.0) < 0.01


def test_gaussian_rejects_non_spd():
    with pytest.raises(ValueError):
        GaussianDensity(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_bayes_identity_at_stationarity():
    """Forward/backward factorizations of the stationary joint agree.

    The posterior p(z_i | z_i+1) under the stationary prior satisfies Bayes
    exactly; the inverse-dynamics conditional used for training differs from
    the forward kernel by the constant |det F|.
    """
    rng = np.random.default_rng(3)
    for trial in range(5):
        sde = random_linear(1, trial)
        disc = discretize(sde, 0.05)
        F, S = disc.F.item(), disc.Sigma.item()
        var_inf = S / (1 - F * F)
        z_i, z_n = rng.standard_normal(2) * math.sqrt(var_inf)
        log_fwd = multivariate_normal(F * z_i, S).logpdf(z_n)
        log_p_i = multivariate_normal(0, var_inf).logpdf(z_i)
        log_p_n = multivariate_normal(0, var_inf).logpdf(z_n)
        post_var = var_inf - var_inf * F * F * var_inf / var_inf
        post_mean = var_inf * F / var_inf * z_n
        log_post = multivariate_normal(post_mean, post_var).logpdf(z_i)
        assert abs((log_post + log_p_n) - (log_fwd + log_p_i)) < 1e-8
        g = backward_conditional(disc, torch.tensor([z_n], dtype=DTYPE), 1)
        log_inv = g.log_density(torch.tensor([z_i], dtype=DTYPE)).item()
        assert abs(log_inv - (log_fwd + math.log(abs(F)))) < 1e-8


def test_polar_examples():
    rho, psi, logdet = cartesian_to_polar(torch.tensor([3.0, 4.0], dtype=DTYPE))
    assert float(rho) == 5.0
    assert float(psi) == pytest.approx(math.atan2(4, 3))
    assert math.exp(float(logdet)) == pytest.approx(0.2, rel=1e-14)
    rho, psi, logdet = cartesian_to_polar(torch.tensor([1.0, 0.0], dtype=DTYPE))
    assert (float(rho), float(psi), float(logdet)) == (1.0, 0.0, 0.0)
    np.testing.assert_allclose(polar_to_cartesian(1.0, 0.0), [1.0, 0.0])
    np.testing.assert_allclose(polar_to_cartesian(2.0, math.pi / 2), [0.0, 2.0], atol=1e-12)
    with pytest.raises(OriginError):
        cartesian_to_polar(torch.tensor([1e-7, 0.0], dtype=DTYPE))
    with pytest.raises(ValueError):
        polar_to_cartesian(0.0, 1.0)


def test_polar_round_trip_and_fd_determinant():
    rng = np.random.default_rng(4)
    rho = rng.uniform(0.1, 10, 100)
    psi = rng.uniform(-3.0, 3.0, 100)
    p = polar_to_cartesian(torch.as_tensor(rho), torch.as_tensor(psi))
    r2, s2, logdet = cartesian_to_polar(p)
    np.testing.assert_allclose(r2, rho, rtol=1e-12)
    np.testing.assert_allclose(s2, psi, atol=1e-12)
    h = 1e-6
    pts = p.numpy()
    jac = np.zeros((100, 2, 2))
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        up = cartesian_to_polar(torch.as_tensor(pts + e))
        down = cartesian_to_polar(torch.as_tensor(pts - e))
        jac[:, 0, j] = (up[0] - down[0]).numpy() / (2 * h)
        jac[:, 1, j] = (up[1] - down[1]).numpy() / (2 * h)
    np.testing.assert_allclose(np.abs(np.linalg.det(jac)), np.exp(logdet.numpy()), rtol=1e-6)


def cycle(**kw):
    values = dict(a=-2.0, b=1.5, rho_star=1.0, sigma1=0.3, sigma2=0.2)
    values.update(kw)
    return LimitCycleSDE(2).set_values(**values)


def test_cycle_parameters_are_constrained():
    with pytest.raises(ValueError):
        cycle(a=0.0)
    sde = LimitCycleSDE(2)
    with torch.no_grad():
        sde.raw_a.fill_(-30.0)
    assert sde.a.item() < 0


def test_cycle_stationary_density_shape():
    sde = cycle()
    dt = 0.02
    rays = np.linspace(0.2, 2.0, 181)
    for angle in (0.0, 1.0, -2.5):
        pts = np.stack([rays * math.cos(angle), rays * math.sin(angle)], axis=1)
        logp = cycle_stationary_logdensity(sde, pts, dt).detach().numpy() + np.log(rays)
        assert rays[np.argmax(logp)] == pytest.approx(1.0, abs=0.011)
    base = cycle_stationary_logdensity(sde, torch.tensor([1.0, 0.0], dtype=DTYPE), dt).item()
    for angle in np.linspace(-math.pi, math.pi, 13):
        p = torch.tensor([math.cos(angle), math.sin(angle)], dtype=DTYPE)
        assert abs(cycle_stationary_logdensity(sde, p, dt).item() - base) < 1e-10 * abs(base)


def test_cycle_stationary_density_integrates_to_one():
    sde = cycle(sigma1=0.1)
    axis = np.linspace(-1.8, 1.8, 700)
    grid = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    cell = (axis[1] - axis[0]) ** 2
    total = np.exp(cycle_stationary_logdensity(sde, grid, 0.02).detach().numpy()).sum() * cell
    assert abs(total - 1.0) < 0.05


def test_cycle_radial_conditional_matches_linear_backward():
    sde = cycle()
    dt, steps = 0.05, 3
    z_next = torch.tensor([[0.9, 0.4]], dtype=DTYPE)
    z_prev = torch.tensor([[0.7, 0.8]], dtype=DTYPE)
    got = cycle_backward_conditional(sde, z_next, dt, steps)(z_prev)[0].item()
    rho_n, psi_n, _ = cartesian_to_polar(z_next[0])
    rho_p, psi_p, logdet = cartesian_to_polar(z_prev[0])
    radial = backward_conditional(sde.radial_discretized(dt), (rho_n - sde.rho_star).reshape(1), steps)
    log_r = radial.log_density((rho_p - sde.rho_star).reshape(1)).item()
    var = sde.sigma2.item() ** 2 * dt * steps
    resid = psi_p.item() - (psi_n.item() - sde.b.item() * dt * steps)
    resid = math.atan2(math.sin(resid), math.cos(resid))
    log_psi = math.log(sum(math.exp(-0.5 * (resid + 2 * math.pi * k) ** 2 / var) for k in (-1, 0, 1)) / math.sqrt(2 * math.pi * var))
    assert got == pytest.approx(log_r + log_psi + logdet.item(), rel=1e-12)


def test_cycle_phase_conditional_small_noise_limit():
    sde = cycle(sigma2=1e-6)
    dt = 0.1
    z_next = torch.tensor([math.cos(0.5), math.sin(0.5)], dtype=DTYPE)
    logpdf = cycle_backward_conditional(sde, z_next, dt, 1)
    mean = 0.5 - 1.5 * dt
    at = lambda psi: logpdf(torch.tensor([math.cos(psi), math.sin(psi)], dtype=DTYPE)).item()
    assert at(mean) > at(mean + 1e-5) and at(mean) > at(mean - 1e-5)


def test_cycle_phase_wraps_across_pi():
    sde = cycle(b=0.0, sigma2=0.1)
    logpdf = cycle_backward_conditional(sde, torch.tensor([-1.0, -1e-3], dtype=DTYPE), 0.1, 1)
    near = logpdf(torch.tensor([-1.0, 1e-3], dtype=DTYPE)).item()
    far = logpdf(torch.tensor([1.0, 0.0], dtype=DTYPE)).item()
    assert near > far + 100


def test_euler_maruyama_trivial_cases():
    rng = np.random.default_rng(0)
    z = np.array([1.0, -2.0])
    zero = lambda x: np.zeros_like(x)
    np.testing.assert_array_equal(euler_maruyama_step(zero, lambda x: np.zeros((2, 2)), z, 0.1, rng), z)
    A = np.array([[-1.0, 0.5], [0.0, -2.0]])
    out = euler_maruyama_step(lambda x: x @ A.T, lambda x: np.zeros((2, 2)), z, 0.1, rng)
    np.testing.assert_allclose(out, z + 0.1 * A @ z)
    with pytest.raises(ValueError):
        euler_maruyama_step(zero, lambda x: np.eye(2), z, 0.0, rng)


def test_ou_stationary_variance_monte_carlo():
    theta, sigma, dt = 1.0, 0.5, 0.05
    sde = LinearSDE(1).set_matrices([[-theta]], [[sigma]])
    rng = np.random.default_rng(11)
    z = np.zeros((100_000, 1))
    for _ in range(300):
        z = sde.em_step(z, dt, rng)
    F, S = 1 - theta * dt, sigma**2 * dt
    expected = float(stationary_covariance(scalar_disc(F, S, dt)))
    assert expected == pytest.approx(S / (1 - F * F), rel=1e-12)
    assert abs(z.var() / expected - 1) < 0.03


def test_rollout_basics():
    sde = LinearSDE(2).set_matrices(np.array([[-1.0, 2.0], [-2.0, -0.5]]), 0.1 * np.eye(2))
    rng = np.random.default_rng(0)
    z0 = np.array([3.0, -4.0])
    np.testing.assert_array_equal(rollout(sde, z0, 0, 0.01, rng), [z0])
    slowest = np.abs(np.linalg.eigvals(sde.drift_matrix().detach().numpy()).real).min()
    dt = 0.01
    for start in np.random.default_rng(1).uniform(-1, 1, size=(5, 2)):
        start = 10 * start / np.linalg.norm(start)
        path = rollout(sde, start, int(50 / slowest / dt), dt, rng, noise_scale=0.0)
        assert np.linalg.norm(path[-1]) < 1e-3
    with pytest.raises(ValueError):
        rollout(sde, z0, -1, dt, rng)
    with pytest.raises(ValueError):
        rollout(sde, z0, 1, dt, rng, noise_scale=1.5)


def test_rollout_noise_free_is_deterministic():
    sde = random_linear(2, 3)
    a = rollout(sde, np.ones(2), 50, 0.01, np.random.default_rng(1), 0.0)
    b = rollout(sde, np.ones(2), 50, 0.01, np.random.default_rng(2), 0.0)
    np.testing.assert_array_equal(a, b)


def test_limit_cycle_rollout_radius_decays_monotonically():
    sde = cycle(a=-1.5)
    path = rollout(sde, np.array([[2.5, 0.0], [0.1, 0.05]]), 400, 0.02, np.random.default_rng(0), 0.0)
    rho = np.hypot(path[..., 0], path[..., 1])
    gap = np.abs(rho - 1.0)
    assert np.all(np.diff(gap, axis=0) <= 1e-12)
    assert gap[-1].max() < 1e-4


def test_limit_cycle_extra_dims_decay():
    sde = LimitCycleSDE(3).set_values(a=-1.0, b=2.0, rho_star=1.5, sigma1=0.1, sigma2=0.1)
    sde.extra.set_matrices([[-2.0]], [[0.1]])
    path = rollout(sde, np.array([0.5, 0.5, 3.0]), 1000, 0.01, np.random.default_rng(0), 0.0)
    assert abs(np.hypot(*path[-1, :2]) - 1.5) < 1e-3
    assert abs(path[-1, 2]) < 1e-3
    logp = cycle_stationary_logdensity(sde, torch.as_tensor(path[-1:]), 0.01)
    assert torch.isfinite(logp).all()


def test_stochastic_stability_monte_carlo():
    sde = LinearSDE(2).set_matrices(np.array([[-1.0, 1.0], [-1.0, -1.5]]), 0.05 * np.eye(2))
    slowest = np.abs(np.linalg.eigvals(sde.drift_matrix().detach().numpy()).real).min()
    dt = 0.01
    rng = np.random.default_rng(5)
    angles = rng.uniform(0, 2 * np.pi, 500)
    z0 = 5.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    path = rollout(sde, z0, int(10 / slowest / dt), dt, rng, 1.0)
    frac = np.mean(np.linalg.norm(path[-1], axis=1) < 0.5 * np.linalg.norm(z0, axis=1))
    assert frac > 0.95
