import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stochflow.data import (
    DataFormatError,
    Dataset,
    Trajectory,
    format_dataset,
    load,
    parse,
    resample,
    save,
    synth_limit_cycle,
    synth_point_to_point,
)

TWO = """dim=2 dt=0.1
0.0 1.0
0.5 0.5
1.0 0.0

# second demo
2.0 2.0
1.0 1.0
"""


def test_parse_two_trajectories():
    ds = parse(TWO)
    assert (len(ds), ds.dim, ds.dt) == (2, 2, 0.1)
    np.testing.assert_array_equal(ds[1].points, [[2.0, 2.0], [1.0, 1.0]])


def test_round_trip_is_byte_identical(tmp_path):
    path = tmp_path / "d.txt"
    save(parse(TWO), path)
    first = path.read_bytes()
    save(load(path), path)
    assert path.read_bytes() == first


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 3)), elements=st.floats(-1e6, 1e6)))
def test_round_trip_values(points):
    ds = Dataset.from_arrays([points, points[::-1]], 0.01)
    back = parse(format_dataset(ds))
    for a, b in zip(ds, back):
        np.testing.assert_allclose(a.points, b.points, rtol=1e-12, atol=0)


@pytest.mark.parametrize(
    "text, line",
    [
        ("", None),
        ("# only a comment\n", None),
        ("dim=2 dt=0.1\n", None),
        ("dim=2 dt=0.1\n1 2\n3\n", 3),
        ("dim=2 dt=0.1\n1 2\n3 x\n", 3),
        ("dim=2 dt=0.1\n1 nan\n", 2),
        ("dim=2\n1 2\n", 1),
        ("dim=2 dt=-1\n1 2\n", 1),
    ],
)
def test_parse_errors(text, line):
    with pytest.raises(DataFormatError) as info:
        parse(text)
    assert info.value.line == line
    if line is None:
        assert "no trajectories" in str(info.value)


def test_mixed_dims_rejected():
    with pytest.raises(ValueError):
        Dataset([Trajectory(np.zeros((2, 2)), 0.1), Trajectory(np.zeros((2, 3)), 0.1)], 2, 0.1)
    with pytest.raises(ValueError):
        Dataset([Trajectory(np.zeros((2, 2)), 0.1), Trajectory(np.zeros((2, 2)), 0.2)], 2, 0.1)
    with pytest.raises(ValueError):
        Dataset.from_arrays([np.zeros((2, 2)), np.zeros((2, 3))], 0.1)


def test_trajectory_invariants():
    with pytest.raises(ValueError):
        Trajectory(np.zeros((0, 2)), 0.1)
    with pytest.raises(ValueError):
        Trajectory(np.array([[np.inf, 0.0]]), 0.1)
    with pytest.raises(ValueError):
        Trajectory(np.zeros((2, 2)), 0.0)
    src = np.zeros((3, 2))
    t = Trajectory(src, 0.5)
    src[0, 0] = 9.0
    assert t.points[0, 0] == 0.0
    assert t.duration == 1.0


def test_resample_examples():
    line = Trajectory(np.stack([np.arange(5.0), 2 * np.arange(5.0)], axis=1), 0.2)
    assert resample(line, 0.2) is line
    half = resample(line, 0.1)
    assert len(half) == 9 and half.dt == pytest.approx(0.1)
    np.testing.assert_allclose(half.points[1::2], (line.points[:-1] + line.points[1:]) / 2, atol=1e-15)
    np.testing.assert_array_equal(half.points[[0, -1]], line.points[[0, -1]])
    with pytest.raises(ValueError):
        resample(Trajectory(np.zeros((1, 2)), 0.1), 0.05)
    with pytest.raises(ValueError):
        resample(line, 0.0)


def test_resample_down_then_up_error_bound():
    dt = 0.01
    t = np.arange(0, 2 + dt / 2, dt)
    traj = Trajectory(np.sin(3 * t)[:, None], dt)
    coarse = resample(traj, 0.05)
    back = resample(coarse, dt)
    assert len(back) == len(traj)
    # linear interpolation error <= h^2/8 * max|f''|
    bound = 0.05**2 / 8 * 9 + 1e-12
    assert np.abs(back.points - traj.points).max() <= bound


@pytest.mark.parametrize("shape", ["line", "sine", "s-curve"])
def test_point_to_point_generator(shape):
    clean = synth_point_to_point(shape, 3, 0.0, seed=1)
    for t in clean:
        np.testing.assert_array_equal(t.points, clean[0].points)
    noisy = synth_point_to_point(shape, 4, 0.3, seed=2)
    for t in noisy:
        np.testing.assert_array_equal(t.points[-1], [0.0, 0.0])
    again = synth_point_to_point(shape, 4, 0.3, seed=2)
    for a, b in zip(noisy, again):
        np.testing.assert_array_equal(a.points, b.points)
    assert not np.array_equal(noisy[0].points, noisy[1].points)
    with pytest.raises(ValueError):
        synth_point_to_point(shape, 0, 0.1, seed=0)


def test_limit_cycle_generator():
    circ = synth_limit_cycle("circle", 2, 0.0, seed=0)
    for t in circ:
        np.testing.assert_allclose(np.linalg.norm(t.points, axis=1), 1.0, atol=1e-12)
    omega = 2.0
    t = synth_limit_cycle("ellipse", 1, 0.0, seed=3, omega=omega)[0]
    x = t.points[:, 0] - t.points[:, 0].mean()
    ups = np.flatnonzero((x[:-1] < 0) & (x[1:] >= 0))
    period = np.diff(ups).mean() * t.dt
    assert abs(period - 2 * math.pi / omega) <= t.dt
    a = synth_limit_cycle("lissajous", 3, 0.05, seed=5)
    b = synth_limit_cycle("lissajous", 3, 0.05, seed=5)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u.points, v.points)
    with pytest.raises(ValueError):
        synth_limit_cycle("square", 1, 0.0, seed=0)
