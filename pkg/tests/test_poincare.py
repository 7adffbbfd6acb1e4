import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scarfinder import imps, poincare as pc
from scarfinder.errors import InvalidInputError, ProjectionLostError
from scarfinder.models import pxp

PI = np.pi
NUP = np.diag([1.0, 0.0])  # ansatz basis is (up, down)
STAR = np.array([0.8355, 0.0, 0.1927]) * PI

angles = st.lists(st.floats(-2 * PI, 4 * PI, allow_nan=False), min_size=3, max_size=3)


def ring_vector(theta, L):
    """Brute-force ``Tr(A_1 ... A_L)`` amplitudes of the ansatz on a ring."""
    a = pc.ansatz_tensors(theta)
    amp = np.zeros(2**L, dtype=complex)
    for code in range(2**L):
        m = np.eye(2)
        for j in range(L):
            m = m @ a[j % 3][(code >> (L - 1 - j)) & 1]
        amp[code] = np.trace(m)
    return amp


# ----------------------------------------------------------------------------
# ansatz


def test_zero_angles_is_vacuum():
    psi = pc.ansatz_mps([0.0, 0.0, 0.0])
    for site in range(3):
        assert abs(imps.expectation_local(psi, NUP, 1, site)) < 1e-14
    v = ring_vector([0.0, 0.0, 0.0], 6)
    assert abs(v[-1]) == pytest.approx(1.0) and np.allclose(v[:-1], 0)


@settings(max_examples=15)
@given(angles)
def test_blockade_exact(theta):
    psi = pc.ansatz_mps(theta)
    for site in range(3):
        assert abs(imps.expectation_local(psi, np.kron(NUP, NUP), 2, site)) < 1e-12
    v = ring_vector(theta, 6)
    for code in range(64):
        ups = [(code >> (5 - j)) & 1 == 0 for j in range(6)]
        if any(ups[j] and ups[(j + 1) % 6] for j in range(6)):
            assert abs(v[code]) < 1e-12


@settings(max_examples=10)
@given(angles)
def test_periodicity(theta):
    a = pc.ansatz_mps(theta)
    b = pc.ansatz_mps(np.asarray(theta) + 2 * PI)
    assert imps.transfer_fidelity(a, b) == pytest.approx(1.0, abs=1e-10)


def test_ansatz_rejects_bad_angles():
    with pytest.raises(InvalidInputError):
        pc.ansatz_tensors([0.1, 0.2])
    with pytest.raises(InvalidInputError):
        pc.ansatz_tensors([0.1, np.nan, 0.2])


def test_wrap_and_distance():
    assert pc.wrap(-0.1) == pytest.approx(2 * PI - 0.1)
    assert pc.angle_distance([0.01, 0.0], [2 * PI - 0.01, 0.0]) == pytest.approx(0.02)
    assert pc.in_fundamental_domain(PI, 0.5 * PI)
    assert not pc.in_fundamental_domain(0.2 * PI, 0.5 * PI)
    assert not pc.in_fundamental_domain(PI, 1.2 * PI)


# ----------------------------------------------------------------------------
# projection


def test_project_exact_member():
    theta = np.array([0.9, 0.3, 0.55]) * PI
    got, fid = pc.project_to_ansatz(pc.ansatz_mps(theta), theta + 0.01)
    assert fid == pytest.approx(1.0, abs=1e-12)
    assert np.max(np.abs(got - theta)) < 1e-6


def test_projection_monotone_after_evolution():
    theta = np.array([0.8, 0.0, 0.1]) * PI
    psi, _ = imps.evolve(pc.ansatz_mps(theta), pxp(mu=0.0), 0.1, 0.01, 12)
    before = pc.ansatz_fidelity(psi, theta)
    got, fid = pc.project_to_ansatz(psi, theta)
    assert fid >= before
    assert fid > 0.99


def test_projection_perturbation_oracle():
    rng = np.random.default_rng(3)
    theta = np.array([0.7, 0.2, 0.4]) * PI
    raw = pc.ansatz_tensors(theta)
    noisy = []
    for a in raw:
        e = rng.standard_normal(a.shape) + 1j * rng.standard_normal(a.shape)
        noisy.append(a + 1e-3 * e / np.linalg.norm(e))
    got, _ = pc.project_to_ansatz(imps.canonicalize(noisy), theta + 0.02)
    assert np.max(np.abs(got - theta)) < 1e-2


def test_projection_lost():
    up = np.array([1.0, 0.0])
    psi = imps.product_state([up, up, up])
    with pytest.raises(ProjectionLostError):
        pc.project_to_ansatz(psi, [0.5, 0.5, 0.5])


# ----------------------------------------------------------------------------
# crossings and runs


def test_crossing_interpolation():
    prev = np.array([0.0, -0.1, 0.0])
    new = np.array([0.2, 0.1, 0.4])
    (p,) = pc._crossings(prev, new, 5, 2)
    assert (p.theta1, p.theta3, p.index, p.trajectory, p.direction) == pytest.approx((0.1, 0.2, 5, 2, 1))
    (q,) = pc._crossings(new + [0, 2 * PI, 0], prev + [0, 2 * PI, 0], 6, 2)
    assert q.direction == -1 and q.theta1 == pytest.approx(0.1)
    assert pc._crossings(prev, prev + [0.1, 0.05, 0.0], 1, 0) == []
    # a start exactly on the plane is not counted twice
    assert pc._crossings(np.zeros(3), np.array([0, 0.1, 0]), 1, 0) == []


@pytest.mark.parametrize("kw", [{"dt": 0.0}, {"dt": -0.1}, {"n_steps": -1}, {"dt": 0.015}])
def test_run_rejects_bad_input(kw):
    with pytest.raises(InvalidInputError):
        pc.poincare_run(STAR, **kw)


def test_batched_rejects_bad_dt():
    with pytest.raises(InvalidInputError):
        pc.batched_poincare([STAR], dt=-0.1)
    with pytest.raises(InvalidInputError):
        pc.batched_poincare([STAR], dt=0.015)


@pytest.fixture(scope="module")
def serial_run():
    return pc.poincare_run(np.array([0.8, 0.0, 0.1]) * PI, 0.1, 25)


def test_batched_matches_serial(serial_run):
    (b,) = pc.batched_poincare([np.array([0.8, 0.0, 0.1]) * PI], 0.1, 25)
    assert b.angles.shape == serial_run.angles.shape
    assert np.max(np.abs(b.angles - serial_run.angles)) < 1e-5
    assert np.allclose(b.fidelities, serial_run.fidelities, atol=1e-8)


def test_energy_bounded_along_trajectory():
    (run,) = pc.batched_poincare([np.array([0.8, 0.0, 0.1]) * PI], 0.1, 100)
    e = [pc.ansatz_energy(t) for t in run.angles]
    assert np.ptp(e) < 1e-3


def test_crossing_error_shrinks_with_dt():
    # first crossing from a start just below the plane, against a fine reference
    start = np.array([0.8, -0.1, 0.1]) * PI

    def first(dt, dt_inner):
        (run,) = pc.batched_poincare([start], dt, int(round(2.0 / dt)), dt_inner=dt_inner)
        p = run.crossings[0]
        return np.array([p.theta1, p.theta3])

    ref = first(0.005, 0.005)
    e1 = np.linalg.norm(first(0.04, 0.01) - ref)
    e2 = np.linalg.norm(first(0.02, 0.01) - ref)
    assert e1 > 0 and e1 / e2 >= 1.5


# ----------------------------------------------------------------------------
# fixed points


def _run(points):
    return pc.PoincareRun([pc.PoincarePoint(a, b, i, 0, d) for i, (a, b, d) in enumerate(points)],
                          np.zeros((1, 3)), np.ones(1))


def test_terminal_points_period_one():
    run = _run([(1.0, 1.0, 1), (1.2, 0.8, 1), (1.201, 0.801, 1), (3.0, 3.0, -1)])
    (p,) = pc.terminal_points(run, tol=0.01)
    assert (p.theta1, p.theta3) == (1.201, 0.801)


def test_terminal_points_period_two():
    run = _run([(1.0, 1.0, 1), (2.0, 2.0, 1), (1.002, 1.0, 1), (2.0, 2.003, 1)])
    pts = pc.terminal_points(run, tol=0.01)
    assert sorted((p.theta1, p.theta3) for p in pts) == [(1.002, 1.0), (2.0, 2.003)]
    assert pc.terminal_points(run, tol=0.01, max_period=1) == []


def test_terminal_points_unsettled():
    run = _run([(1.0, 1.0, 1), (1.5, 1.0, 1), (2.0, 1.0, 1), (2.5, 1.0, 1)])
    assert pc.terminal_points(run, tol=0.01) == []


def test_cluster_points():
    pts = [pc.PoincarePoint(0.001 * k, 1.0, 0, k) for k in range(5)]  # short chain
    pts += [pc.PoincarePoint(2 * PI - 0.002, 1.0, 0, 9)]  # across the branch cut
    pts += [pc.PoincarePoint(3.0, 2.0, 0, 10), pc.PoincarePoint(3.0, 2.001, 0, 10)]
    cl = pc.cluster_points(pts, radius=0.01)
    assert [c.count for c in cl] == [6, 1]
    assert pc.angle_distance(cl[0].angles[::2], (0.001, 1.0)) < 0.003
    assert cl[1].angles == pytest.approx((3.0, 0.0, 2.0005))
    assert pc.cluster_points([]) == []


def test_single_seeded_start_gives_one_cluster():
    clusters, runs = pc.find_fixed_points(1, n_steps=400, starts=[STAR])
    assert len(clusters) == 1 and clusters[0].count == 1
    assert pc.angle_distance(clusters[0].angles[::2], STAR[::2]) < 0.01 * PI


def test_find_fixed_points_validates():
    with pytest.raises(InvalidInputError):
        pc.find_fixed_points(0)
    with pytest.raises(InvalidInputError):
        pc.find_fixed_points(1, engine="gpu")
    with pytest.raises(InvalidInputError):
        pc.find_fixed_points(2, starts=[STAR])


def test_serial_engine_agrees():
    a, _ = pc.find_fixed_points(1, n_steps=40, starts=[STAR], engine="serial")
    b, _ = pc.find_fixed_points(1, n_steps=40, starts=[STAR])
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert pc.angle_distance(x.angles, y.angles) < 1e-5


@pytest.mark.parametrize("offset", [(0.03, 0.0, -0.02), (-0.04, 0.0, 0.01), (0.0, 0.0, 0.04)])
def test_contraction_near_fixed_point(offset):
    # the return map is a stable focus with elliptic rotation, so the Euclidean
    # distance contracts over a rotation (three returns), not at every return
    (run,) = pc.batched_poincare([STAR + np.array(offset) * PI], 0.1, 800)
    d = np.array([pc.angle_distance((p.theta1, p.theta3), STAR[::2]) for p in run.crossings if p.direction == 1])
    assert len(d) >= 8
    assert np.all(d[3:] < d[:-3])
    assert d[-1] < d[0] / 5
