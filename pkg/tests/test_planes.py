import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgraphs.geometry import Plane, PlaneMinimal, PlaneTag, Pose3, classify_plane, rot_z
from sgraphs.planes import (
    DEFAULT_ASSOC_COV,
    KeyframeCloud,
    PlaneObservation,
    RansacParams,
    associate_plane,
    association_cutoff,
    extract_planes,
    mahalanobis_sq,
    observation_to_map,
    plane_covariance,
)

from conftest import landmark, wall, wall_points


def _two_planes(rng, n=1000):
    a = np.column_stack([np.zeros(n), rng.uniform(0.5, 5, n), rng.uniform(-1, 2, n)])
    b = np.column_stack([rng.uniform(0.5, 5, n), np.zeros(n), rng.uniform(-1, 2, n)])
    return np.vstack([a, b])


def test_two_exact_planes_recovered(rng):
    obs = extract_planes(KeyframeCloud(0, _two_planes(rng)), RansacParams(inlier_threshold=0.01))
    assert len(obs) == 2
    got = sorted(obs, key=lambda o: classify_plane(o.plane_body).tag.value)
    for o in got:
        assert len(o.inliers) >= 1000 - 5  # corner points may go either way
        n = np.abs(o.plane_body.normal)
        assert abs(np.max(n) - 1.0) < 1e-6
        assert abs(o.plane_body.distance) < 1e-6


def test_random_points_give_nothing():
    pts = np.random.default_rng(0).uniform(0, 10, (50, 3))
    assert extract_planes(KeyframeCloud(0, pts), RansacParams(min_inliers=100)) == []


def test_ground_plane_is_horizontal(rng):
    pts = np.column_stack([rng.uniform(-3, 3, 500), rng.uniform(-3, 3, 500), np.full(500, -1.0)])
    obs = extract_planes(KeyframeCloud(0, pts))
    assert len(obs) == 1
    assert classify_plane(obs[0].plane_body).tag is PlaneTag.HORIZONTAL


def test_empty_cloud():
    assert extract_planes(KeyframeCloud(0, np.zeros((0, 3)))) == []


def test_nonfinite_cloud_rejected():
    with pytest.raises(ValueError):
        KeyframeCloud(0, [[0, 0, np.nan]])


def test_observations_face_sensor_and_have_valid_covariance(rng):
    pts = wall_points(0, 3.0, -2, 2) + rng.normal(scale=0.01, size=(160, 3))
    (o,) = extract_planes(KeyframeCloud(0, pts))
    assert o.plane_body.distance > 0  # origin on the positive side
    np.testing.assert_allclose(o.plane_body.normal, [-1, 0, 0], atol=0.01)
    assert np.all(np.linalg.eigvalsh(o.covariance) > 0)
    np.testing.assert_allclose(o.covariance, o.covariance.T)


def test_extraction_deterministic(rng):
    pts = _two_planes(rng) + rng.normal(scale=0.01, size=(2000, 3))
    a = extract_planes(KeyframeCloud(0, pts), RansacParams(seed=7))
    b = extract_planes(KeyframeCloud(0, pts), RansacParams(seed=7))
    assert [o.plane_body.as_array().tolist() for o in a] == [o.plane_body.as_array().tolist() for o in b]


def test_covariance_shrinks_with_more_points(rng):
    pl = Plane([1, 0, 0], -2)
    few = wall_points(0, 2.0, 0, 2, step=0.2) + rng.normal(scale=0.02, size=(40, 3)) * [1, 0, 0]
    many = wall_points(0, 2.0, 0, 2, step=0.02) + rng.normal(scale=0.02, size=(400, 3)) * [1, 0, 0]
    assert np.trace(plane_covariance(pl, many)) < np.trace(plane_covariance(pl, few))


def _obs(plane):
    return PlaneObservation(0, plane, np.arange(3), np.eye(3))


def test_observation_to_map_examples():
    body = Plane([1, 0, 0], -1)
    assert observation_to_map(_obs(body), Pose3.identity()).same_surface(body)
    m = observation_to_map(_obs(body), Pose3.from_rt(np.eye(3), [2, 0, 0]))
    assert abs(m.signed_distance(np.array([[3.0, 0.4, 1.0]]))[0]) < 1e-12
    m = observation_to_map(_obs(body), Pose3.from_rt(rot_z(math.pi), [0, 0, 0]))
    np.testing.assert_allclose(m.normal, [-1, 0, 0], atol=1e-12)


def test_associate_identical():
    pl = wall(0, 2.0, -1)
    assert associate_plane(pl, [landmark(4, pl)], covariance=np.eye(3)) == 4


def test_associate_rejects_far_candidate():
    pl = wall(0, 2.0, -1)
    far = Plane(pl.normal, pl.distance - 1.0)
    assert associate_plane(far, [landmark(1, pl)], gate=0.35) is None


def test_associate_picks_nearer():
    lms = [landmark(1, Plane([1, 0, 0], -2.0)), landmark(2, Plane([1, 0, 0], -2.3))]
    assert associate_plane(Plane([1, 0, 0], -2.1), lms) == 1


def test_association_gate_boundary():
    # cutoff is (gate / sigma_d)^2 so a pure distance offset just inside/outside the gate decides
    base = Plane([1, 0, 0], -2.0)
    cut = association_cutoff(0.35, DEFAULT_ASSOC_COV)
    assert cut == pytest.approx((0.35 / 0.15) ** 2)
    assert associate_plane(Plane([1, 0, 0], -2.0 - 0.349), [landmark(0, base)]) == 0
    assert associate_plane(Plane([1, 0, 0], -2.0 - 0.351), [landmark(0, base)]) is None


def test_associate_angle_gate():
    base = wall(0, 2.0, +1)
    tilted = Plane([math.cos(math.radians(20)), math.sin(math.radians(20)), 0], -2.0)
    assert associate_plane(tilted, [landmark(0, base)], covariance=np.eye(3) * 100) is None


def test_mahalanobis_wraps_azimuth():
    a = PlaneMinimal(math.pi - 0.01, 0.0, -1.0)
    b = PlaneMinimal(-math.pi + 0.01, 0.0, -1.0)
    assert mahalanobis_sq(a, b, np.eye(3)) == pytest.approx(0.02**2)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-0.3, 0.3), st.floats(-5, 5)), min_size=1, max_size=6),
    st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(-5, 5)),
)
def test_association_never_crosses_tags(lms, cand):
    planes = []
    for nx, ny, nz, d in lms:
        if abs(nx) + abs(ny) + abs(nz) < 1e-3:
            continue
        planes.append(Plane([nx, ny, nz], d))
    if not planes or abs(cand[0]) + abs(cand[1]) + abs(cand[2]) < 1e-3:
        return
    c = Plane(cand[:3], cand[3])
    store = [landmark(i, p) for i, p in enumerate(planes)]
    lid = associate_plane(c, store, covariance=np.eye(3) * 50, gate=10.0, max_angle_deg=180)
    if lid is not None:
        assert store[lid].plane_class.tag is classify_plane(c).tag
