import math

import numpy as np
import pytest
from hypothesis import example, given, strategies as st

from vicsim.errors import InvalidMatrix
from vicsim.geometry import entity_boxes, perspective, project_many, view_matrix, world_to_screen

SCREEN = (1280, 720)


def dense_oracle(point, m, screen=SCREEN):
    """Reference pipeline: full 4x4 product with a homogeneous point, then divide."""
    clip = np.asarray(m, dtype=float).reshape(4, 4) @ np.array([*point, 1.0])
    if clip[3] <= 1e-6:
        return None
    ndc = clip[:3] / clip[3]
    return ((ndc[0] + 1) / 2 * screen[0], (1 - ndc[1]) / 2 * screen[1])


def test_forward_axis_hits_centre():
    vp = perspective(90, 16 / 9, 0.1, 1000) @ view_matrix((0, 0, 0), 0.0, 0.0)
    assert world_to_screen((25.0, 0.0, 0.0), vp, SCREEN) == (640.0, 360.0)


def test_identity_view_axis_point():
    # identity view: camera at the origin looking down -z
    vp = perspective(90, 16 / 9, 0.1, 1000) @ np.eye(4)
    assert world_to_screen((0.0, 0.0, -10.0), vp, SCREEN) == (640.0, 360.0)


def test_behind_camera_is_none():
    vp = perspective(90, 16 / 9, 0.1, 1000) @ view_matrix((0, 0, 0), 0.0, 0.0)
    assert world_to_screen((-5.0, 0.0, 0.0), vp, SCREEN) is None


def test_non_finite_matrix():
    m = np.eye(4)
    m[1, 2] = math.nan
    with pytest.raises(InvalidMatrix):
        world_to_screen((1, 2, 3), m)
    with pytest.raises(InvalidMatrix):
        world_to_screen((1, 2, 3), np.eye(3))


def test_view_matrix_against_look_at():
    """Independent look-at construction from eye, target and world up."""
    eye = np.array([10.0, -4.0, 64.0])
    yaw, pitch = 0.7, -0.2
    fwd = np.array([math.cos(pitch) * math.cos(yaw), math.cos(pitch) * math.sin(yaw), math.sin(pitch)])
    right = np.cross(fwd, [0, 0, 1])
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    ref = np.eye(4)
    ref[0, :3], ref[1, :3], ref[2, :3] = right, up, -fwd
    ref[:3, 3] = -ref[:3, :3] @ eye
    np.testing.assert_allclose(view_matrix(eye, yaw, pitch), ref, atol=1e-12)


@given(st.floats(-math.pi, math.pi), st.floats(-1.5, 1.5),
       st.tuples(*[st.floats(-1e4, 1e4)] * 3))
def test_view_matrix_is_rigid(yaw, pitch, eye):
    m = view_matrix(eye, yaw, pitch)
    r = m[:3, :3]
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0)
    np.testing.assert_array_equal(m[3], [0, 0, 0, 1])
    np.testing.assert_allclose(m @ [*eye, 1.0], [0, 0, 0, 1], atol=1e-8 * (1 + max(map(abs, eye))))


finite = st.floats(-1.0, 1.0, allow_nan=False)


@given(st.lists(finite, min_size=16, max_size=16), st.tuples(*[st.floats(-100, 100)] * 3))
def test_matches_dense_oracle(entries, point):
    m = np.array(entries).reshape(4, 4)
    got = world_to_screen(point, m, SCREEN)
    ref = dense_oracle(point, m)
    if ref is None or got is None:
        # only exact-threshold ties may disagree
        clip_w = m[3] @ [*point, 1.0]
        assert (ref is None) == (got is None) or abs(clip_w - 1e-6) < 1e-12
        return
    assert abs(got[0] - ref[0]) <= 1e-4 * max(1.0, abs(ref[0]) * 1e-6)
    assert abs(got[1] - ref[1]) <= 1e-4 * max(1.0, abs(ref[1]) * 1e-6)


@given(st.integers(0, 2**32 - 1))
def test_vectorised_projection_agrees(seed):
    rng = np.random.default_rng(seed)
    vp = perspective(90, 16 / 9, 0.1, 1e4) @ view_matrix(rng.uniform(-100, 100, 3), rng.uniform(-3, 3),
                                                         rng.uniform(-1, 1))
    pts = rng.uniform(-500, 500, (50, 3))
    sx, sy, _ = project_many(pts, vp, SCREEN)
    for i, p in enumerate(pts):
        one = world_to_screen(p, vp, SCREEN)
        if one is None:
            assert math.isnan(sx[i])
        else:
            assert sx[i] == pytest.approx(one[0], abs=1e-6) and sy[i] == pytest.approx(one[1], abs=1e-6)


@given(st.integers(0, 2**32 - 1))
@example(5323)  # near-plane entity, box edges around 4e6 px
def test_entity_boxes_follow_feet_and_head(seed):
    rng = np.random.default_rng(seed)
    vp = perspective(90, 16 / 9, 0.1, 1e4) @ view_matrix((0, 0, 64), rng.uniform(-3, 3), 0.0)
    pos = rng.uniform(-800, 800, (20, 3))
    x0, y0, x1, y1, _, valid = entity_boxes(pos, vp, SCREEN, 72.0, 32.0)
    for i, p in enumerate(pos):
        feet = world_to_screen(p, vp, SCREEN)
        head = world_to_screen(p + [0, 0, 72.0], vp, SCREEN)
        assert bool(valid[i]) == (feet is not None and head is not None)
        if valid[i]:
            top, bottom = sorted((feet[1], head[1]))
            assert (y0[i], y1[i]) == pytest.approx((top, bottom), rel=1e-12, abs=1e-6)
            assert (x0[i] + x1[i]) / 2 == pytest.approx((feet[0] + head[0]) / 2, rel=1e-12, abs=1e-6)
            assert x1[i] - x0[i] == pytest.approx((bottom - top) * 32 / 72, rel=1e-12, abs=1e-6)
