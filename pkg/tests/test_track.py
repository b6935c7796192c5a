import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fsqp_mpcc.track import (
    Centerline, circle, contouring_lag_errors, fit_spline, load_track, rounded_rectangle, track_constraint,
)
from fsqp_mpcc.vehicle import NX, PX, PY, THETA


def unit_circle(theta):
    return np.stack([np.sin(theta), -np.cos(theta)], axis=-1)


def test_circle_spline_matches_circle(circle_spline):
    th = np.linspace(0.0, 2 * np.pi, 501)
    assert circle_spline.length == pytest.approx(2 * np.pi, abs=1e-7)
    np.testing.assert_allclose(circle_spline.position(th), unit_circle(th), atol=1e-7)
    # arclength parameterization means unit speed
    np.testing.assert_allclose(np.linalg.norm(circle_spline.tangent(th), axis=1), 1.0, atol=1e-7)


def test_rounded_rectangle_length():
    s = fit_spline(Centerline(rounded_rectangle(2.4, 1.6, 0.45), 0.46))
    # straights 2*1.5 + 2*0.7 plus one full circle of radius 0.45
    assert s.length == pytest.approx(4.4 + 0.9 * np.pi, abs=1e-5)


@settings(max_examples=40, deadline=None)
@given(st.floats(-50.0, 50.0))
def test_progress_wraps_periodically(theta):
    s = fit_spline(Centerline(circle(1.0), 0.4))
    np.testing.assert_allclose(s.position(theta), s.position(theta + s.length), atol=1e-9)
    np.testing.assert_allclose(s.tangent(theta), s.tangent(theta - 3 * s.length), atol=1e-9)


def test_track_constraint_sign(circle_spline):
    x = np.zeros((3, NX))
    th = 0.7
    x[:, THETA] = th
    c = unit_circle(th)
    n = c / np.linalg.norm(c)
    for k, off in enumerate((0.0, 0.19, 0.25)):
        x[k, [PX, PY]] = c + off * n
    pi = track_constraint(x, circle_spline)
    assert pi[0] == pytest.approx(-0.04, abs=1e-12)
    assert pi[1] < 0 < pi[2]
    assert pi[2] == pytest.approx(0.25**2 - 0.04, abs=1e-7)


def test_contouring_and_lag_errors(circle_spline):
    th = 1.3
    c, t = unit_circle(th), np.array([np.cos(th), np.sin(th)])
    left = np.array([-t[1], t[0]])
    x = np.zeros(NX)
    x[THETA] = th
    x[[PX, PY]] = c + 0.1 * left + 0.05 * t
    e_c, e_l = contouring_lag_errors(x, th, circle_spline)
    assert e_c == pytest.approx(-0.1, abs=1e-7)
    assert e_l == pytest.approx(0.05, abs=1e-7)


def test_projection(circle_spline):
    assert circle_spline.project([0.0, -1.1]) == pytest.approx(0.0, abs=1e-6)
    assert circle_spline.project([1.2, 0.0]) == pytest.approx(np.pi / 2, abs=1e-6)
    # a guess keeps the result on the same lap
    assert circle_spline.project([1.2, 0.0], theta_guess=np.pi / 2 + 2 * np.pi) == pytest.approx(
        np.pi / 2 + 2 * np.pi, abs=1e-6)


def test_centerline_validation():
    pts = circle(1.0, 0.1)
    with pytest.raises(ValueError, match="open"):
        Centerline(pts[:-1], 0.4)
    with pytest.raises(ValueError, match="width"):
        Centerline(pts, 0.0)
    with pytest.raises(ValueError):
        Centerline(pts[:3], 0.4)
    with pytest.raises(ValueError):
        Centerline(pts, 0.4, orientation=2)
    with pytest.raises(ValueError):
        rounded_rectangle(1.0, 1.0, 0.6)


def test_load_track_files(tmp_path):
    p = tmp_path / "t.yaml"
    p.write_text("width: 0.5\norientation: cw\nwaypoints:\n  circle: {radius: 2.0}\n")
    c = load_track(p)
    assert c.orientation == -1 and c.width == 0.5
    assert np.allclose(np.linalg.norm(c.waypoints, axis=1), 2.0)
    p.write_text("width: 0.5\nwaypoints: [[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.5], [0, 0]]\n")
    assert len(load_track(p).waypoints) == 6
    p.write_text("waypoints: [[0, 0]]\n")
    with pytest.raises(ValueError, match="width"):
        load_track(p)
    p.write_text("width: 1\nwaypoints:\n  spiral: {}\n")
    with pytest.raises(ValueError, match="unknown"):
        load_track(p)
