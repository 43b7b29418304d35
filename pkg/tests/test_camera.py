"""Camera model: unprojection, projection, calibration I/O."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panoslam.camera import (
    PolynomialIntrinsics,
    in_image_bounds,
    load_calibration,
    load_sample_calibration,
    project,
    project_many,
    save_calibration,
    unproject,
    zenith_angle,
)
from panoslam.errors import CalibrationError, OutOfFovError


def toy_camera(**kw):
    # f(rho) = 1 - 0.01 rho^2 crosses zero at rho = 10, so pixels beyond
    # 10 px from the center look behind the rho-plane (zenith > 90 deg).
    defaults = dict(
        poly=(1.0, 0.0, -0.01),
        center=(320.0, 240.0),
        image_size=(640, 480),
        fov_range=(0.0, 130.0),
    )
    defaults.update(kw)
    return PolynomialIntrinsics(**defaults)


class TestUnproject:
    def test_center_maps_to_optical_axis(self):
        w = unproject(toy_camera(), (320.0, 240.0))
        np.testing.assert_allclose(w, [0.0, 0.0, 1.0], atol=1e-12)

    def test_zero_crossing_gives_lateral_bearing(self):
        w = unproject(toy_camera(), (330.0, 240.0))
        np.testing.assert_allclose(w, [1.0, 0.0, 0.0], atol=1e-12)

    def test_negative_half_plane_bearing(self):
        # rho = 20: v = (20, 0, -3), normalized by sqrt(409).
        w = unproject(toy_camera(), (340.0, 240.0))
        np.testing.assert_allclose(w, [0.98893635, 0.0, -0.14834045], atol=1e-5)
        assert w[2] < 0.0

    def test_batch_matches_single(self):
        cam = toy_camera()
        pix = np.array([[320.0, 240.0], [330.0, 240.0], [340.0, 250.0]])
        batch = unproject(cam, pix)
        for p, w in zip(pix, batch):
            np.testing.assert_allclose(unproject(cam, p), w, atol=1e-12)

    def test_unit_norm(self):
        cam = toy_camera()
        pix = np.random.default_rng(0).uniform([0, 0], [639, 479], size=(100, 2))
        w = unproject(cam, pix)
        np.testing.assert_allclose(np.linalg.norm(w, axis=1), 1.0, atol=1e-12)


class TestZenith:
    def test_reference_directions(self):
        assert zenith_angle([0.0, 0.0, 1.0]) == pytest.approx(0.0, abs=1e-12)
        assert zenith_angle([1.0, 0.0, 0.0]) == pytest.approx(90.0, abs=1e-12)
        assert zenith_angle([0.0, 0.0, -1.0]) == pytest.approx(180.0, abs=1e-12)

    def test_negative_half_plane_value(self):
        w = np.array([20.0, 0.0, -3.0])
        w /= np.linalg.norm(w)
        assert zenith_angle(w) == pytest.approx(98.5308, abs=0.01)

    def test_monotone_in_radius(self):
        cam = toy_camera()
        pix = np.stack([320.0 + np.linspace(0.0, 25.0, 60), np.full(60, 240.0)], axis=-1)
        zen = zenith_angle(unproject(cam, pix))
        assert np.all(np.diff(zen) > 0)


class TestProject:
    def test_round_trip_newton_path(self):
        # No inverse polynomial: projection solves for the radius.
        cam = toy_camera()
        ang = np.linspace(0.0, 2 * np.pi, 37)
        for r in (3.0, 10.0, 17.0, 24.0):
            pix = np.stack([320.0 + r * np.cos(ang), 240.0 + r * np.sin(ang)], axis=-1)
            back, valid = project_many(cam, unproject(cam, pix))
            assert valid.all()
            assert np.max(np.linalg.norm(back - pix, axis=1)) < 1e-6

    def test_out_of_fov_raises(self):
        cam = toy_camera(fov_range=(0.0, 95.0))
        w = unproject(toy_camera(), (345.0, 240.0))
        assert zenith_angle(w) > 95.0
        with pytest.raises(OutOfFovError):
            project(cam, w)

    def test_affine_round_trip(self):
        cam = toy_camera(affine=(1.0012, 3.1e-4, -2.4e-4))
        pix = np.random.default_rng(3).uniform([300, 220], [340, 260], size=(50, 2))
        back, valid = project_many(cam, unproject(cam, pix))
        assert valid.all()
        assert np.max(np.linalg.norm(back - pix, axis=1)) < 1e-6

    def test_optical_axis_projects_to_center(self):
        pix = project(toy_camera(), np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(pix, [320.0, 240.0], atol=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(
        r=st.floats(min_value=1.0, max_value=24.0),
        ang=st.floats(min_value=0.0, max_value=2 * np.pi),
    )
    def test_round_trip_property(self, r, ang):
        cam = toy_camera()
        pix = np.array([320.0 + r * np.cos(ang), 240.0 + r * np.sin(ang)])
        back = project(cam, unproject(cam, pix))
        assert np.linalg.norm(back - pix) < 1e-6


class TestCalibrationFile:
    def test_save_load_round_trip(self, tmp_path):
        cam = toy_camera(affine=(1.002, 1e-4, -2e-4))
        path = tmp_path / "calib.txt"
        save_calibration(cam, path)
        loaded = load_calibration(path)
        assert loaded.poly == cam.poly
        assert loaded.center == cam.center
        assert loaded.affine == cam.affine
        assert loaded.image_size == cam.image_size
        assert loaded.fov_range == cam.fov_range

    def test_missing_field(self, tmp_path):
        path = tmp_path / "calib.txt"
        path.write_text("poly: 1 0 -0.01\ncenter: 320 240\nimage_size: 640 480\n")
        with pytest.raises(CalibrationError, match="fov_deg"):
            load_calibration(path)

    def test_bad_token_names_line(self, tmp_path):
        path = tmp_path / "calib.txt"
        path.write_text("poly: 1 0 -0.01\ncenter: 320 oops\n")
        with pytest.raises(CalibrationError, match="line 2"):
            load_calibration(path)

    def test_zero_a0_rejected(self, tmp_path):
        path = tmp_path / "calib.txt"
        path.write_text(
            "poly: 0 0 -0.01\ncenter: 320 240\nimage_size: 640 480\nfov_deg: 0 130\n"
        )
        with pytest.raises(CalibrationError):
            load_calibration(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CalibrationError):
            load_calibration(tmp_path / "nope.txt")


class TestSampleAsset:
    def test_loads_and_spans_negative_half_plane(self):
        cam = load_sample_calibration()
        assert cam.fov_range == (40.0, 120.0)
        zen = zenith_angle(unproject(cam, (cam.center[0] + 460.0, cam.center[1])))
        assert zen > 90.0

    def test_round_trip_subgrid(self):
        cam = load_sample_calibration()
        w, h = cam.image_size
        gu, gv = np.meshgrid(np.linspace(0, w - 1, 40), np.linspace(0, h - 1, 40))
        pix = np.stack([gu.ravel(), gv.ravel()], axis=-1)
        bear = unproject(cam, pix)
        zen = zenith_angle(bear)
        keep = (zen >= 40.0) & (zen <= 120.0)
        back, valid = project_many(cam, bear[keep])
        assert valid.all()
        assert np.max(np.linalg.norm(back - pix[keep], axis=1)) < 0.5


def test_in_image_bounds():
    cam = toy_camera()
    assert in_image_bounds(cam, (5.0, 5.0))
    assert not in_image_bounds(cam, (-1.0, 5.0))
    assert not in_image_bounds(cam, (5.0, 500.0))
    flags = in_image_bounds(cam, np.array([[5.0, 5.0], [700.0, 5.0]]))
    assert flags.tolist() == [True, False]
