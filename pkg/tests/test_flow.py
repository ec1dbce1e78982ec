import numpy as np
import pytest

from screwfit.factors import FLOW_THETA, affordance_residual
from screwfit.flow import (
    FlowCloudSpec,
    InconsistentColumns,
    ParseError,
    generate,
    load_flow_cloud,
    save_flow_cloud,
)
from screwfit.screw import Twist


def prismatic_x():
    return Twist(np.array([1.0, 0, 0]), np.zeros(3))


def revolute_edge():
    # Hinge along z through the panel edge at y = 0.4.
    w = np.array([0.0, 0.0, 1.0])
    q = np.array([0.0, 0.4, 0.0])
    return Twist(-np.cross(w, q), w)


def test_generate_cloud_size_and_mask():
    spec = FlowCloudSpec(true_xi=prismatic_x(), reported_xi=prismatic_x(), n_points=1000)
    cloud = generate(spec)
    assert len(cloud) == 1000
    assert cloud.mask.all()
    assert np.isfinite(cloud.flow).all()


def test_generate_deterministic_for_seed():
    spec = FlowCloudSpec(
        true_xi=prismatic_x(),
        reported_xi=revolute_edge(),
        n_points=64,
        noise_sigma=np.array([0.01, 0.01, 0.001]),
        seed=7,
    )
    a, b = generate(spec), generate(spec)
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(a.flow, b.flow)


def test_noiseless_flow_zeroes_affordance_residual():
    xi = revolute_edge()
    cloud = generate(FlowCloudSpec(true_xi=xi, reported_xi=xi, n_points=50, seed=3))
    for p, f in zip(cloud.points, cloud.flow):
        np.testing.assert_allclose(affordance_residual(xi, p, f), np.zeros(3), atol=1e-12)


def test_revolute_flow_grows_with_axis_distance():
    xi = revolute_edge()
    cloud = generate(FlowCloudSpec(true_xi=xi, reported_xi=xi, n_points=400, seed=1))
    axis_point = np.array([0.0, 0.4, 0.0])
    radii = np.linalg.norm((cloud.points - axis_point)[:, :2], axis=1)
    mags = np.linalg.norm(cloud.flow, axis=1)
    # |flow| = 2 sin(theta/2) * radius for a rotation by FLOW_THETA.
    expected = 2.0 * np.sin(FLOW_THETA / 2) * radii
    np.testing.assert_allclose(mags, expected, rtol=1e-9)
    order = np.argsort(radii)
    assert (np.diff(mags[order]) >= -1e-12).all()


def test_misprediction_spec_fig_pattern():
    # Sliding panel mistaken for a hinged one, most uncertain along the pull
    # axis: the reported flow must be arcs even though the truth is a slide.
    spec = FlowCloudSpec(
        true_xi=Twist(np.array([0.0, 1.0, 0]), np.zeros(3)),
        reported_xi=revolute_edge(),
        log_sigma=np.array([1.5, 0.5, -2.0]),
        n_points=200,
        seed=11,
    )
    cloud = generate(spec)
    assert np.abs(cloud.flow[:, 0]).max() > 1e-4  # arcs bend out of the panel plane
    np.testing.assert_array_equal(cloud.log_sigma[0], [1.5, 0.5, -2.0])


def test_save_load_round_trip(tmp_path):
    spec = FlowCloudSpec(
        true_xi=prismatic_x(),
        reported_xi=revolute_edge(),
        n_points=37,
        noise_sigma=np.array([1e-3, 2e-3, 0.0]),
        log_sigma=np.array([0.3, -0.7, 1.2]),
        seed=5,
    )
    cloud = generate(spec)
    path = tmp_path / "cloud.txt"
    save_flow_cloud(cloud, path)
    back = load_flow_cloud(path)
    np.testing.assert_array_equal(back.points, cloud.points)
    np.testing.assert_array_equal(back.mask, cloud.mask)
    np.testing.assert_array_equal(back.flow, cloud.flow)
    np.testing.assert_array_equal(back.log_sigma, cloud.log_sigma)


def test_load_well_formed_three_point_file(tmp_path):
    path = tmp_path / "three.txt"
    path.write_text(
        "x y z mask fx fy fz ux uy uz\n"
        "0 0 0 1 0.01 0 0 -1 -1 -1\n"
        "0.1 0 0 1 0.01 0 0 -1 -1 -1\n"
        "0.2 0.3 0 0 0 0 0 0 0 0\n"
    )
    cloud = load_flow_cloud(path)
    assert len(cloud) == 3
    assert cloud.mask.tolist() == [True, True, False]


def test_load_bad_mask_raises_with_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text(
        "x y z mask fx fy fz ux uy uz\n"
        "0 0 0 2 0.01 0 0 -1 -1 -1\n"
    )
    with pytest.raises(ParseError) as err:
        load_flow_cloud(path)
    assert err.value.line == 2


def test_load_wrong_column_count(tmp_path):
    path = tmp_path / "cols.txt"
    path.write_text("x y z mask fx fy fz ux uy uz\n0 0 0 1 0.01\n")
    with pytest.raises(InconsistentColumns):
        load_flow_cloud(path)


def test_load_missing_header(tmp_path):
    path = tmp_path / "nohdr.txt"
    path.write_text("0 0 0 1 0.01 0 0 -1 -1 -1\n")
    with pytest.raises(ParseError) as err:
        load_flow_cloud(path)
    assert err.value.line == 1


def test_spec_validation():
    with pytest.raises(ValueError):
        FlowCloudSpec(true_xi=prismatic_x(), reported_xi=prismatic_x(), n_points=0)
    with pytest.raises(ValueError):
        FlowCloudSpec(
            true_xi=prismatic_x(),
            reported_xi=prismatic_x(),
            noise_sigma=np.array([-1.0, 0, 0]),
        )
