import json
import math

import numpy as np
import pytest

from sddf.augmentation import PointCloud
from sddf.evaluation import (
    DistanceImage,
    ImageFileError,
    MetricReport,
    chamfer_metrics,
    decode_pgm,
    decode_ply,
    decode_sddi,
    encode_pgm,
    encode_ply,
    encode_sddi,
    freespace_rate,
    image_to_pointcloud,
    mean_abs_error,
    nearest_distances,
    nn_brute,
    nn_grid,
    read_ply,
    read_sddi,
    render,
    write_ply,
    write_sddi,
)
from sddf.model import ArchSpec, SddfModel
from sddf.shapes import Sphere, SensorModel, look_at, simulate_scan


def offset_model(seed=0, dim=3, bias=0.5):
    """Small random net whose distances stay finite and positive for sensors near the origin."""
    rng = np.random.default_rng(seed)
    model = SddfModel.initialize(ArchSpec(dim=dim, layers=2, width=16), rng, "erf")
    model.theta *= 0.05
    model.theta[-1] = bias
    return model


def camera(pos, size=16, d_max=100.0, target=(0.0, 0.0, 0.0)):
    return SensorModel("pinhole", look_at(pos, target), width=size, height=size, focal=size, d_max=d_max)


# ------------------------------------------------------------------ render


def test_render_shifts_with_sensor_along_axis():
    model = offset_model()
    t = 1.75
    near = camera([0.0, 0.0, 3.0], size=15)
    far = camera([0.0, 0.0, 3.0 + t], size=15)
    a, b = render(model, None, near), render(model, None, far)
    # the centre pixel of an odd-sized image looks exactly along the axis
    assert np.array_equal(near.rays_world()[1][7 * 15 + 7], [0.0, 0.0, -1.0])
    assert abs(b.values[7, 7] - a.values[7, 7] - t) < 1e-9
    # off-axis rays move sideways, so they need not shift by t
    assert np.isfinite(a.values).all()
    again = render(model, None, near)
    assert again.values.tobytes() == a.values.tobytes()


def test_render_applies_sensor_range():
    model = offset_model()
    short = camera([0.0, 0.0, 3.0], d_max=1.0)
    assert np.all(np.isinf(render(model, None, short).values))


def test_image_to_pointcloud_on_sphere_oracle():
    sensor = camera([0.0, 0.0, 3.0], size=32)
    img = DistanceImage(simulate_scan(Sphere(), sensor).distances, sensor)
    cloud = image_to_pointcloud(img)
    assert len(cloud) == int(np.isfinite(img.values).sum()) > 0
    assert np.max(np.abs(np.linalg.norm(cloud.points, axis=1) - 1.0)) < 1e-9
    empty = DistanceImage(np.full(sensor.shape, np.inf), sensor)
    assert len(image_to_pointcloud(empty)) == 0
    with pytest.raises(ValueError):
        DistanceImage(-np.ones(sensor.shape), sensor)


def test_freespace_rates():
    model = offset_model()
    sensor = camera([0.0, 0.0, 3.0], d_max=3.3)
    own = render(model, None, sensor).as_scan()
    assert 0 < own.finite_mask.sum() < len(own)
    assert freespace_rate(model, None, own) == (1.0, 1.0)
    assert mean_abs_error(model, None, own) == 0.0
    saturated = offset_model(bias=40.0)
    saturated.squasher = type(saturated.squasher)("sigmoid")
    saturated.theta[:-1] = 0.0
    assert freespace_rate(saturated, None, own) == (1.0, 0.0)
    assert math.isnan(mean_abs_error(saturated, None, own))


# ----------------------------------------------------------------- Chamfer


def test_identical_clouds_score_zero(rng):
    pts = rng.normal(size=(300, 3))
    r = chamfer_metrics(pts, pts)
    assert (r.chamfer_l1, r.chamfer_l2, r.completeness, r.accuracy) == (0.0, 0.0, 0.0, 0.0)


def test_uniform_offset_by_hand():
    gt = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0]])
    delta = 0.25
    pred = gt + [0.0, 0.0, delta]
    r = chamfer_metrics(pred, gt, normalize=False)
    assert r.completeness == r.accuracy == r.chamfer_l1 == pytest.approx(delta)
    assert r.chamfer_l2 == pytest.approx(delta ** 2)
    rn = chamfer_metrics(pred, gt, normalize=True)
    assert rn.chamfer_l1 == pytest.approx(delta / 10.0)


def test_metric_relations(rng):
    a = rng.normal(size=(400, 3))
    b = rng.normal(size=(250, 3)) * 1.2 + 0.1
    ab = chamfer_metrics(a, b, normalize=False)
    ba = chamfer_metrics(b, a, normalize=False)
    assert ab.chamfer_l1 == pytest.approx(ba.chamfer_l1, rel=1e-14)
    assert ab.completeness == pytest.approx(ba.accuracy, rel=1e-14)
    assert ab.chamfer_l1 == pytest.approx((ab.completeness + ab.accuracy) / 2)
    # identical rigid motion of both clouds
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    shift = rng.normal(size=3) * 5
    moved = chamfer_metrics(a @ q.T + shift, b @ q.T + shift, normalize=False)
    for name in ("chamfer_l1", "chamfer_l2", "completeness", "accuracy"):
        assert abs(getattr(moved, name) - getattr(ab, name)) < 1e-9
    shifted = chamfer_metrics(a + shift, b + shift)
    assert abs(shifted.chamfer_l1 - chamfer_metrics(a, b).chamfer_l1) < 1e-9
    with pytest.raises(ValueError):
        chamfer_metrics(np.zeros((0, 3)), b)


@pytest.mark.parametrize("dim", [2, 3])
def test_grid_search_equals_brute_force(rng, dim):
    cases = [
        (rng.normal(size=(3000, dim)), rng.normal(size=(2500, dim))),
        (rng.normal(size=(500, dim)) + 50.0, rng.normal(size=(700, dim))),
        (rng.uniform(0, 1, (800, dim)), np.vstack([rng.normal(scale=0.01, size=(600, dim)),
                                                   rng.normal(size=(5, dim)) * 30])),
        (rng.normal(size=(10, dim)), rng.normal(size=(1, dim))),
    ]
    for src, dst in cases:
        np.testing.assert_array_equal(nn_grid(src, dst), nn_brute(src, dst))
    dup = np.repeat(rng.normal(size=(20, dim)), 50, axis=0)
    np.testing.assert_array_equal(nn_grid(dup, dup), 0.0)
    with pytest.raises(ValueError):
        nearest_distances(src, dst, "kd")


def test_report_json():
    r = MetricReport(0.1, 0.2, 0.3, 0.4)
    assert json.loads(r.to_json()) == {"chamfer_l2": 0.1, "chamfer_l1": 0.2,
                                       "completeness": 0.3, "accuracy": 0.4}


# ------------------------------------------------------------ file formats


def test_sddi_round_trip(tmp_path, rng):
    sensor = camera([0.5, -2.0, 1.0], size=8)
    vals = rng.uniform(0.1, 9.0, (8, 8))
    vals[2, 3] = np.inf
    img = DistanceImage(vals, sensor)
    write_sddi(tmp_path / "a.sddi", img)
    back, pose = read_sddi(tmp_path / "a.sddi")
    assert back.tobytes() == vals.tobytes()
    assert pose.position.tobytes() == sensor.pose.position.tobytes()
    assert pose.rotation.tobytes() == sensor.pose.rotation.tobytes()
    data = encode_sddi(img)
    for bad in (b"XXXX" + data[4:], data[:-8], data[:4] + (2).to_bytes(4, "little") + data[8:]):
        with pytest.raises(ImageFileError):
            decode_sddi(bad)


def test_pgm_round_trip_and_miss_encoding(rng):
    sensor = camera([0.0, 0.0, 3.0], size=8, d_max=10.0)
    vals = rng.uniform(0.1, 9.9, (8, 8))
    vals[0, 0] = 0.04 * 10.0 * 8224 / 65534  # first sample's high byte is an ASCII space
    vals[1, 1] = np.inf
    img = DistanceImage(vals, sensor)
    data = encode_pgm(img)
    assert data.startswith(b"P5\n8 8\n65535\n")
    back = decode_pgm(data, 10.0)
    f = np.isfinite(vals)
    np.testing.assert_array_equal(np.isinf(back), ~f)
    assert np.max(np.abs(back[f] - vals[f])) <= 10.0 / 65534 / 2 + 1e-12
    with pytest.raises(ImageFileError):
        decode_pgm(b"P2\n8 8\n255\n", 10.0)
    with pytest.raises(ImageFileError):
        decode_pgm(data[:-2], 10.0)


def test_ply_round_trip(tmp_path, rng):
    pts = rng.normal(size=(40, 3))
    write_ply(tmp_path / "c.ply", PointCloud(pts, pts))
    assert read_ply(tmp_path / "c.ply").tobytes() == pts.tobytes()
    flat = decode_ply(encode_ply(pts[:, :2]))
    np.testing.assert_array_equal(flat[:, :2], pts[:, :2])
    np.testing.assert_array_equal(flat[:, 2], 0.0)
    assert decode_ply(encode_ply(np.zeros((0, 3)))).shape == (0, 3)
    with pytest.raises(ImageFileError):
        decode_ply(b"off\n")
    with pytest.raises(ImageFileError):
        decode_ply(encode_ply(pts)[:-30].rsplit(b"\n", 2)[0])
