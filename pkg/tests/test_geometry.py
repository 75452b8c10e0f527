import warnings

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import resize_oracle

from hydra_bench.errors import (
    AnchorNotVisible,
    DegenerateRig,
    DegenerateRigWarning,
    NonPositiveDepth,
    RectOutOfBounds,
)
from hydra_bench.geometry import (
    CameraCalibration,
    GroundGrid,
    PatchPlacement,
    apply_homography,
    bilinear_resize,
    crop_resize_chw,
    ground_homography,
    load_rig,
    look_at_calibration,
    ring_rig,
    save_rig,
    split_views,
    transfer_placement,
    warp_region,
    world_to_pixel,
)


def overhead(view_id, x=0.0, y=0.0, h=5.0, f=50.0, size=(64, 64)):
    """Camera above (x, y) looking straight down; image x = world x, image y = -world y."""
    R = np.diag([1.0, -1.0, -1.0])
    C = np.array([x, y, h])
    K = np.array([[f, 0, size[1] / 2], [0, f, size[0] / 2], [0, 0, 1.0]])
    return CameraCalibration(view_id, K, R, -R @ C, size)


# --------------------------------------------------------------------------
# projection


def test_identity_camera_projects_to_principal_point():
    cam = CameraCalibration(0, np.eye(3), np.diag([1.0, -1.0, -1.0]), np.zeros(3), (10, 10))
    np.testing.assert_allclose(world_to_pixel(cam, (0, 0, -1)), [0, 0], atol=1e-12)


def test_pinhole_offset_hand_value():
    K = np.array([[100.0, 0, 32], [0, 100.0, 32], [0, 0, 1]])
    cam = CameraCalibration(0, K, np.diag([1.0, -1.0, -1.0]), np.zeros(3), (64, 64))
    a = world_to_pixel(cam, (0, 0, -2))
    b = world_to_pixel(cam, (1, 0, -2))
    assert b[0] - a[0] == pytest.approx(50.0, abs=1e-12)


def test_behind_camera_raises():
    cam = CameraCalibration(0, np.eye(3), np.diag([1.0, -1.0, -1.0]), np.zeros(3), (10, 10))
    with pytest.raises(NonPositiveDepth):
        world_to_pixel(cam, (0, 0, 1))


def test_calibration_validation():
    with pytest.raises(ValueError):
        CameraCalibration(0, np.eye(3), np.array([[1, 0, 0], [0, 2, 0], [0, 0, 1.0]]), np.zeros(3), (8, 8))
    with pytest.raises(ValueError):
        CameraCalibration(0, np.diag([-1.0, 1, 1]), np.eye(3), np.zeros(3), (8, 8))


@given(st.integers(0, 10_000))
def test_homography_matches_projection(seed):
    rng = np.random.default_rng(seed)
    az = rng.uniform(0, 2 * np.pi)
    radius, height = rng.uniform(4, 9), rng.uniform(2, 5)
    cam = look_at_calibration(0, (radius * np.cos(az), radius * np.sin(az), height),
                              (rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0, 1)),
                              rng.uniform(60, 150), (96, 96))
    H = ground_homography(cam)
    pts = rng.uniform(-2, 2, (100, 2))
    via_h = apply_homography(H, pts)
    direct = np.array([world_to_pixel(cam, (x, y, 0.0)) for x, y in pts])
    np.testing.assert_allclose(via_h, direct, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(np.linalg.inv(H) @ H, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(apply_homography(np.linalg.inv(H), via_h), pts, rtol=1e-9, atol=1e-9)


def test_overhead_homography_is_hand_similarity():
    cam = overhead(0, x=1.0, y=-0.5, h=4.0, f=40.0, size=(64, 64))
    H = ground_homography(cam)
    # pixel = (f (x - cx)/h + 32, -f (y - cy)/h + 32), scaled by the depth h
    expected = np.array([[40.0, 0, 4 * 32 - 40.0 * 1.0],
                         [0, -40.0, 4 * 32 - 40.0 * 0.5],
                         [0, 0, 4.0]])
    np.testing.assert_allclose(H / H[2, 2], expected / expected[2, 2], atol=1e-12)
    assert H[2, 0] == 0 and H[2, 1] == 0


# --------------------------------------------------------------------------
# transfer


def test_transfer_identity():
    cam = overhead(0)
    src = PatchPlacement(0, 3, (20, 30, 22, 40))
    out = transfer_placement(src, cam, cam, (0.1, 0.2))
    assert out.rect == src.rect and out.instance_id == 3


def test_transfer_translated_overhead_cameras():
    a, b = overhead(0, x=0.0), overhead(1, x=0.5)
    src = PatchPlacement(0, 0, (20, 30, 22, 40))
    out = transfer_placement(src, a, b, (0.0, 0.0))
    # shifting the camera +0.5 m in x moves the scene -f*0.5/h = -5 px
    assert out.rect == (15, 25, 22, 40)
    assert out.view_id == 1


def test_transfer_anchor_not_visible():
    a, b = overhead(0), overhead(1)
    with pytest.raises(AnchorNotVisible):
        transfer_placement(PatchPlacement(0, 0, (0, 4, 0, 4)), a, b, (50.0, 0.0))


def test_transfer_drops_tiny_rects():
    a = overhead(0)
    b = overhead(1, h=80.0)  # far camera: everything shrinks 16x
    assert transfer_placement(PatchPlacement(0, 0, (30, 33, 30, 33)), a, b, (0.0, 0.0)) is None


@given(st.integers(0, 10_000))
def test_transfer_round_trip_within_one_pixel(seed):
    rng = np.random.default_rng(seed)
    rig = ring_rig(4, rng.uniform(5, 9), rng.uniform(2, 4), rng.uniform(80, 130), (96, 96),
                   azimuth_offset_deg=rng.uniform(0, 90))
    i, j = rng.choice(4, 2, replace=False)
    anchor = rng.uniform(-1.0, 1.0, 2)
    a = world_to_pixel(rig[i], (*anchor, 0.0))
    w, h = rng.integers(4, 12), rng.integers(6, 16)
    x0, y0 = int(a[0]) - w // 2, int(a[1]) - h
    if x0 < 0 or y0 < 0 or x0 + w > 96 or y0 + h > 96:
        return
    src = PatchPlacement(int(i), 0, (x0, x0 + w, y0, y0 + h))
    there = transfer_placement(src, rig[i], rig[j], anchor)
    if there is None:
        return
    back = transfer_placement(there, rig[j], rig[i], anchor)
    if back is None or min(there.rect[0], there.rect[2]) == 0 or there.rect[1] == 96 or there.rect[3] == 96:
        return  # clipped on the way: not a pure round trip
    assert np.max(np.abs(np.array(back.rect) - np.array(src.rect))) <= 1


# --------------------------------------------------------------------------
# split_views


def test_split_two_opposing():
    rig = ring_rig(2, 6, 3, 100, (64, 64), azimuth_offset_deg=0)
    sources, dests = split_views(rig)
    assert sorted(sources) == [0, 1] and dests == {0: [], 1: []}


def test_split_seven_cameras():
    rig = []
    for v in range(7):
        x = -6.0 if v < 4 else 6.0  # 4 cameras on the left face +x, 3 on the right face -x
        rig.append(look_at_calibration(v, (x, -3 + 2.0 * v if v < 4 else -2 + 2.0 * (v - 4), 3), (0, 0, 0.9),
                                       100, (64, 64)))
    sources, dests = split_views(rig)
    sizes = sorted(len(dests[s]) + 1 for s in sources)
    assert sizes == [3, 4] and len(sources) == 2


def test_split_single_view_raises():
    with pytest.raises(DegenerateRig):
        split_views(ring_rig(2, 6, 3, 100, (64, 64))[:1])


def test_split_parallel_axes_warns():
    rig = [look_at_calibration(v, (v, -6, 3), (v, 0, 0.9), 100, (64, 64)) for v in range(4)]
    with pytest.warns(DegenerateRigWarning):
        sources, dests = split_views(rig)
    assert sources == [0, 1] and dests == {0: [2], 1: [3]}


@given(st.integers(2, 9), st.floats(0, 360))
def test_split_is_partition(n, offset):
    rig = ring_rig(n, 6, 3, 100, (64, 64), azimuth_offset_deg=offset)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateRigWarning)
        sources, dests = split_views(rig)
    members = [v for s in sources for v in [s, *dests[s]]]
    assert sorted(members) == list(range(n))
    assert set(sources) == set(dests)


# --------------------------------------------------------------------------
# warping


def test_warp_exact_copy_when_sizes_match(rng):
    img = rng.uniform(size=(20, 20, 3))
    patch = rng.uniform(size=(5, 6, 3))
    out = warp_region(img, patch, PatchPlacement(0, 0, (3, 9, 4, 9)))
    np.testing.assert_array_equal(out[4:9, 3:9], patch)
    mask = np.ones((20, 20), bool)
    mask[4:9, 3:9] = False
    np.testing.assert_array_equal(out[mask], img[mask])


def test_warp_constant_patch():
    out = warp_region(np.zeros((16, 16, 3)), np.full((4, 4, 3), 0.3), PatchPlacement(0, 0, (2, 13, 1, 8)))
    np.testing.assert_allclose(out[1:8, 2:13], 0.3, atol=1e-15)


def test_warp_upscale_hand_weights():
    patch = np.zeros((2, 2, 3))
    patch[..., 0] = [[0.0, 1.0], [2.0, 3.0]]
    out = warp_region(np.zeros((4, 4, 3)), patch, PatchPlacement(0, 0, (0, 4, 0, 4)))[..., 0]
    # half-pixel sampling: output index i maps to source (i + 0.5) / 2 - 0.5
    # interior rows/cols sit at 0.25 and 0.75 between the two source samples
    assert out[1, 1] == pytest.approx(0.75 * 0.75 * 0 + 0.75 * 0.25 * 1 + 0.25 * 0.75 * 2 + 0.25 * 0.25 * 3)
    assert out[2, 1] == pytest.approx(0.25 * 0.75 * 0 + 0.25 * 0.25 * 1 + 0.75 * 0.75 * 2 + 0.75 * 0.25 * 3)
    assert out[0, 0] == pytest.approx(0.0) and out[3, 3] == pytest.approx(3.0)


def test_warp_out_of_bounds():
    with pytest.raises(RectOutOfBounds):
        warp_region(np.zeros((8, 8, 3)), np.zeros((2, 2, 3)), PatchPlacement(0, 0, (4, 10, 0, 4)))
    with pytest.raises(RectOutOfBounds):
        PatchPlacement(0, 0, (4, 4, 0, 4))


@given(st.integers(0, 1000), st.integers(2, 12), st.integers(2, 12), st.integers(2, 12), st.integers(2, 12))
def test_resize_matches_oracle(seed, h, w, oh, ow):
    a = np.random.default_rng(seed).normal(size=(3, h, w))
    got = bilinear_resize(torch.tensor(a), (oh, ow)).numpy()
    np.testing.assert_allclose(got, resize_oracle(a, oh, ow), rtol=1e-12, atol=1e-12)


def test_crop_resize_matches_oracle(rng):
    g = rng.normal(size=(3, 30, 30))
    got = crop_resize_chw(torch.tensor(g), (4, 17, 6, 25), (8, 8)).numpy()
    np.testing.assert_allclose(got, resize_oracle(g[:, 6:25, 4:17], 8, 8), rtol=1e-12, atol=1e-12)


def test_warp_derivative_matches_finite_differences(rng):
    img = torch.tensor(rng.uniform(size=(20, 20, 3)))
    patch = torch.tensor(rng.uniform(size=(8, 8, 3)), requires_grad=True)
    pl = PatchPlacement(0, 0, (2, 15, 3, 14))
    probe = torch.tensor(rng.normal(size=(20, 20, 3)))
    (warp_region(img, patch, pl) * probe).sum().backward()
    eps = 1e-4
    base = patch.detach().clone()
    for idx in [(0, 0, 0), (3, 4, 1), (7, 7, 2), (5, 2, 0), (1, 6, 2)]:
        plus, minus = base.clone(), base.clone()
        plus[idx] += eps
        minus[idx] -= eps
        fd = ((warp_region(img, plus, pl) * probe).sum() - (warp_region(img, minus, pl) * probe).sum()) / (2 * eps)
        assert abs(float(fd) - float(patch.grad[idx])) <= 1e-5


def test_warp_derivative_is_bilinear_weight():
    patch = torch.zeros((2, 2, 3), dtype=torch.float64, requires_grad=True)
    out = warp_region(torch.zeros((4, 4, 3), dtype=torch.float64), patch, PatchPlacement(0, 0, (0, 4, 0, 4)))
    out[1, 1, 0].backward()
    np.testing.assert_allclose(patch.grad[..., 0].numpy(), [[0.5625, 0.1875], [0.1875, 0.0625]])


# --------------------------------------------------------------------------
# grids and rigs


def test_grid_cell_mapping_round_trip():
    g = GroundGrid((-2.4, -2.4), 0.2, (24, 24))
    np.testing.assert_allclose(g.world_to_cell(g.cell_centers()[3, 5]), [5, 3], atol=1e-12)
    np.testing.assert_allclose(g.cell_to_world(g.world_to_cell([0.33, -1.1])), [0.33, -1.1], atol=1e-12)
    assert g.extent == pytest.approx((-2.4, 2.4, -2.4, 2.4))
    with pytest.raises(ValueError):
        GroundGrid((0, 0), 0.2, (4, 24))


def test_rig_serialization_round_trip(tmp_path):
    rig = ring_rig(4, 7, 3, 110, (96, 96))
    save_rig(rig, tmp_path / "rig.json")
    back = load_rig(tmp_path / "rig.json")
    for a, b in zip(rig, back):
        np.testing.assert_array_equal(a.intrinsic, b.intrinsic)
        np.testing.assert_array_equal(a.rotation, b.rotation)
        np.testing.assert_array_equal(a.translation, b.translation)
        assert a.image_size == b.image_size
