import math
import os
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from oracles import nearest_fill_bruteforce, normals_cross_product
from stngrasp.data import (
    CROP,
    dataset_hash,
    fill_holes_nearest,
    load_cache,
    load_cornell,
    load_dataset,
    make_background_patches,
    parse_rect_file,
    preprocess,
    read_point_cloud,
    save_cache,
    split_imagewise,
    surface_normals,
    write_point_cloud,
    write_rect_file,
)
from stngrasp.errors import ContractError
from stngrasp.fixtures import make_scene, write_cornell_fixture
from stngrasp.geometry import GraspRect


def assert_image_invariants(sample):
    ch = sample.image.channels
    assert ch.shape == (7, CROP, CROP)
    assert np.all(np.isfinite(ch))
    assert ch[:3].min() >= 0 and ch[:3].max() <= 1
    assert abs(float(ch[3].mean())) < 0.05  # zero mean over valid pixels; holes filled afterwards
    np.testing.assert_allclose(np.linalg.norm(ch[4:7].astype(np.float64), axis=0), 1.0, atol=1e-6)
    for r in sample.positives + sample.negatives:
        assert 0 <= r.x < CROP and 0 <= r.y < CROP
    if sample.is_background:
        assert not sample.positives


# ---------------------------------------------------------------- rectangle files

def test_axis_aligned_rectangle(tmp_path):
    p = tmp_path / "r.txt"
    p.write_text("0 0\n4 0\n4 2\n0 2\n")
    assert parse_rect_file(p) == [GraspRect(2, 1, 0, 2, 4)]


def test_empty_file(tmp_path):
    p = tmp_path / "r.txt"
    p.write_text("")
    assert parse_rect_file(p) == []


def test_two_squares_round_trip(tmp_path):
    sq = np.array([[0, 0], [2, 0], [2, 2], [0, 2]], float)
    t = math.radians(45)
    R = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    rot = (sq - 1) @ R.T + [10, 10]
    p = tmp_path / "r.txt"
    p.write_text("".join(f"{x} {y}\n" for x, y in np.vstack([sq, rot])))
    rects = parse_rect_file(p)
    assert len(rects) == 2
    np.testing.assert_allclose(rects[0].corners(), sq, atol=1e-6)
    np.testing.assert_allclose(rects[1].corners(), rot, atol=1e-6)


def test_partial_group_nan_and_garbage_are_skipped(tmp_path):
    p = tmp_path / "r.txt"
    p.write_text("0 0\n4 0\n4 2\n0 2\n"
                 "NaN NaN\n4 0\n4 2\n0 2\n"
                 "0 0\n4 x\n4 2\n0 2\n"
                 "1 1\n2 2\n")
    from stngrasp.data import LoadReport
    report = LoadReport()
    rects = parse_rect_file(p, report)
    assert len(rects) == 1
    assert report.skipped_rects == 2
    assert len(report.warnings) == 3
    assert any("line 5" in w for w in report.warnings)
    assert any("line 10" in w for w in report.warnings)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 400), st.floats(0, 400), st.floats(-90, 89.9), st.floats(2, 80), st.floats(2, 80))
def test_write_parse_round_trip(tmp_path_factory, x, y, th, w, h):
    p = tmp_path_factory.mktemp("rt") / "r.txt"
    r = GraspRect(x, y, th, w, h)
    write_rect_file(p, [r])
    back = parse_rect_file(p)[0]
    np.testing.assert_allclose(back.corners(), r.corners(), atol=1e-5)


# ---------------------------------------------------------------- depth

def test_point_cloud_round_trip(tmp_path):
    depth = np.random.default_rng(0).uniform(500, 1500, size=(6, 8))
    depth[2, 3] = np.nan
    write_point_cloud(tmp_path / "p.txt", depth)
    back = read_point_cloud(tmp_path / "p.txt", depth.shape)
    assert np.isnan(back[2, 3])
    np.testing.assert_allclose(back[np.isfinite(depth)], depth[np.isfinite(depth)], atol=1e-6)


def test_hole_fill_matches_brute_force():
    rng = np.random.default_rng(1)
    depth = rng.uniform(0, 10, size=(12, 15))
    depth[5, 6:9] = np.nan          # a 3-pixel hole
    depth[rng.random(depth.shape) < 0.2] = np.nan
    filled = fill_holes_nearest(depth)
    assert np.all(np.isfinite(filled))
    np.testing.assert_array_equal(filled, nearest_fill_bruteforce(depth))


def test_hole_fill_tie_prefers_smaller_row_then_column():
    d = np.array([[1.0, 2.0, 3.0],
                  [4.0, np.nan, 5.0],
                  [6.0, 7.0, 8.0]])
    assert fill_holes_nearest(d)[1, 1] == 2.0  # (0,1), (1,0), (1,2), (2,1) tie; smallest row wins
    d = np.array([[np.nan, 9.0, np.nan], [1.0, np.nan, 3.0]])
    assert fill_holes_nearest(d)[1, 1] == 9.0
    assert fill_holes_nearest(np.array([[4.0, np.nan, 6.0]]))[0, 1] == 4.0


def test_constant_depth_normals_point_up():
    n = surface_normals(np.full((5, 6), 3.0))
    np.testing.assert_array_equal(n, np.broadcast_to(np.array([0, 0, 1.0])[:, None, None], n.shape))


def test_ramp_normals():
    z = np.tile(np.arange(7, dtype=float), (5, 1))
    n = surface_normals(z)
    np.testing.assert_allclose(n[:, 1:-1, 1:-1].reshape(3, -1).T + 0.0, np.tile(np.array([-1, 0, 1]) / math.sqrt(2), (15, 1)), atol=1e-12)


def test_smooth_surface_normals_match_cross_product_oracle():
    from scipy.ndimage import zoom
    z = zoom(np.random.default_rng(4).normal(size=(4, 4)), 8, order=1)
    np.testing.assert_allclose(surface_normals(z), normals_cross_product(z), atol=1e-6)


def test_normals_need_filled_depth():
    with pytest.raises(ContractError):
        surface_normals(np.array([[1.0, np.nan]]))


# ---------------------------------------------------------------- preprocess

def test_crop_offset_and_rectangle_shift():
    rgb = np.zeros((480, 640, 3), np.uint8)
    depth = np.full((480, 640), 800.0)
    s = preprocess(rgb, depth, [GraspRect(320, 240, 10, 30, 20), GraspRect(10, 10, 0, 5, 5)])
    assert s.image.crop_offset == (120, 40)
    assert len(s.positives) == 1
    assert (s.positives[0].x, s.positives[0].y) == (200, 200)


def test_constant_depth_normalizes_to_zero():
    s = preprocess(np.full((400, 400, 3), 128, np.uint8), np.full((400, 400), 700.0))
    assert np.all(s.image.depth == 0)
    assert_image_invariants(s)


def test_depth_hole_filled_from_nearest_neighbour():
    rng = np.random.default_rng(8)
    depth = rng.uniform(600, 900, size=(400, 400))
    depth[100, 200:203] = np.nan
    s = preprocess(np.zeros((400, 400, 3), np.uint8), depth)
    ref = nearest_fill_bruteforce(depth)
    valid = np.isfinite(depth)
    expected = (ref - depth[valid].mean()) / depth[valid].std()
    np.testing.assert_allclose(s.image.depth[100, 200:203], expected[100, 200:203], rtol=1e-6)
    assert np.all(np.isfinite(s.image.channels))


def test_undersized_image_is_rejected():
    with pytest.raises(ContractError):
        preprocess(np.zeros((399, 640, 3), np.uint8), np.ones((399, 640)))


# ---------------------------------------------------------------- load_cornell

def test_fixture_directory_loads(cornell_samples):
    samples, report = cornell_samples
    assert [s.sample_id for s in samples] == ["pcd0100", "pcd0101", "pcd0102", "pcd0103"]
    assert report.n_images == 4
    for s in samples:
        assert_image_invariants(s)
        assert s.positives and s.negatives


def test_point_cloud_and_depth_png_agree(tmp_path):
    write_cornell_fixture(tmp_path / "a", 1, seed=5, point_cloud_items=1)
    write_cornell_fixture(tmp_path / "b", 1, seed=5, point_cloud_items=0)
    (a,), _ = load_cornell(tmp_path / "a")
    (b,), _ = load_cornell(tmp_path / "b")
    np.testing.assert_allclose(a.image.rgb, b.image.rgb)
    # depth png stores whole millimetres; the point cloud keeps the fraction
    assert np.corrcoef(a.image.depth.ravel(), b.image.depth.ravel())[0, 1] > 0.99


def test_empty_directory(tmp_path):
    samples, report = load_cornell(tmp_path)
    assert samples == []
    assert report.to_dict()["images"] == 0


def test_nan_rectangle_is_skipped_with_one_warning(tmp_path):
    write_cornell_fixture(tmp_path, 2, seed=9, n_positive=3)
    pos = tmp_path / "pcd0101cpos.txt"
    lines = pos.read_text().splitlines()
    lines[4] = "NaN NaN"
    pos.write_text("\n".join(lines) + "\n")
    samples, report = load_cornell(tmp_path)
    assert len(samples) == 2
    assert len(samples[0].positives) == 3
    assert len(samples[1].positives) == 2
    assert len(report.warnings) == 1
    assert report.skipped_rects == 1


def test_missing_image_is_a_hard_error(tmp_path):
    write_cornell_fixture(tmp_path, 1, seed=1)
    (tmp_path / "pcd0100r.png").unlink()
    with pytest.raises(FileNotFoundError):
        load_cornell(tmp_path)


def test_missing_annotation_skips_sample(tmp_path):
    write_cornell_fixture(tmp_path, 2, seed=1)
    (tmp_path / "pcd0100cneg.txt").unlink()
    (tmp_path / "pcd0101cpos.txt").write_bytes(b"\xff\xfe\x00bad")
    samples, report = load_cornell(tmp_path)
    assert samples == []
    assert report.skipped_samples == 2


def test_nested_directories_are_searched(cornell_dir, tmp_path):
    shutil.copytree(cornell_dir, tmp_path / "01")
    samples, _ = load_cornell(tmp_path)
    assert len(samples) == 4


def test_fixture_scene_is_deterministic():
    a, b = make_scene(3), make_scene(3)
    np.testing.assert_array_equal(a[0], b[0])
    assert a[2] == b[2]


# ---------------------------------------------------------------- backgrounds

def test_background_patches():
    assert make_background_patches(0, 1) == []
    a = make_background_patches(10, 7)
    b = make_background_patches(10, 7)
    assert len(a) == 10
    for s, t in zip(a, b):
        assert s.is_background and not s.positives
        assert s.image.channels.tobytes() == t.image.channels.tobytes()
        assert np.all(s.image.rgb.mean(axis=(1, 2)) >= 0.9)
        assert float(s.image.normals[2].min()) > 0.99
        assert_image_invariants(s)
    with pytest.raises(ContractError):
        make_background_patches(-1, 0)


# ---------------------------------------------------------------- splits

def test_full_size_split():
    ids = [f"pcd{i:04d}" for i in range(855)]
    split = split_imagewise(ids, 0.8, seed=0)
    assert (len(split.train), len(split.test)) == (684, 171)


def test_ten_samples_two_seeds():
    ids = [f"s{i}" for i in range(10)]
    a, b = split_imagewise(ids, seed=1), split_imagewise(ids, seed=2)
    assert (len(a.train), len(a.test)) == (len(b.train), len(b.test)) == (8, 2)
    assert set(a.test) != set(b.test)
    assert split_imagewise(ids, seed=1) == a


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 60), st.integers(1, 3))
def test_split_is_deterministic_and_imagewise(seed, n_images, per_image):
    ids = [f"img{i}" for i in range(n_images) for _ in range(per_image)]
    s = split_imagewise(ids, seed=seed)
    assert s == split_imagewise(ids, seed=seed)
    assert sorted(s.train + s.test) == sorted(ids)
    assert not set(s.train) & set(s.test)
    assert len(set(s.train)) == math.floor(n_images * 0.8)


def test_split_errors():
    with pytest.raises(ContractError):
        split_imagewise(["a"])
    with pytest.raises(ContractError):
        split_imagewise(["a", "b"], ratio_train=1.0)


# ---------------------------------------------------------------- cache

def test_cache_round_trip_is_bit_exact(cornell_samples, tmp_path):
    samples, _ = cornell_samples
    path = tmp_path / "cache.zip"
    save_cache(samples, path)
    back = load_cache(path)
    assert [s.sample_id for s in back] == [s.sample_id for s in samples]
    for s, t in zip(samples, back):
        assert s.image.channels.tobytes() == t.image.channels.tobytes()
        assert s.image.crop_offset == t.image.crop_offset
        assert s.positives == t.positives and s.negatives == t.negatives
    assert dataset_hash(back) == dataset_hash(samples)
    save_cache(back, tmp_path / "again.zip")
    assert path.read_bytes() == (tmp_path / "again.zip").read_bytes()
    assert load_dataset(path)[1] is None


def test_cache_rejects_other_archives(tmp_path):
    from stngrasp.archive import write_archive
    write_archive(tmp_path / "x.zip", {}, {"format": "other"})
    with pytest.raises(ContractError):
        load_cache(tmp_path / "x.zip")


def test_sixteen_bit_rgb_is_scaled(tmp_path):
    rgb = np.full((400, 400, 3), 65535, np.uint16)
    s = preprocess(rgb, np.full((400, 400), 5.0))
    assert np.all(s.image.rgb == 1.0)
    Image.fromarray(np.zeros((4, 4), np.uint16)).save(tmp_path / "d.png")


@pytest.mark.skipif("CORNELL_ROOT" not in os.environ, reason="set CORNELL_ROOT to the full dataset")
def test_full_dataset_split():
    samples, report = load_cornell(os.environ["CORNELL_ROOT"])
    assert len(samples) == 855
    split = split_imagewise(samples, 0.8, seed=0)
    assert (len(split.train), len(split.test)) == (684, 171)
    for s in samples[::50]:
        assert_image_invariants(s)
