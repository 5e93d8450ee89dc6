import json

import numpy as np
import pytest

from alignment import align_thermal_to_ir, read_labeled_frame
from audit_logger import read_events
from boxes import iou
from calibration import ChessboardSpec
from errors import ValidationError
from geometry import Distortion, GrayImage, Intrinsics, Pose, distort_points
from run_manifest import collect_outputs
from synthdata import (
    GeneratorConfig,
    HeatSource,
    HumanSpec,
    RigSpec,
    SceneSpec,
    board_poses,
    make_dataset,
    render_chessboard,
    render_pair,
    render_rig_views,
    sample_scene,
    split_of,
    threshold_detector,
)

BOARD = ChessboardSpec(6, 9, 25.0)
CAM = Intrinsics(384.0, 384.0, 159.5, 159.5)


def _scene(**kw):
    base = dict(width=64, height=64, humans=(HumanSpec(32.0, 32.0, 40.0),), seed=4)
    base.update(kw)
    return SceneSpec(**base)


def _contrast(pair):
    body = pair.body_alpha >= 0.5
    background = pair.body_alpha == 0
    return abs(pair.ir.pixels[body].mean() - pair.ir.pixels[background].mean())


# ---------- scenes ----------

def test_scene_validation():
    with pytest.raises(ValidationError):
        HumanSpec(10.0, 10.0, 20.0, posture='sitting')
    with pytest.raises(ValidationError):
        _scene(smoke_density=1.5)
    with pytest.raises(ValidationError):
        _scene(humans=(HumanSpec(5.0, 32.0, 40.0),))
    with pytest.raises(ValidationError):
        _scene(heat_sources=(HeatSource(80.0, 10.0, 3.0, 0.5),))
    with pytest.raises(ValidationError):
        HeatSource(10.0, 10.0, 3.0, 0.0)


def test_same_seed_renders_identical_pair():
    a, b = render_pair(_scene(noise_sigma=0.02)), render_pair(_scene(noise_sigma=0.02))
    assert np.array_equal(a.ir.pixels, b.ir.pixels)
    assert np.array_equal(a.thermal.pixels, b.thermal.pixels)
    assert a.gt_boxes == b.gt_boxes


def test_gt_box_bounds_rendered_figure():
    pair = render_pair(_scene())
    (box,) = pair.gt_boxes
    rows, cols = np.nonzero(pair.body_alpha >= 0.5)
    x0, y0, x1, y1 = box.corners
    assert x0 <= cols.min() and cols.max() <= x1
    assert y0 <= rows.min() and rows.max() <= y1
    assert box.h > box.w


def test_heavy_smoke_blinds_ir():
    clear = _contrast(render_pair(_scene()))
    smoky = _contrast(render_pair(_scene(smoke_density=1.0)))
    assert clear > 0.15
    assert smoky < 0.2 * clear


def test_smoke_leaves_thermal_untouched():
    clear, smoky = render_pair(_scene()), render_pair(_scene(smoke_density=1.0))
    assert np.array_equal(clear.thermal.pixels, smoky.thermal.pixels)


def test_empty_scene_thermal_stays_at_background():
    pair = render_pair(SceneSpec(48, 48, seed=2))
    assert pair.thermal.pixels.max() < 0.2
    assert pair.gt_boxes == ()


def test_heat_source_only_in_thermal():
    src = HeatSource(20.0, 20.0, 6.0, 0.95)
    plain, hot = render_pair(SceneSpec(48, 48, seed=2)), render_pair(SceneSpec(48, 48, heat_sources=(src,), seed=2))
    assert np.array_equal(plain.ir.pixels, hot.ir.pixels)
    assert hot.thermal.pixels[20, 20] > 0.9


def test_aligned_thermal_figure_lands_on_ir_figure():
    pair = render_pair(_scene(rig=RigSpec.default(64)))
    aligned = align_thermal_to_ir(pair.thermal, pair.gt_homography, pair.ir.size)
    ys, xs = np.nonzero(aligned.pixels > 0.5)
    by, bx = np.nonzero(pair.body_alpha >= 0.5)
    assert abs(xs.mean() - bx.mean()) < 1.0
    assert abs(ys.mean() - by.mean()) < 1.0


def test_sample_scene_depends_on_seed_and_index():
    gen = GeneratorConfig(size=64, seed=9)
    assert sample_scene(gen, 3) == sample_scene(gen, 3)
    assert sample_scene(gen, 3) != sample_scene(gen, 4)


def test_complementary_recipe():
    gen = GeneratorConfig(size=64, seed=1, corruption='complementary')
    heavy, light = sample_scene(gen, 0), sample_scene(gen, 1)
    assert heavy.smoke_density >= 0.8 and heavy.heat_sources == ()
    assert light.smoke_density <= 0.2 and 2 <= len(light.heat_sources) <= 4
    with pytest.raises(ValidationError):
        GeneratorConfig(corruption='fog')


# ---------- chessboards ----------

def test_chessboard_emits_every_corner():
    pose = board_poses(BOARD, CAM, (320, 320), 4)[1]
    img, obs = render_chessboard(CAM, Distortion(), pose, BOARD, (320, 320), view_id='v1')
    assert img.size == (320, 320)
    assert len(obs.corners) == BOARD.inner_rows * BOARD.inner_cols
    assert obs.view_id == 'v1'


def test_fronto_parallel_grid_is_uniform():
    pose = Pose(np.eye(3), np.array([-100.0, -62.5, 600.0]))
    _, obs = render_chessboard(CAM, Distortion(), pose, BOARD, (320, 320), supersample=1)
    grid = obs.corners.reshape(BOARD.inner_rows, BOARD.inner_cols, 2)
    assert np.allclose(np.diff(grid[..., 0], axis=1), 16.0, atol=1e-6)
    assert np.allclose(np.diff(grid[..., 1], axis=0), 16.0, atol=1e-6)


def test_barrel_distortion_pulls_corners_inward():
    pose = board_poses(BOARD, CAM, (320, 320), 4)[0]
    d = Distortion(k1=-0.3)
    _, ideal = render_chessboard(CAM, Distortion(), pose, BOARD, (320, 320), supersample=1)
    _, bent = render_chessboard(CAM, d, pose, BOARD, (320, 320), supersample=1)
    expected = CAM.normalized_to_pixel(distort_points(CAM.pixel_to_normalized(ideal.corners), d))
    assert np.allclose(bent.corners, expected, atol=1e-9)
    centre = np.array([CAM.cx, CAM.cy])
    for i in BOARD.outer_corner_indices():
        assert np.linalg.norm(bent.corners[i] - centre) < np.linalg.norm(ideal.corners[i] - centre)


def test_chessboard_out_of_view():
    far_left = Pose(np.eye(3), np.array([-5000.0, 0.0, 600.0]))
    with pytest.raises(ValidationError, match="out of view"):
        render_chessboard(CAM, Distortion(), far_left, BOARD, (320, 320), supersample=1)


def test_rig_views_pair_up():
    rig = RigSpec.default(320)
    poses = board_poses(BOARD, rig.ir, (320, 320), 2)
    views = render_rig_views(rig, BOARD, poses, (320, 320), supersample=1)
    assert [o.view_id for o in views.ir_corners] == [o.view_id for o in views.thermal_corners] == ['view00', 'view01']
    assert not np.allclose(views.ir_corners[0].corners, views.thermal_corners[0].corners)


# ---------- dataset ----------

def test_make_dataset_layout(tmp_path):
    root = str(tmp_path / 'ds')
    manifest = make_dataset(10, GeneratorConfig(size=64, seed=3), root)
    for sub in ('ir', 'thermal', 'labels'):
        assert len(list((tmp_path / 'ds' / sub).iterdir())) == 10
    assert (tmp_path / 'ds' / 'manifest.json').exists()
    assert sum(len(v) for v in manifest['splits'].values()) == 10
    assert [f['id'] for f in manifest['frames']] == [f"frame_{i:05d}" for i in range(10)]
    frame = read_labeled_frame(root, 'frame_00000')
    assert frame.pair.size == tuple(manifest['frames'][0]['crop'][k] for k in ('w', 'h'))
    assert len(read_events(event='dataset_frame_written')) == 10


def test_make_dataset_is_byte_identical(tmp_path):
    gen = GeneratorConfig(size=48, seed=5)
    make_dataset(3, gen, str(tmp_path / 'a'))
    make_dataset(3, gen, str(tmp_path / 'b'))
    a, b = collect_outputs(str(tmp_path / 'a')), collect_outputs(str(tmp_path / 'b'))
    assert a and a == b
    assert (tmp_path / 'a' / 'manifest.json').read_bytes() == (tmp_path / 'b' / 'manifest.json').read_bytes()


def test_make_dataset_records_recipe(tmp_path):
    manifest = make_dataset(2, GeneratorConfig(size=48, seed=5, corruption='complementary'), str(tmp_path))
    assert 'heavy smoke' in manifest['recipe']
    with open(tmp_path / 'manifest.json', encoding='utf-8') as f:
        assert json.load(f)['generator']['corruption'] == 'complementary'


def test_make_dataset_needs_frames(tmp_path):
    with pytest.raises(ValidationError):
        make_dataset(0, GeneratorConfig(size=48), str(tmp_path))


def test_split_fractions():
    splits = [split_of(f"frame_{i:05d}", 0) for i in range(3000)]
    assert splits == [split_of(f"frame_{i:05d}", 0) for i in range(3000)]
    assert abs(splits.count('train') / 3000 - 0.70) < 0.04
    assert abs(splits.count('val') / 3000 - 0.15) < 0.03
    assert splits != [split_of(f"frame_{i:05d}", 1) for i in range(3000)]


# ---------- strawman ----------

def test_threshold_detector_finds_bright_block():
    arr = np.full((32, 32), 0.1)
    arr[8:16, 4:20] = 0.9
    (det,) = threshold_detector(GrayImage(arr))
    assert (det.cx, det.cy, det.w, det.h) == (12.0, 12.0, 16.0, 8.0)
    assert det.score == pytest.approx(0.9)
    assert threshold_detector(GrayImage(arr), min_area=200) == []


def test_threshold_detector_sees_figure_in_clear_thermal():
    pair = render_pair(_scene())
    dets = threshold_detector(pair.thermal)
    assert max(iou(d, pair.gt_boxes[0]) for d in dets) > 0.5
