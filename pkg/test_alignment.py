import numpy as np
import pytest

from alignment import (
    AlignedPair,
    CorrespondenceSet,
    CropRect,
    LabeledFrame,
    align_frame,
    align_thermal_to_ir,
    checker_blend,
    crop_common,
    estimate_alignment,
    frame_paths,
    outer_corner_correspondences,
    propagate_labels,
    read_label_file,
    read_labeled_frame,
    split_frame_ids,
    write_label_file,
    write_labeled_frame,
)
from audit_logger import read_events
from boxes import GroundTruthBox
from calibration import ChessboardSpec, CornerObservations, planar_target_array
from errors import NoOverlapError, ShapeMismatchError, ValidationError
from geometry import (
    Distortion,
    GrayImage,
    Homography,
    PixelPoint,
    apply_homography_points,
    project_points,
    warp_coverage,
)
from synthdata import RigSpec, board_poses

W, H = 64, 48
BOARD = ChessboardSpec(6, 9, 25.0)


def _random_image(seed=0, w=W, h=H):
    return GrayImage(np.random.default_rng(seed).uniform(0.0, 1.0, (h, w)))


def _rig_corners(rig, size=320, n=1):
    world = planar_target_array(BOARD)
    out = []
    for i, pose in enumerate(board_poses(BOARD, rig.ir, (size, size), n)):
        ir = project_points(world, pose, rig.ir, Distortion())
        th = project_points(world, rig.thermal_pose(pose), rig.thermal, Distortion())
        out.append((CornerObservations(f"v{i}", ir), CornerObservations(f"v{i}", th)))
    return out


# ---------- correspondences ----------

def test_correspondences_need_four_pairs():
    p = PixelPoint(1.0, 1.0)
    with pytest.raises(ValidationError):
        CorrespondenceSet(((p, p),) * 3)


def test_outer_corners_are_paired_in_order():
    (ir, th), = _rig_corners(RigSpec.default(320))
    corrs = outer_corner_correspondences(ir, th, BOARD)
    idx = list(BOARD.outer_corner_indices())
    assert np.array_equal(corrs.ir, ir.corners[idx])
    assert np.array_equal(corrs.thermal, th.corners[idx])
    every = outer_corner_correspondences(ir, th, BOARD, all_corners=True)
    assert len(every.pairs) == BOARD.corner_count


def test_correspondences_reject_wrong_corner_count():
    (ir, th), = _rig_corners(RigSpec.default(320))
    with pytest.raises(ValidationError, match="thermal"):
        outer_corner_correspondences(ir, CornerObservations("v0", th.corners[:10]), BOARD)


def test_check_bounds():
    pts = ((PixelPoint(0, 0), PixelPoint(0, 0)), (PixelPoint(10, 0), PixelPoint(10, 0)),
           (PixelPoint(10, 10), PixelPoint(10, 10)), (PixelPoint(0, 10), PixelPoint(12, 10)))
    corrs = CorrespondenceSet(pts)
    corrs.check_bounds((11, 11), (13, 11))
    with pytest.raises(ValidationError, match="thermal"):
        corrs.check_bounds((11, 11), (11, 11))


@pytest.mark.parametrize("all_corners", [False, True])
def test_rig_homography_recovered(all_corners):
    rig = RigSpec.default(320)
    (ir, th), = _rig_corners(rig)
    h = estimate_alignment(outer_corner_correspondences(ir, th, BOARD, all_corners))
    assert h.distance(rig.homography) < 1e-6
    mapped = apply_homography_points(h, th.corners)
    assert np.max(np.linalg.norm(mapped - ir.corners, axis=1)) < 1e-4
    assert read_events(event="homography_estimated")


def test_identical_cameras_give_identity():
    (ir, th), = _rig_corners(RigSpec.identity(320))
    h = estimate_alignment(outer_corner_correspondences(ir, th, BOARD))
    assert h.distance(Homography.identity()) < 1e-9


# ---------- warp and crop ----------

def test_identity_warp_keeps_image():
    img = _random_image()
    out = align_thermal_to_ir(img, Homography.identity(), img.size)
    assert np.allclose(out.pixels, img.pixels, atol=1e-12)


def test_full_coverage_crops_nothing():
    ir, th = _random_image(1), _random_image(2)
    pair = crop_common(ir, th, np.ones((H, W), dtype=bool))
    assert pair.crop == CropRect(0, 0, W, H)
    assert np.array_equal(pair.ir.pixels, ir.pixels)


def test_translation_crop_is_covered_region():
    ir, th = _random_image(1), _random_image(2)
    h = Homography.translation(10, 5)
    warped = align_thermal_to_ir(th, h, ir.size)
    mask = warp_coverage(W, H, h, W, H)
    pair = crop_common(ir, warped, mask)
    assert pair.crop == CropRect(10, 5, W - 10, H - 5)
    assert np.allclose(pair.thermal_warped.pixels, th.pixels[:H - 5, :W - 10], atol=1e-12)
    assert np.array_equal(pair.ir.pixels, ir.pixels[5:, 10:])
    assert pair.size == (W - 10, H - 5)


def test_crop_stays_inside_mask():
    mask = np.zeros((H, W), dtype=bool)
    mask[4:40, 6:30] = True
    mask[10:20, 30:50] = True
    pair = crop_common(_random_image(1), _random_image(2), mask)
    c = pair.crop
    assert mask[c.y:c.y + c.h, c.x:c.x + c.w].all()
    assert c.w * c.h >= 24 * 36 // 2


def test_crop_without_overlap():
    with pytest.raises(NoOverlapError):
        crop_common(_random_image(1), _random_image(2), np.zeros((H, W), dtype=bool))


def test_crop_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        crop_common(_random_image(1), _random_image(2, w=W + 1), np.ones((H, W), dtype=bool))
    with pytest.raises(ShapeMismatchError):
        crop_common(_random_image(1), _random_image(2), np.ones((H, W + 1), dtype=bool))


def test_far_translation_has_no_overlap():
    img = _random_image()
    with pytest.raises(NoOverlapError):
        align_frame(img, img, Homography.translation(W + 5, 0), [])


# ---------- labels ----------

CROP = CropRect(10, 5, 54, 43)


def test_inside_box_is_shifted():
    out = propagate_labels([GroundTruthBox(30, 20, 10, 8)], CROP)
    assert out == [GroundTruthBox(20, 15, 10, 8)]


def test_partial_box_is_clipped():
    out = propagate_labels([GroundTruthBox(10, 15, 20, 10)], CROP)
    assert out == [GroundTruthBox.from_corners(0, 5, 10, 15)]


def test_box_keeping_a_fifth_is_dropped():
    assert propagate_labels([GroundTruthBox(7, 20, 10, 10)], CROP) == []
    kept = propagate_labels([GroundTruthBox(8, 20, 10, 10)], CROP)
    assert len(kept) == 1 and kept[0].w == pytest.approx(3.0)


def test_box_outside_crop_is_dropped():
    assert propagate_labels([GroundTruthBox(2, 2, 3, 3)], CROP) == []


def test_align_frame_end_to_end():
    ir, th = _random_image(3), _random_image(4)
    frame = align_frame(ir, th, Homography.translation(10, 5), [GroundTruthBox(30, 20, 10, 8)])
    assert frame.pair.crop == CropRect(10, 5, W - 10, H - 5)
    assert frame.boxes == (GroundTruthBox(20, 15, 10, 8),)


def test_labeled_frame_rejects_box_outside():
    pair = AlignedPair(_random_image(1, 20, 20), _random_image(2, 20, 20), CropRect(0, 0, 20, 20))
    with pytest.raises(ValidationError):
        LabeledFrame(pair, (GroundTruthBox(18, 10, 6, 4),))


def test_aligned_pair_checks_sizes():
    with pytest.raises(ShapeMismatchError):
        AlignedPair(_random_image(1, 20, 20), _random_image(2, 20, 21), CropRect(0, 0, 20, 20))


def test_checker_blend_tiles():
    a, b = GrayImage.blank(16, 8, 0.0), GrayImage.blank(16, 8, 1.0)
    out = checker_blend(a, b, tile=4).pixels
    assert out[0, 0] == 0.0 and out[0, 4] == 1.0 and out[4, 0] == 1.0 and out[4, 4] == 0.0
    with pytest.raises(ShapeMismatchError):
        checker_blend(a, GrayImage.blank(8, 8))


# ---------- dataset files ----------

def test_label_file_round_trip(tmp_path):
    boxes = [GroundTruthBox(20.5, 10.25, 8.0, 16.0), GroundTruthBox(3.0, 4.0, 2.0, 2.0)]
    path = str(tmp_path / "labels" / "f.txt")
    write_label_file(path, boxes, 40, 30)
    back = read_label_file(path, 40, 30)
    for a, b in zip(back, boxes):
        assert np.allclose(a.as_array(), b.as_array(), atol=1e-7)


@pytest.mark.parametrize("line, message", [
    ("0 0.5 0.5 0.1", "expected"),
    ("1 0.5 0.5 0.1 0.1", "class 0"),
    ("0 0.5 1.5 0.1 0.1", r"\[0,1\]"),
    ("0 0.5 x 0.1 0.1", ":2:"),
])
def test_label_file_errors(tmp_path, line, message):
    path = tmp_path / "f.txt"
    path.write_text("0 0.5 0.5 0.1 0.1\n" + line + "\n", encoding="utf-8")
    with pytest.raises(ValidationError, match=message):
        read_label_file(str(path), 10, 10)


def test_missing_label_file(tmp_path):
    with pytest.raises(OSError):
        read_label_file(str(tmp_path / "none.txt"), 10, 10)


def test_labeled_frame_round_trip(tmp_path):
    frame = align_frame(_random_image(5), _random_image(6), Homography.translation(10, 5),
                        [GroundTruthBox(30, 20, 10, 8)])
    root = str(tmp_path)
    write_labeled_frame(root, "frame_00000", frame)
    for p in frame_paths(root, "frame_00000"):
        assert (tmp_path / p).exists()
    back = read_labeled_frame(root, "frame_00000")
    assert back.pair.size == frame.pair.size
    assert np.max(np.abs(back.pair.ir.pixels - frame.pair.ir.pixels)) <= 0.5 / 255 + 1e-12
    assert np.allclose(back.boxes[0].as_array(), frame.boxes[0].as_array(), atol=1e-6)


def _manifest(tmp_path, text):
    (tmp_path / "manifest.json").write_text(text, encoding="utf-8")
    return str(tmp_path)


def test_split_frame_ids(tmp_path):
    root = _manifest(tmp_path, '{"splits": {"train": ["a", "b"], "val": ["c"], "test": []}}')
    assert split_frame_ids(root, "train") == ["a", "b"]
    assert split_frame_ids(root, "all") == ["a", "b", "c"]
    with pytest.raises(ValidationError, match="unknown split"):
        split_frame_ids(root, "holdout")


@pytest.mark.parametrize("text, message", [
    ('{"splits": ', "invalid JSON"),
    ('{"splits": ["a"]}', "splits"),
    ('[1, 2]', "splits"),
])
def test_split_frame_ids_rejects_bad_manifest(tmp_path, text, message):
    with pytest.raises(ValidationError, match=message):
        split_frame_ids(_manifest(tmp_path, text), "train")


def test_split_frame_ids_missing_manifest(tmp_path):
    with pytest.raises(OSError):
        split_frame_ids(str(tmp_path), "train")
