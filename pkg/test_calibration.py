import json

import numpy as np
import pytest

from calibration import (
    CalibrationOptions,
    CalibrationResult,
    ChessboardSpec,
    CornerObservations,
    calibrate,
    init_extrinsics,
    init_intrinsics_zhang,
    load_calibration,
    per_view_rms,
    planar_target_array,
    planar_target_points,
    read_corner_csv,
    refine_calibration,
    reprojection_rms,
    save_calibration,
    undistort_observations,
    view_homographies,
    write_corner_csv,
)
from errors import ArityError, DegenerateConfigurationError, ValidationError
from geometry import Distortion, Intrinsics, Pose, project_points
from synthdata import board_poses

SIZE = 320
BOARD = ChessboardSpec(6, 9, 25.0)
K_TRUE = Intrinsics(1.2 * SIZE, 1.2 * SIZE, 161.0, 158.5)
D_TRUE = Distortion(k1=-0.1, k2=0.03, p1=0.001, p2=-0.0007)


def _views(k=K_TRUE, d=D_TRUE, n=12, spec=BOARD, noise=0.0, seed=0):
    poses = board_poses(spec, k, (SIZE, SIZE), n)
    world = planar_target_array(spec)
    rng = np.random.default_rng(seed)
    out = []
    for i, pose in enumerate(poses):
        uv = project_points(world, pose, k, d)
        if noise:
            uv = uv + rng.normal(0.0, noise, uv.shape)
        out.append(CornerObservations(f"view{i:02d}", uv))
    return poses, out


# ---------- board ----------

def test_board_rejects_single_row():
    with pytest.raises(ValidationError):
        ChessboardSpec(1, 9, 25.0)


def test_board_rejects_non_positive_square():
    with pytest.raises(ValidationError):
        ChessboardSpec(6, 9, 0.0)


def test_board_points_row_major():
    pts = planar_target_points(BOARD)
    assert len(pts) == BOARD.corner_count == 54
    assert (pts[1].x_w, pts[1].y_w, pts[1].z_w) == (25.0, 0.0, 0.0)
    assert (pts[9].x_w, pts[9].y_w) == (0.0, 25.0)
    assert np.array_equal(planar_target_array(BOARD), np.array([[p.x_w, p.y_w, p.z_w] for p in pts]))


def test_outer_corners():
    assert BOARD.outer_corner_indices() == (0, 8, 45, 53)


def test_observations_reject_negative_coordinates():
    with pytest.raises(ValidationError):
        CornerObservations("v", np.array([[1.0, 2.0], [-0.5, 3.0]]))


# ---------- closed form ----------

def test_zhang_init_exact_without_distortion():
    _, obs = _views(d=Distortion())
    k = init_intrinsics_zhang(view_homographies(obs, BOARD))
    for got, want in zip((k.fx, k.fy, k.cx, k.cy), (K_TRUE.fx, K_TRUE.fy, K_TRUE.cx, K_TRUE.cy)):
        assert got == pytest.approx(want, rel=1e-4)


def test_zhang_init_needs_three_views():
    _, obs = _views(d=Distortion(), n=3)
    hs = view_homographies(obs, BOARD)
    with pytest.raises(ArityError):
        init_intrinsics_zhang(hs[:2])


def test_extrinsics_recover_pose():
    poses, obs = _views(d=Distortion(), n=4)
    for pose, h in zip(poses, view_homographies(obs, BOARD)):
        got = init_extrinsics(h, K_TRUE)
        assert np.allclose(got.R, pose.R, atol=1e-6)
        assert np.allclose(got.t, pose.t, rtol=1e-6)


# ---------- full pipeline ----------

def test_calibrate_recovers_noiseless_rig():
    _, obs = _views()
    result = calibrate(obs, BOARD)
    k, d = result.intrinsics, result.distortion
    for got, want in zip((k.fx, k.fy, k.cx, k.cy), (K_TRUE.fx, K_TRUE.fy, K_TRUE.cx, K_TRUE.cy)):
        assert got == pytest.approx(want, rel=5e-3)
    assert np.all(np.abs(d.as_array() - D_TRUE.as_array()) < 5e-3)
    assert result.rms_reprojection < 0.05
    assert result.view_ids == tuple(o.view_id for o in obs)


def test_calibrate_with_noise_reports_noise_level_rms():
    _, obs = _views(noise=0.2, seed=3)
    result = calibrate(obs, BOARD)
    assert 0.1 < result.rms_reprojection < 0.3
    assert result.intrinsics.fx == pytest.approx(K_TRUE.fx, rel=0.02)


def test_calibrate_single_pass():
    _, obs = _views()
    result = calibrate(obs, BOARD, CalibrationOptions(two_pass=False))
    assert result.rms_reprojection < 0.05


def test_calibrate_two_views_is_arity_error():
    _, obs = _views(n=12)
    with pytest.raises(ArityError):
        calibrate(obs[:2], BOARD)


def test_calibrate_identical_views_are_degenerate():
    _, obs = _views(n=3)
    with pytest.raises(DegenerateConfigurationError):
        calibrate([obs[0], obs[1], CornerObservations("copy", obs[0].corners)], BOARD)


def test_calibrate_needs_3x3_board():
    small = ChessboardSpec(2, 2, 25.0)
    _, obs = _views(spec=small, n=3, d=Distortion())
    with pytest.raises(ValidationError):
        calibrate(obs, small)


def test_calibrate_rejects_wrong_corner_count():
    _, obs = _views(n=3)
    short = CornerObservations("short", obs[2].corners[:-1])
    with pytest.raises(ValidationError, match="short"):
        calibrate([obs[0], obs[1], short], BOARD)


def _flat(result):
    k = result.intrinsics
    parts = [np.array([k.fx, k.fy, k.cx, k.cy, result.rms_reprojection]), result.distortion.as_array()]
    parts += [np.concatenate([p.R.ravel(), p.t]) for p in result.poses]
    return np.concatenate(parts)


def _intrinsic_error(result, k):
    got = result.intrinsics
    return abs(got.fx - k.fx) + abs(got.fy - k.fy) + abs(got.cx - k.cx) + abs(got.cy - k.cy)


def test_calibrate_is_bit_identical_on_repeat():
    _, obs = _views(noise=0.2, seed=4)
    a = calibrate(obs, BOARD)
    b = calibrate(obs, BOARD)
    assert np.array_equal(_flat(a), _flat(b))
    assert a.view_ids == b.view_ids


def test_two_cameras_calibrate_independently():
    k_th = Intrinsics(1.1 * SIZE, 1.1 * SIZE, 161.0, 158.5 - 2.5)
    d_th = Distortion(k1=-0.12, k2=0.03, p1=-0.001, p2=0.0008)
    _, ir_obs = _views()
    _, th_obs = _views(k=k_th, d=d_th)
    ir_alone = calibrate(ir_obs, BOARD)
    th = calibrate(th_obs, BOARD)
    ir_again = calibrate(ir_obs, BOARD)
    assert np.array_equal(_flat(ir_alone), _flat(ir_again))
    assert th.intrinsics.fx == pytest.approx(k_th.fx, rel=5e-3)
    assert ir_alone.intrinsics.fx == pytest.approx(K_TRUE.fx, rel=5e-3)
    assert np.all(np.abs(th.distortion.as_array() - d_th.as_array()) < 5e-3)


@pytest.mark.slow
def test_more_views_give_better_intrinsics():
    errors = {3: [], 12: []}
    for seed in range(10):
        for n in errors:
            _, obs = _views(n=n, noise=0.3, seed=seed)
            errors[n].append(_intrinsic_error(calibrate(obs, BOARD), K_TRUE))
    assert np.mean(errors[12]) < np.mean(errors[3])


def test_refinement_never_increases_rms():
    poses, obs = _views(noise=0.1)
    k0 = Intrinsics(K_TRUE.fx * 1.03, K_TRUE.fy * 0.98, K_TRUE.cx + 4, K_TRUE.cy - 3)
    init = CalibrationResult(k0, Distortion(), tuple(poses), 0.0, tuple(o.view_id for o in obs))
    init = CalibrationResult(k0, Distortion(), tuple(poses), reprojection_rms(init, obs, BOARD), init.view_ids)
    refined = refine_calibration(init, obs, BOARD, max_iter=50)
    assert refined.rms_reprojection <= init.rms_reprojection


def test_refinement_reports_computed_rms():
    poses, obs = _views(noise=0.2, seed=2)
    stale = CalibrationResult(K_TRUE, D_TRUE, tuple(poses), 0.0, tuple(o.view_id for o in obs))
    out = refine_calibration(stale, obs, BOARD, max_iter=0)
    assert out.rms_reprojection == pytest.approx(reprojection_rms(stale, obs, BOARD), rel=1e-9)
    assert out.rms_reprojection > 0.1


def test_refinement_keeps_frozen_parameter():
    _, obs = _views(n=6)
    first = calibrate(obs, BOARD, CalibrationOptions(two_pass=False, max_iter=5))
    pinned = CalibrationResult(first.intrinsics, Distortion(*first.distortion.as_array()[:2], 0.0,
                                                            *first.distortion.as_array()[3:]),
                               first.poses, first.rms_reprojection, first.view_ids)
    out = refine_calibration(pinned, obs, BOARD, max_iter=5, frozen=('k3',))
    assert out.distortion.k3 == 0.0


def test_refinement_rejects_unknown_frozen_name():
    _, obs = _views(n=3)
    result = calibrate(obs, BOARD, CalibrationOptions(max_iter=3))
    with pytest.raises(ValidationError):
        refine_calibration(result, obs, BOARD, frozen=('k9',))


def test_per_view_rms_matches_overall():
    _, obs = _views(noise=0.2, seed=1)
    result = calibrate(obs, BOARD)
    per_view = per_view_rms(result, obs, BOARD)
    assert list(per_view) == [o.view_id for o in obs]
    mean_sq = np.mean([v ** 2 for v in per_view.values()])
    assert np.sqrt(mean_sq) == pytest.approx(result.rms_reprojection, rel=1e-6)


def test_undistort_observations_matches_pinhole():
    poses, obs = _views(n=2)
    truth = CalibrationResult(K_TRUE, D_TRUE, tuple(poses), 0.0)
    pinhole = project_points(planar_target_array(BOARD), poses[0], K_TRUE, Distortion())
    got = undistort_observations(obs[0], truth)
    assert np.allclose(got.corners, pinhole, atol=1e-6)
    assert got.view_id == obs[0].view_id


# ---------- files ----------

def test_corner_csv_round_trip(tmp_path):
    _, obs = _views(n=3, noise=0.3)
    path = str(tmp_path / "corners.csv")
    write_corner_csv(path, obs)
    back = read_corner_csv(path, BOARD)
    assert [o.view_id for o in back] == [o.view_id for o in obs]
    for a, b in zip(back, obs):
        assert np.array_equal(a.corners, b.corners)


def test_corner_csv_reports_line_number(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("view_id,corner_index,u,v\nv0,0,1.0,2.0\nv0,1,abc,2.0\n", encoding="utf-8")
    with pytest.raises(ValidationError, match=":3:"):
        read_corner_csv(str(path))


def test_corner_csv_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("view,idx,x,y\n", encoding="utf-8")
    with pytest.raises(ValidationError, match=":1:"):
        read_corner_csv(str(path))


def test_corner_csv_duplicate_and_gap(tmp_path):
    dup = tmp_path / "dup.csv"
    dup.write_text("view_id,corner_index,u,v\nv0,0,1,2\nv0,0,1,2\n", encoding="utf-8")
    with pytest.raises(ValidationError, match="duplicate"):
        read_corner_csv(str(dup))
    gap = tmp_path / "gap.csv"
    gap.write_text("view_id,corner_index,u,v\nv0,0,1,2\nv0,2,1,2\n", encoding="utf-8")
    with pytest.raises(ValidationError, match="non-contiguous"):
        read_corner_csv(str(gap))


def test_corner_csv_wrong_count_for_board(tmp_path):
    path = tmp_path / "few.csv"
    path.write_text("view_id,corner_index,u,v\nv0,0,1,2\n", encoding="utf-8")
    with pytest.raises(ValidationError, match="board needs 54"):
        read_corner_csv(str(path), BOARD)


def test_corner_csv_missing_file(tmp_path):
    with pytest.raises(OSError):
        read_corner_csv(str(tmp_path / "nope.csv"))


def test_calibration_json_round_trip(tmp_path):
    poses, _ = _views(n=3)
    result = CalibrationResult(K_TRUE, D_TRUE, tuple(poses), 0.125, ("a", "b", "c"))
    path = str(tmp_path / "calib.json")
    save_calibration(result, path)
    back = load_calibration(path)
    assert back.intrinsics == K_TRUE
    assert back.distortion == D_TRUE
    assert back.view_ids == ("a", "b", "c")
    assert back.rms_reprojection == 0.125
    for p, q in zip(back.poses, poses):
        assert np.allclose(p.R, q.R, atol=1e-12)
        assert np.allclose(p.t, q.t, atol=1e-12)


def test_calibration_json_errors(tmp_path):
    with pytest.raises(OSError):
        load_calibration(str(tmp_path / "missing.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    with pytest.raises(ValidationError):
        load_calibration(str(broken))
    partial = tmp_path / "partial.json"
    partial.write_text(json.dumps({"fx": 1.0}), encoding="utf-8")
    with pytest.raises(ValidationError):
        load_calibration(str(partial))
    bad = dict.fromkeys(("fx", "fy", "cx", "cy", "k1", "k2", "k3", "p1", "p2", "rms"), 0.0)
    bad["fx"] = "abc"
    with pytest.raises(ValidationError, match="malformed"):
        CalibrationResult.from_dict(bad)


def test_result_rejects_mismatched_view_ids():
    with pytest.raises(ValidationError):
        CalibrationResult(K_TRUE, Distortion(), (Pose.identity(),), 0.0, ("a", "b"))
