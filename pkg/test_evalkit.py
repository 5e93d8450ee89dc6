import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from audit_logger import read_events
from boxes import Detection, GroundTruthBox, iou
from detector import ModelConfig, build_model
from errors import ValidationError
from evalkit import (
    MAP_THRESHOLDS,
    EvalReport,
    all_point_ap,
    ap_detail,
    average_precision,
    evaluate,
    fps_bench,
    format_report_table,
    map_range,
    map_scores,
    match_detections,
    summarize,
    write_report,
)
from geometry import GrayImage

GT = GroundTruthBox(5.0, 5.0, 10.0, 10.0)


def _det(cx, cy, w, h, score):
    return Detection.scored(cx, cy, w, h, score)


def _random_instance(rng, max_boxes=20, n_frames=3):
    dets, gts = [], []
    for _ in range(n_frames):
        g = [GroundTruthBox(*rng.uniform(10, 40, 2), *rng.uniform(4, 12, 2))
             for _ in range(rng.integers(0, max_boxes // 2 + 1))]
        d = [Detection.scored(*rng.uniform(10, 40, 2), *rng.uniform(4, 12, 2), float(rng.uniform(0.01, 1.0)))
             for _ in range(rng.integers(0, max_boxes // 2 + 1))]
        dets.append(d)
        gts.append(g)
    return dets, gts


def _reference_match(dets, gts, thr):
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken = [False] * len(gts)
    hits = [False] * len(dets)
    for i in order:
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = iou(dets[i], g)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= thr and best > 0:
            taken[best_j] = True
            hits[i] = True
    return hits


def _reference_ap(dets_frames, gts_frames, thr):
    scored = []
    for d, g in zip(dets_frames, gts_frames):
        scored.extend(zip((x.score for x in d), _reference_match(d, g, thr)))
    n_gt = sum(len(g) for g in gts_frames)
    if n_gt == 0 or not scored:
        return 0.0
    scored.sort(key=lambda s: -s[0])
    tp = fp = 0
    points = []
    for _, hit in scored:
        tp += hit
        fp += not hit
        points.append((tp / n_gt, tp / (tp + fp)))
    ap, prev_r = 0.0, 0.0
    for r, _ in points:
        if r > prev_r:
            ap += (r - prev_r) * max(p for rr, p in points if rr >= r)
            prev_r = r
    return ap


# ---------- matching ----------

def test_iou_third_fixture():
    a = GroundTruthBox.from_corners(0, 0, 2, 2)
    d = _det(*GroundTruthBox.from_corners(1, 0, 3, 2).as_array(), 0.9)
    assert iou(a, d) == pytest.approx(1 / 3)
    m = match_detections([d], [a], iou_thr=0.3)
    assert m.det_tp == (True,) and m.det_iou[0] == pytest.approx(1 / 3)
    assert match_detections([d], [a], iou_thr=0.5).fn == 1


def test_higher_score_matches_first():
    weak = _det(5.0, 5.0, 10.0, 10.0, 0.4)
    strong = _det(6.0, 5.0, 10.0, 10.0, 0.8)
    m = match_detections([weak, strong], [GT])
    assert m.det_tp == (False, True)
    assert m.det_gt == (-1, 0)
    assert (m.tp, m.fp, m.fn) == (1, 1, 0)


def test_detection_takes_best_unmatched_gt():
    far = GroundTruthBox(30.0, 5.0, 10.0, 10.0)
    m = match_detections([_det(6.0, 5.0, 10.0, 10.0, 0.9), _det(29.0, 5.0, 10.0, 10.0, 0.8)], [far, GT])
    assert m.det_gt == (1, 0)
    assert m.gt_matched == (True, True)


def test_match_empty_inputs():
    assert match_detections([], [GT]).fn == 1
    assert match_detections([_det(5, 5, 2, 2, 0.5)], []).fp == 1


def test_matching_agrees_with_reference():
    rng = np.random.default_rng(7)
    for _ in range(200):
        dets, gts = _random_instance(rng, n_frames=1)
        thr = float(rng.choice(MAP_THRESHOLDS))
        assert list(match_detections(dets[0], gts[0], thr).det_tp) == _reference_match(dets[0], gts[0], thr)


# ---------- AP / mAP ----------

def test_false_positive_then_true_positive_gives_half():
    dets = [_det(40.0, 40.0, 10.0, 10.0, 0.9), _det(5.0, 5.0, 10.0, 10.0, 0.8)]
    assert average_precision(dets, [GT]) == 0.5


def test_all_point_envelope():
    assert all_point_ap(np.array([0.0, 1.0]), np.array([0.0, 0.5])) == 0.5
    assert all_point_ap(np.array([0.5, 0.5, 1.0]), np.array([1.0, 0.5, 2 / 3])) == pytest.approx(0.5 + 0.5 * 2 / 3)


def test_iou_point_six_gives_three_tenths():
    # overlap 7.5 px wide: 75 / 125 = 0.6
    det = _det(7.5, 5.0, 10.0, 10.0, 0.9)
    assert iou(det, GT) == pytest.approx(0.6)
    assert [average_precision([det], [GT], t) for t in MAP_THRESHOLDS[:4]] == [1.0, 1.0, 1.0, 0.0]
    assert map_range([det], [GT]) == pytest.approx(0.3)
    assert map_scores([[det]], [[GT]]) == pytest.approx({'map50': 1.0, 'map50_95': 0.3})


def test_ap_without_ground_truth():
    detail = ap_detail([_det(5, 5, 2, 2, 0.5)], [])
    assert detail.no_ground_truth and detail.ap == 0.0
    assert ap_detail([], [GT]).ap == 0.0


def test_ap_frame_count_mismatch():
    with pytest.raises(ValidationError):
        average_precision([[_det(5, 5, 2, 2, 0.5)]], [[GT], [GT]])


def test_map_range_needs_thresholds():
    with pytest.raises(ValidationError):
        map_range([], [GT], thresholds=[])


def test_ap_agrees_with_reference():
    rng = np.random.default_rng(11)
    for _ in range(200):
        dets, gts = _random_instance(rng)
        thr = float(rng.choice(MAP_THRESHOLDS))
        assert average_precision(dets, gts, thr) == pytest.approx(_reference_ap(dets, gts, thr), abs=1e-9)


@given(seed=st.integers(0, 10_000), power=st.floats(0.3, 3.0))
def test_ap_depends_only_on_score_order(seed, power):
    rng = np.random.default_rng(seed)
    dets, gts = _random_instance(rng, n_frames=2)
    warped = [[_det(d.cx, d.cy, d.w, d.h, d.score ** power) for d in frame] for frame in dets]
    assert average_precision(warped, gts) == pytest.approx(average_precision(dets, gts), abs=1e-12)


# ---------- summary ----------

def _three_of_four():
    gts = [GroundTruthBox(10.0 + 20 * i, 10.0, 8.0, 8.0) for i in range(4)]
    dets = [_det(10.0 + 20 * i, 10.0, 8.0, 8.0, 0.9 - 0.1 * i) for i in range(3)]
    dets.append(_det(10.0, 50.0, 8.0, 8.0, 0.5))
    return dets, gts


def test_three_tp_one_fp_one_miss():
    dets, gts = _three_of_four()
    report = summarize(dets, gts)
    assert report.precision == pytest.approx(0.75)
    assert report.recall == pytest.approx(0.75)
    assert report.f1 == pytest.approx(0.75)
    assert report.avg_iou == pytest.approx(1.0)
    assert report.counts == {'frames': 1, 'detections': 4, 'ground_truth': 4, 'tp': 3, 'fp': 1, 'fn': 1}


def test_confidence_above_one_keeps_nothing():
    dets, gts = _three_of_four()
    report = summarize(dets, gts, conf_threshold=1.0 + 1e-9)
    assert (report.precision, report.recall, report.f1) == (0.0, 0.0, 0.0)
    assert any('no detections' in w for w in report.warnings)
    assert report.map_50 == pytest.approx(0.75)


def test_confidence_threshold_is_inclusive():
    report = summarize([_det(5.0, 5.0, 10.0, 10.0, 0.25)], [GT], conf_threshold=0.25)
    assert report.counts['tp'] == 1


def test_report_rejects_out_of_range_values():
    with pytest.raises(ValidationError):
        EvalReport(1.2, 0.5, 0.5, 0.5, 0.5, 0.5)


def test_evaluate_counts_missing_frames_as_empty():
    gts = {'a': [GT], 'b': [GT]}
    report = evaluate({'a': [_det(5.0, 5.0, 10.0, 10.0, 0.9)], 'zzz': []}, gts)
    assert report.recall == pytest.approx(0.5)
    assert report.precision == pytest.approx(1.0)
    assert any('without ground truth' in w for w in report.warnings)
    assert read_events(event='eval_done')


def test_report_table_and_json(tmp_path):
    report = EvalReport(0.8, 0.7, 0.75, 0.625, 0.5, 0.3, fps=12.34, hardware='cpu-x')
    table = format_report_table(report, label='single_ir')
    lines = table.splitlines()
    assert 'all-point' in lines[0] and 'confidence >= 0.25' in lines[0]
    assert lines[1].split()[0] == 'Model'
    assert 'mAP@0.5:0.95' in lines[1]
    row = lines[2]
    assert row.startswith('single_ir')
    for cell in ('62.50 %', '0.80', '0.70', '0.75', '50.00', '30.00', '12.3'):
        assert cell in row
    assert 'hardware: cpu-x' in table
    assert format_report_table(EvalReport(0, 0, 0, 0, 0, 0)).splitlines()[2].endswith('-')

    path = str(tmp_path / 'out' / 'report.json')
    write_report(path, report, {'conf': 0.25})
    with open(path, encoding='utf-8') as f:
        payload = json.load(f)
    assert payload['ap_interpolation'] == 'all-point'
    assert payload['config'] == {'conf': 0.25}
    assert payload['map_50_95'] == 0.3


# ---------- FPS ----------

def test_fps_bench_on_tiny_model():
    model = build_model(ModelConfig(input_size=64, width_multiplier=0.125))
    frames = [(GrayImage.blank(64, 48, 0.3), GrayImage.blank(64, 48, 0.1))]
    result = fps_bench(model, frames, warmup=1, measured=2, runs=2)
    assert result.fps > 0
    assert len(result.run_fps) == 2
    assert result.frames_per_run == 2 and result.input_size == 64
    assert 'numpy' in result.hardware
    assert read_events(event='bench_done')


def test_fps_bench_errors():
    model = build_model(ModelConfig(input_size=64, width_multiplier=0.125))
    with pytest.raises(ValidationError):
        fps_bench(model, [])
    with pytest.raises(ValidationError):
        fps_bench(model, [(GrayImage.blank(8, 8), GrayImage.blank(8, 8))], measured=0)
