import json
import os

import numpy as np
import pytest

import main
from audit_logger import read_events
from boxes import Detection
from calibration import CornerObservations, load_calibration, write_corner_csv
from detector import detections_to_json
from evalkit import ground_truth_for_split
from run_manifest import MANIFEST_NAME, collect_outputs, read_manifest
from scripts.make_rig_fixture import make_fixture


@pytest.fixture(scope="module")
def rig_fixture(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("rig"))
    make_fixture(out, size=160, views=4)
    return out


def _synth(out, frames=3, size=48):
    return main.main(['synth', '--frames', str(frames), '--size', str(size), '--output', out])


# ---------- usage errors ----------

def test_missing_required_input_is_usage_error(tmp_path, capsys):
    assert main.main(['train', '--output', str(tmp_path)]) == 2
    assert "'data' is required" in capsys.readouterr().err


def test_unknown_override_is_usage_error(tmp_path, capsys):
    assert main.main(['synth', '--set', 'bogus=1', '--output', str(tmp_path)]) == 2
    assert 'bogus' in capsys.readouterr().err


def test_bad_value_is_usage_error(tmp_path):
    assert main.main(['synth', '--frames', 'many', '--output', str(tmp_path)]) == 2


def test_help_lists_schema_keys(capsys):
    with pytest.raises(SystemExit) as exc:
        main.main(['synth', '--help'])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert 'accepted keys' in out
    for key in ('frames', 'corruption', 'noise_sigma', 'seed'):
        assert key in out


def test_runtime_failure_exit_code(tmp_path, capsys):
    empty = tmp_path / 'empty'
    empty.mkdir()
    dets = tmp_path / 'dets.jsonl'
    dets.write_text('', encoding='utf-8')
    code = main.main(['eval', '--data', str(empty), '--detections', str(dets), '--output', str(tmp_path / 'o')])
    assert code == 1
    assert 'manifest' in capsys.readouterr().err


def test_degenerate_views_exit_one(tmp_path, rig_fixture):
    from calibration import read_corner_csv
    first = read_corner_csv(os.path.join(rig_fixture, 'ir_corners.csv'))[0]
    copies = [CornerObservations(f"dup{i}", first.corners) for i in range(3)]
    csv_path = str(tmp_path / 'dup.csv')
    write_corner_csv(csv_path, copies)
    assert main.main(['calibrate', '--corners', csv_path, '--output', str(tmp_path / 'o')]) == 1
    errors = read_events(os.path.join(str(tmp_path / 'o'), 'events.log'), event='cli_error')
    assert errors and errors[-1]['details']['exit_code'] == 1


# ---------- synth / replay ----------

def test_synth_writes_manifest_and_log(tmp_path):
    out = str(tmp_path / 'ds')
    assert _synth(out) == 0
    manifest = read_manifest(out)
    assert manifest.subcommand == 'synth'
    assert manifest.config['frames'] == 3
    assert 'manifest.json' in manifest.outputs
    assert 'total' in manifest.timings
    events = read_events(os.path.join(out, 'events.log'))
    assert [e['event'] for e in events][0] == 'run_started'
    assert events[-1]['event'] == 'run_finished'


def test_synth_twice_is_byte_identical(tmp_path):
    a, b = str(tmp_path / 'a'), str(tmp_path / 'b')
    assert _synth(a) == 0 and _synth(b) == 0
    assert collect_outputs(a) == collect_outputs(b)


def test_replay_reproduces_outputs(tmp_path, capsys):
    out = str(tmp_path / 'ds')
    assert _synth(out) == 0
    again = str(tmp_path / 'again')
    assert main.main(['replay', os.path.join(out, MANIFEST_NAME), '--output', again]) == 0
    assert 'reproduced' in capsys.readouterr().out


def test_replay_flags_changed_outputs(tmp_path):
    out = str(tmp_path / 'ds')
    assert _synth(out) == 0
    manifest_path = os.path.join(out, MANIFEST_NAME)
    with open(manifest_path, encoding='utf-8') as f:
        data = json.load(f)
    data['outputs']['manifest.json'] = '0' * 64
    with open(manifest_path, 'w', encoding='utf-8') as f:
        json.dump(data, f)
    assert main.main(['replay', manifest_path, '--output', str(tmp_path / 'again')]) == 1


def test_replay_without_manifest(tmp_path):
    assert main.main(['replay', str(tmp_path)]) == 2


# ---------- eval ----------

def test_eval_of_perfect_detections(tmp_path):
    data = str(tmp_path / 'ds')
    assert _synth(data, frames=4) == 0
    gts = ground_truth_for_split(data, 'all')
    assert sum(len(b) for b in gts.values()) > 0
    det_path = tmp_path / 'dets.jsonl'
    with open(det_path, 'w', encoding='utf-8') as f:
        for fid, boxes in gts.items():
            f.write(detections_to_json(fid, [Detection.scored(b.cx, b.cy, b.w, b.h, 1.0) for b in boxes]) + '\n')
    out = tmp_path / 'eval'
    code = main.main(['eval', '--data', data, '--detections', str(det_path), '--split', 'all',
                      '--output', str(out)])
    assert code == 0
    report = json.loads((out / 'report.json').read_text(encoding='utf-8'))
    assert report['map_50'] == pytest.approx(1.0)
    assert report['map_50_95'] == pytest.approx(1.0)
    assert report['precision'] == pytest.approx(1.0) and report['recall'] == pytest.approx(1.0)
    assert report['config']['split'] == 'all'
    assert 'mAP@0.50' in (out / 'report.txt').read_text(encoding='utf-8')


# ---------- calibrate / undistort / align ----------

def test_calibrate_recovers_fixture_intrinsics(tmp_path, rig_fixture, capsys):
    out = str(tmp_path / 'cal')
    assert main.main(['calibrate', '--corners', os.path.join(rig_fixture, 'ir_corners.csv'), '--output', out]) == 0
    got = load_calibration(os.path.join(out, 'calibration.json'))
    truth = load_calibration(os.path.join(rig_fixture, 'ir_truth.json'))
    assert got.intrinsics.fx == pytest.approx(truth.intrinsics.fx, rel=1e-2)
    assert got.intrinsics.cx == pytest.approx(truth.intrinsics.cx, abs=1.0)
    assert got.rms_reprojection < 0.05
    printed = capsys.readouterr().out
    assert '[calibrate] overall rms' in printed
    assert 'view00' in printed


def test_undistort_keeps_size(tmp_path, rig_fixture):
    out = tmp_path / 'und'
    code = main.main(['undistort', '--image', os.path.join(rig_fixture, 'ir.png'),
                      '--calibration', os.path.join(rig_fixture, 'ir_truth.json'), '--output', str(out)])
    assert code == 0
    from geometry import GrayImage
    assert GrayImage.load(str(out / 'undistorted.png')).size == (160, 160)


def test_align_with_true_calibrations(tmp_path, rig_fixture):
    out = tmp_path / 'align'
    fx = lambda name: os.path.join(rig_fixture, name)  # noqa: E731
    code = main.main(['align', '--ir-corners', fx('ir_corners.csv'), '--thermal-corners', fx('thermal_corners.csv'),
                      '--ir-calibration', fx('ir_truth.json'), '--thermal-calibration', fx('thermal_truth.json'),
                      '--ir-image', fx('ir.png'), '--thermal-image', fx('thermal.png'), '--output', str(out)])
    assert code == 0
    report = json.loads((out / 'alignment.json').read_text(encoding='utf-8'))
    assert report['views_checked'] == 4
    assert report['corner_deviation_max_px'] < 1e-3
    with open(fx('rig.json'), encoding='utf-8') as f:
        truth = np.array(json.load(f)['rig']['homography_thermal_to_ir'])
    got = np.array(report['homography'])
    assert np.allclose(got / got[2, 2], truth / truth[2, 2], atol=1e-6)
    for name in ('homography.txt', 'overlay.png', 'ir_cropped.png', 'thermal_cropped.png'):
        assert (out / name).exists()
    assert report['crop']['w'] > 0


def test_align_needs_both_images(tmp_path, rig_fixture):
    fx = lambda name: os.path.join(rig_fixture, name)  # noqa: E731
    code = main.main(['align', '--ir-corners', fx('ir_corners.csv'), '--thermal-corners', fx('thermal_corners.csv'),
                      '--ir-calibration', fx('ir_truth.json'), '--thermal-calibration', fx('thermal_truth.json'),
                      '--ir-image', fx('ir.png'), '--output', str(tmp_path / 'o')])
    assert code == 2


# ---------- malformed inputs ----------

def test_non_numeric_calibration_field_is_usage_error(tmp_path, rig_fixture):
    with open(os.path.join(rig_fixture, 'ir_truth.json'), encoding='utf-8') as f:
        data = json.load(f)
    data['fx'] = 'abc'
    cal = tmp_path / 'cal.json'
    cal.write_text(json.dumps(data), encoding='utf-8')
    out = str(tmp_path / 'und')
    code = main.main(['undistort', '--image', os.path.join(rig_fixture, 'ir.png'),
                      '--calibration', str(cal), '--output', out])
    assert code == 2
    errors = read_events(os.path.join(out, 'events.log'), event='cli_error')
    assert errors and errors[-1]['details']['type'] == 'ValidationError'


def test_corrupt_dataset_manifest_is_usage_error(tmp_path, capsys):
    data = str(tmp_path / 'ds')
    assert _synth(data) == 0
    with open(os.path.join(data, 'manifest.json'), 'w', encoding='utf-8') as f:
        f.write('{"splits": ')
    dets = tmp_path / 'dets.jsonl'
    dets.write_text('', encoding='utf-8')
    code = main.main(['eval', '--data', data, '--detections', str(dets), '--output', str(tmp_path / 'o')])
    assert code == 2
    assert 'invalid JSON' in capsys.readouterr().err
