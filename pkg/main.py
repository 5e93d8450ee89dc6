"""FireSight command-line entry point.

    python main.py <subcommand> [--config run.ini] [--set key=value ...] [--key value ...]

Subcommands: calibrate, undistort, align, synth, train, detect, eval, bench,
replay. Every run writes ``run_manifest.json`` and ``events.log`` into its
output directory. Exit codes: 0 ok, 1 runtime/numerical/I-O failure,
2 usage or validation error.
"""
from __future__ import annotations
import os
import sys
import json
import argparse
from typing import Dict, List, Optional, Tuple

# Allow a portable .env next to the working directory; exported values win
for candidate in ('.env', '_.env'):
    if os.path.exists(candidate):
        try:
            with open(candidate, 'r', encoding='utf-8') as f:
                for line in f:
                    line = line.strip()
                    if not line or line.startswith('#') or '=' not in line:
                        continue
                    k, v = line.split('=', 1)
                    k, v = k.strip(), v.strip()
                    if k and k not in os.environ:
                        os.environ[k] = v
        except OSError:
            pass
        break

import numpy as np  # noqa: E402

import audit_logger  # noqa: E402
import config  # noqa: E402
from errors import FireSightError, ValidationError  # noqa: E402
from run_manifest import EVENT_LOG_NAME, PhaseTimer, finalize, read_manifest, verify_outputs  # noqa: E402

SUBCOMMANDS = ('calibrate', 'undistort', 'align', 'synth', 'train', 'detect', 'eval', 'bench')


def _say(sub: str, msg: str):
    print(f"[{sub}] {msg}")


def _require_file(cfg: config.RunConfig, key: str) -> str:
    path = cfg[key]
    if not path:
        raise ValidationError(f"{cfg.subcommand}: '{key}' is required")
    if not os.path.exists(path):
        raise ValidationError(f"{cfg.subcommand}: {key} not found: {path}")
    return path


def _out(cfg: config.RunConfig, *parts: str) -> str:
    return os.path.join(cfg['output'], *parts)


def _board(cfg: config.RunConfig):
    from calibration import ChessboardSpec
    return ChessboardSpec(cfg['rows'], cfg['cols'], cfg['square'])


# ---------- subcommands ----------
# Each returns (input paths, volatile output names).

def cmd_calibrate(cfg: config.RunConfig, timer: PhaseTimer) -> Tuple[List[str], List[str]]:
    from calibration import CalibrationOptions, calibrate, per_view_rms, read_corner_csv, save_calibration

    corners = _require_file(cfg, 'corners')
    spec = _board(cfg)
    observations = read_corner_csv(corners, spec)
    with timer.phase('calibrate'):
        result = calibrate(observations, spec, CalibrationOptions(cfg['max_iter'], cfg['two_pass']))
    save_calibration(result, _out(cfg, cfg['out_json']))
    k, d = result.intrinsics, result.distortion
    _say('calibrate', f"fx={k.fx:.4f} fy={k.fy:.4f} cx={k.cx:.4f} cy={k.cy:.4f}")
    _say('calibrate', f"k1={d.k1:.6f} k2={d.k2:.6f} k3={d.k3:.6f} p1={d.p1:.6f} p2={d.p2:.6f}")
    _say('calibrate', f"{'view':<16} rms px")
    for vid, rms in per_view_rms(result, observations, spec).items():
        _say('calibrate', f"{vid:<16} {rms:.4f}")
    _say('calibrate', f"overall rms {result.rms_reprojection:.4f} px over {len(observations)} views")
    return [corners], []


def cmd_undistort(cfg: config.RunConfig, timer: PhaseTimer) -> Tuple[List[str], List[str]]:
    from calibration import load_calibration
    from geometry import GrayImage, undistort_image

    image = _require_file(cfg, 'image')
    calib_path = _require_file(cfg, 'calibration')
    calib = load_calibration(calib_path)
    img = GrayImage.load(image)
    with timer.phase('undistort'):
        out = undistort_image(img, calib.intrinsics, calib.distortion)
    out.save(_out(cfg, cfg['out_image']))
    _say('undistort', f"wrote {_out(cfg, cfg['out_image'])}")
    return [image, calib_path], []


def _pick_view(ir_obs, th_obs, wanted: str):
    th_by_id = {o.view_id: o for o in th_obs}
    common = [o.view_id for o in ir_obs if o.view_id in th_by_id]
    if not common:
        raise ValidationError("IR and thermal corner files share no view id")
    vid = wanted or common[0]
    if vid not in common:
        raise ValidationError(f"view {vid} is not present in both corner files")
    ir_by_id = {o.view_id: o for o in ir_obs}
    return vid, ir_by_id, th_by_id, common


def cmd_align(cfg: config.RunConfig, timer: PhaseTimer) -> Tuple[List[str], List[str]]:
    from alignment import align_thermal_to_ir, checker_blend, crop_common, estimate_alignment, \
        outer_corner_correspondences
    from calibration import load_calibration, read_corner_csv, undistort_observations
    from geometry import GrayImage, transfer_errors, undistort_image, warp_coverage

    spec = _board(cfg)
    ir_cal_path = _require_file(cfg, 'ir_calibration')
    th_cal_path = _require_file(cfg, 'thermal_calibration')
    ir_csv = _require_file(cfg, 'ir_corners')
    th_csv = _require_file(cfg, 'thermal_corners')
    ir_cal, th_cal = load_calibration(ir_cal_path), load_calibration(th_cal_path)
    ir_obs = [undistort_observations(o, ir_cal) for o in read_corner_csv(ir_csv, spec)]
    th_obs = [undistort_observations(o, th_cal) for o in read_corner_csv(th_csv, spec)]
    vid, ir_by_id, th_by_id, common = _pick_view(ir_obs, th_obs, cfg['view'])

    with timer.phase('homography'):
        corrs = outer_corner_correspondences(ir_by_id[vid], th_by_id[vid], spec, cfg['all_corners'])
        h = estimate_alignment(corrs)
    os.makedirs(cfg['output'], exist_ok=True)
    h.save(_out(cfg, 'homography.txt'))

    # every corner of every shared view, mapped thermal -> IR
    errs = np.concatenate([transfer_errors(h, th_by_id[v].corners, ir_by_id[v].corners) for v in common])
    report = {'view': vid, 'views_checked': len(common), 'homography': h.matrix.tolist(),
              'corner_deviation_mean_px': float(errs.mean()), 'corner_deviation_max_px': float(errs.max())}
    _say('align', f"homography from view {vid} ({len(corrs.pairs)} pairs)")
    _say('align', f"corner deviation over {len(common)} views: mean {errs.mean():.4f} px, max {errs.max():.4f} px")

    inputs = [ir_cal_path, th_cal_path, ir_csv, th_csv]
    if cfg['ir_image'] or cfg['thermal_image']:
        ir_path = _require_file(cfg, 'ir_image')
        th_path = _require_file(cfg, 'thermal_image')
        inputs += [ir_path, th_path]
        with timer.phase('warp'):
            ir = undistort_image(GrayImage.load(ir_path), ir_cal.intrinsics, ir_cal.distortion)
            th = undistort_image(GrayImage.load(th_path), th_cal.intrinsics, th_cal.distortion)
            warped = align_thermal_to_ir(th, h, ir.size, cfg['fill'])
            mask = warp_coverage(th.width, th.height, h, ir.width, ir.height)
            pair = crop_common(ir, warped, mask)
        ir.save(_out(cfg, 'ir_undistorted.png'))
        th.save(_out(cfg, 'thermal_undistorted.png'))
        warped.save(_out(cfg, 'thermal_warped.png'))
        pair.ir.save(_out(cfg, 'ir_cropped.png'))
        pair.thermal_warped.save(_out(cfg, 'thermal_cropped.png'))
        checker_blend(ir, warped).save(_out(cfg, 'overlay.png'))
        report['crop'] = pair.crop.as_dict()
        _say('align', f"crop {pair.crop.w}x{pair.crop.h} at ({pair.crop.x}, {pair.crop.y})")
    with open(_out(cfg, 'alignment.json'), 'w', encoding='utf-8') as f:
        json.dump(report, f, indent=2, sort_keys=True)
    return inputs, []


def cmd_synth(cfg: config.RunConfig, timer: PhaseTimer) -> Tuple[List[str], List[str]]:
    from synthdata import GeneratorConfig, make_dataset

    gen = GeneratorConfig(size=cfg['size'], seed=cfg['seed'], corruption=cfg['corruption'],
                          noise_sigma=cfg['noise_sigma'], max_humans=cfg['max_humans'])
    with timer.phase('render'):
        manifest = make_dataset(cfg['frames'], gen, cfg['output'])
    counts = {k: len(v) for k, v in manifest['splits'].items()}
    _say('synth', f"{cfg['frames']} frames written to {cfg['output']} (splits {counts})")
    return [], []


def cmd_train(cfg: config.RunConfig, timer: PhaseTimer) -> Tuple[List[str], List[str]]:
    from detector import ModelConfig, TrainHyper, build_model, load_dataset, save_model, train, \
        write_loss_curve

    data = _require_file(cfg, 'data')
    model_cfg = ModelConfig(input_size=cfg['input_size'], width_multiplier=cfg['alpha'], mode=cfg['mode'],
                            activation=cfg['activation'], loc_loss=cfg['loc_loss'], dtype=cfg['dtype'])
    with timer.phase('load'):
        train_set = load_dataset(data, 'train', model_cfg.input_size)
        val_set = load_dataset(data, 'val', model_cfg.input_size)
    model = build_model(model_cfg, cfg['seed'])
    _say('train', f"{len(train_set)} train / {len(val_set)} val samples, "
                  f"{model.parameter_count} parameters, mode {model_cfg.mode}")
    hyper = TrainHyper(epochs=cfg['epochs'], batch=cfg['batch'], lr=cfg['lr'], seed=cfg['seed'],
                       eval_every=cfg['eval_every'], progress=cfg['progress'])
    with timer.phase('train'):
        result = train(model, train_set, hyper, val_set or None)
    save_model(result.model, _out(cfg, 'weights.fvw'))
    write_loss_curve(_out(cfg, 'loss_curve.csv'), result.history)
    with open(_out(cfg, 'train_history.json'), 'w', encoding='utf-8') as f:
        json.dump(result.history, f, indent=2, sort_keys=True)
    last = result.history[-1]
    msg = f"epoch {last['epoch']}/{hyper.epochs} loss={last['loss_total']:.4f}"
    if 'map50' in last:
        msg += f" val mAP@0.5={last['map50']:.4f} mAP@0.5:0.95={last['map50_95']:.4f}"
    _say('train', msg)
    return [data], []


def _frame_ids(root: str, split: str, limit: int = 0) -> List[str]:
    from evalkit import ground_truth_for_split

    ids = sorted(ground_truth_for_split(root, split))
    return ids[:limit] if limit > 0 else ids


def _run_detector(model, root: str, ids: List[str], conf: float, nms_iou: float):
    from alignment import read_labeled_frame
    from detector import infer_pair

    for fid in ids:
        frame = read_labeled_frame(root, fid)
        yield fid, frame, infer_pair(model, frame.pair.ir, frame.pair.thermal_warped, conf, nms_iou)


def cmd_detect(cfg: config.RunConfig, timer: PhaseTimer) -> Tuple[List[str], List[str]]:
    from detector import detections_to_json, draw_overlay, load_model, save_overlay

    weights = _require_file(cfg, 'weights')
    data = _require_file(cfg, 'data')
    model = load_model(weights)
    ids = _frame_ids(data, cfg['split'], cfg['limit'])
    os.makedirs(cfg['output'], exist_ok=True)
    total = 0
    with timer.phase('detect'), open(_out(cfg, 'detections.jsonl'), 'w', encoding='utf-8') as f:
        for fid, frame, dets in _run_detector(model, data, ids, cfg['conf'], cfg['nms_iou']):
            f.write(detections_to_json(fid, dets) + '\n')
            total += len(dets)
            if cfg['overlays']:
                save_overlay(_out(cfg, 'overlays', f"{fid}.png"), draw_overlay(frame.pair.ir, dets, frame.boxes))
    _say('detect', f"{total} detections over {len(ids)} frames (conf >= {cfg['conf']:g})")
    return [weights, data], []


def cmd_eval(cfg: config.RunConfig, timer: PhaseTimer) -> Tuple[List[str], List[str]]:
    from detector import load_model, read_detections_jsonl
    from evalkit import evaluate, format_report_table, ground_truth_for_split, write_report

    data = _require_file(cfg, 'data')
    gts = ground_truth_for_split(data, cfg['split'])
    if cfg['detections']:
        det_path = _require_file(cfg, 'detections')
        dets = read_detections_jsonl(det_path)
        inputs = [data, det_path]
    else:
        weights = _require_file(cfg, 'weights')
        model = load_model(weights)
        with timer.phase('detect'):
            dets = {fid: d for fid, _frame, d in _run_detector(model, data, sorted(gts),
                                                               config.MAP_CONF_THRESHOLD, cfg['nms_iou'])}
        inputs = [data, weights]
    with timer.phase('score'):
        report = evaluate(dets, gts, cfg['conf'])
    write_report(_out(cfg, 'report.json'), report, cfg.as_dict())
    table = format_report_table(report)
    with open(_out(cfg, 'report.txt'), 'w', encoding='utf-8') as f:
        f.write(table + '\n')
    print(table)
    return inputs, []


def cmd_bench(cfg: config.RunConfig, timer: PhaseTimer) -> Tuple[List[str], List[str]]:
    from detector import load_model
    from evalkit import bench_frames_from_dataset, fps_bench

    weights = _require_file(cfg, 'weights')
    data = _require_file(cfg, 'data')
    model = load_model(weights)
    frames = bench_frames_from_dataset(data, cfg['split'])
    if not frames:
        raise ValidationError(f"split {cfg['split']} has no frames to time")
    with timer.phase('bench'):
        result = fps_bench(model, frames, cfg['warmup'], cfg['measured'], cfg['runs'])
    os.makedirs(cfg['output'], exist_ok=True)
    with open(_out(cfg, 'bench.json'), 'w', encoding='utf-8') as f:
        json.dump(result.to_dict(), f, indent=2, sort_keys=True)
    _say('bench', f"{result.fps:.2f} FPS (median of {len(result.run_fps)} runs, "
                  f"input {result.input_size}) on {result.hardware}")
    return [weights, data], ['bench.json']


COMMANDS = {
    'calibrate': cmd_calibrate, 'undistort': cmd_undistort, 'align': cmd_align, 'synth': cmd_synth,
    'train': cmd_train, 'detect': cmd_detect, 'eval': cmd_eval, 'bench': cmd_bench,
}

HELP = {
    'calibrate': 'intrinsics + distortion from a chessboard corner CSV',
    'undistort': 'remove lens distortion from an 8-bit PNG',
    'align': 'thermal-to-IR homography, warped/cropped images and a checker overlay',
    'synth': 'render a synthetic paired IR/thermal dataset',
    'train': 'train the dual-stream detector',
    'detect': 'run a trained detector over a dataset split',
    'eval': 'Table-style metrics report (P/R/F1, avg IoU, mAP)',
    'bench': 'end-to-end FPS on this machine',
}


def run_subcommand(cfg: config.RunConfig) -> int:
    os.makedirs(cfg['output'], exist_ok=True)
    audit_logger.configure(os.path.join(cfg['output'], EVENT_LOG_NAME))
    audit_logger.rotate_if_needed()
    audit_logger.set_run_id(f"{cfg.subcommand}-{cfg['seed']}")
    audit_logger.log_event('run_started', {'subcommand': cfg.subcommand, 'config': cfg.as_dict()})
    timer = PhaseTimer()
    with timer.phase('total'):
        inputs, volatile = COMMANDS[cfg.subcommand](cfg, timer)
    finalize(cfg['output'], cfg.subcommand, cfg.as_dict(), inputs, timer, volatile)
    audit_logger.log_event('run_finished', {'subcommand': cfg.subcommand, 'timings': timer.timings})
    return 0


def cmd_replay(manifest_path: str, output: Optional[str]) -> int:
    manifest = read_manifest(manifest_path)
    if manifest.subcommand not in COMMANDS:
        raise ValidationError(f"manifest names unknown subcommand {manifest.subcommand!r}")
    values = dict(manifest.config)
    if output:
        values['output'] = output
    cfg = config.load_run_config(manifest.subcommand, overrides=values)
    run_subcommand(cfg)
    bad = verify_outputs(manifest, cfg['output'])
    if bad:
        _say('replay', f"{len(bad)} output(s) differ from the manifest: {', '.join(bad)}")
        audit_logger.log_event('replay_mismatch', {'files': bad})
        return 1
    _say('replay', f"{len(manifest.outputs)} output(s) reproduced")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=config.TOOL_NAME, description='IR/thermal fusion toolkit')
    parser.add_argument('--version', action='version', version=f"{config.TOOL_NAME} {config.TOOL_VERSION}")
    sub = parser.add_subparsers(dest='subcommand', required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=HELP[name], epilog=config.schema_help(name),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument('--config', help='INI file; the [%s] section is read' % name)
        p.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                       help='override one config key (repeatable)')
        for key in sorted(config.SCHEMAS[name]):
            p.add_argument('--' + key.replace('_', '-'), dest=key, default=None, metavar='VALUE',
                           help=config.SCHEMAS[name][key][2])
    p = sub.add_parser('replay', help='re-run a run manifest and compare outputs')
    p.add_argument('manifest', help='run_manifest.json or the run directory')
    p.add_argument('--output', default=None, help='write into this directory instead')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = args.subcommand
    try:
        if sub == 'replay':
            return cmd_replay(args.manifest, args.output)
        overrides: Dict[str, object] = config.parse_overrides(args.set)
        overrides.update({k: getattr(args, k) for k in config.SCHEMAS[sub] if getattr(args, k) is not None})
        cfg = config.load_run_config(sub, args.config, overrides)
        return run_subcommand(cfg)
    except ValidationError as e:
        return _fail(sub, e, 2)
    except FireSightError as e:
        return _fail(sub, e, e.exit_code)
    except OSError as e:
        return _fail(sub, e, 1)


def _fail(sub: str, err: Exception, code: int) -> int:
    print(f"[{sub}] error: {err}", file=sys.stderr)
    audit_logger.log_event('cli_error', {'subcommand': sub, 'type': type(err).__name__,
                                         'message': str(err), 'exit_code': code})
    return code


if __name__ == '__main__':
    sys.exit(main())
