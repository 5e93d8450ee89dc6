#!/usr/bin/env python3
"""Synthetic two-camera rig fixture for ``calibrate`` and ``align``.

Writes into --out:
  ir_corners.csv / thermal_corners.csv      corner observations, one view per pose
  ir_truth.json / thermal_truth.json        ground-truth calibration (calibration JSON format)
  rig.json                                  rig description incl. the true thermal->IR homography
  ir.png / thermal.png                      first board view seen by each camera

Usage:
  python scripts/make_rig_fixture.py --out fixtures/rig --views 12
  python main.py calibrate --corners fixtures/rig/ir_corners.csv --output runs/cal_ir
"""
from __future__ import annotations
import os
import sys
import json
import argparse
CURRENT_DIR = os.path.dirname(os.path.abspath(__file__))
ROOT_DIR = os.path.dirname(CURRENT_DIR)
if ROOT_DIR not in sys.path:
    sys.path.insert(0, ROOT_DIR)

try:
    import numpy as np
    from calibration import CalibrationResult, ChessboardSpec, CornerObservations, write_corner_csv
    from synthdata import RigSpec, board_poses, render_rig_views
except ModuleNotFoundError as e:  # pragma: no cover
    print("Error: run this script from the project root, e.g.:\n  python scripts/make_rig_fixture.py")
    print(f"Details: {e}")
    sys.exit(1)


def _noisy(observations, sigma: float, rng):
    if sigma <= 0:
        return list(observations)
    out = []
    for obs in observations:
        jitter = rng.normal(0.0, sigma, obs.corners.shape)
        out.append(CornerObservations(obs.view_id, np.clip(obs.corners + jitter, 0.0, None)))
    return out


def make_fixture(out: str, size: int = 320, views: int = 12, rows: int = 6, cols: int = 9,
                 square: float = 25.0, identity: bool = False, noise: float = 0.0, seed: int = 0) -> dict:
    spec = ChessboardSpec(rows, cols, square)
    rig = RigSpec.identity(size) if identity else RigSpec.default(size)
    poses = board_poses(spec, rig.ir, (size, size), views)
    rendered = render_rig_views(rig, spec, poses, (size, size))
    rng = np.random.default_rng(seed)
    os.makedirs(out, exist_ok=True)
    write_corner_csv(os.path.join(out, 'ir_corners.csv'), _noisy(rendered.ir_corners, noise, rng))
    write_corner_csv(os.path.join(out, 'thermal_corners.csv'), _noisy(rendered.thermal_corners, noise, rng))
    ids = tuple(o.view_id for o in rendered.ir_corners)
    truths = {
        'ir_truth.json': CalibrationResult(rig.ir, rig.ir_distortion, tuple(poses), 0.0, ids),
        'thermal_truth.json': CalibrationResult(rig.thermal, rig.thermal_distortion,
                                                tuple(rig.thermal_pose(p) for p in poses), 0.0, ids),
    }
    for name, truth in truths.items():
        with open(os.path.join(out, name), 'w', encoding='utf-8') as f:
            json.dump(truth.to_dict(), f, indent=2)
    with open(os.path.join(out, 'rig.json'), 'w', encoding='utf-8') as f:
        json.dump({'size': size, 'board': {'rows': rows, 'cols': cols, 'square': square},
                   'rig': rig.to_dict()}, f, indent=2, sort_keys=True)
    rendered.ir_images[0].save(os.path.join(out, 'ir.png'))
    rendered.thermal_images[0].save(os.path.join(out, 'thermal.png'))
    return {'views': views, 'size': size, 'identity': identity, 'noise': noise}


def main():
    parser = argparse.ArgumentParser(description="Write a synthetic IR/thermal rig fixture")
    parser.add_argument('--out', default='fixtures/rig', help='output directory')
    parser.add_argument('--size', type=int, default=320, help='square image size in pixels')
    parser.add_argument('--views', type=int, default=12, help='board poses')
    parser.add_argument('--rows', type=int, default=6, help='inner corner rows')
    parser.add_argument('--cols', type=int, default=9, help='inner corner columns')
    parser.add_argument('--square', type=float, default=25.0, help='square size (mm)')
    parser.add_argument('--identity', action='store_true', help='identical cameras, identity homography')
    parser.add_argument('--noise', type=float, default=0.0, help='Gaussian corner noise (px)')
    parser.add_argument('--seed', type=int, default=0, help='noise seed')
    args = parser.parse_args()
    summary = make_fixture(args.out, args.size, args.views, args.rows, args.cols, args.square,
                           args.identity, args.noise, args.seed)
    print(f"[fixture] wrote {summary['views']} views at {summary['size']}px to {args.out}")


if __name__ == '__main__':
    main()
