#!/usr/bin/env python3
"""Train fusion, IR-only and thermal-only detectors identically and compare mAP@0.5.

Meant for a dataset written with ``--corruption complementary``, where each
single modality is blinded on half of the frames.

Usage:
  python main.py synth --corruption complementary --output runs/comp
  python scripts/compare_modalities.py --data runs/comp --epochs 30
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
    import config
    from detector import ModelConfig, TrainHyper, compare_modalities, load_dataset
    from errors import FireSightError
except ModuleNotFoundError as e:  # pragma: no cover
    print("Error: run this script from the project root, e.g.:\n  python scripts/compare_modalities.py --data runs/comp")
    print(f"Details: {e}")
    sys.exit(1)


def main():
    parser = argparse.ArgumentParser(description="Fusion vs single-modality mAP@0.5 on one dataset")
    parser.add_argument('--data', required=True, help='dataset root written by synth')
    parser.add_argument('--input-size', type=int, default=config.DEFAULT_INPUT_SIZE)
    parser.add_argument('--alpha', type=float, default=config.DEFAULT_WIDTH_MULTIPLIER)
    parser.add_argument('--epochs', type=int, default=config.DEFAULT_EPOCHS)
    parser.add_argument('--batch', type=int, default=config.DEFAULT_BATCH)
    parser.add_argument('--lr', type=float, default=config.DEFAULT_LR)
    parser.add_argument('--seed', type=int, default=config.DEFAULT_SEED)
    parser.add_argument('--split', default='val', help='split scored after training')
    parser.add_argument('--out', default='', help='optional JSON file for the scores')
    args = parser.parse_args()

    try:
        base = ModelConfig(input_size=args.input_size, width_multiplier=args.alpha)
        train_set = load_dataset(args.data, 'train', base.input_size)
        val_set = load_dataset(args.data, args.split, base.input_size)
        hyper = TrainHyper(epochs=args.epochs, batch=args.batch, lr=args.lr, seed=args.seed, progress=True)
        scores = compare_modalities(train_set, val_set, base, hyper)
    except (FireSightError, OSError) as e:
        print(f"[compare] error: {e}", file=sys.stderr)
        sys.exit(getattr(e, 'exit_code', 1))

    for mode, value in scores.items():
        print(f"[compare] {mode:<15} mAP@0.5 = {100 * value:.2f}")
    if args.out:
        with open(args.out, 'w', encoding='utf-8') as f:
            json.dump({'scores': scores, 'data': args.data, 'split': args.split,
                       'epochs': args.epochs, 'seed': args.seed}, f, indent=2, sort_keys=True)


if __name__ == '__main__':
    main()
