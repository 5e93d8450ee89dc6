"""Detection metrics and the FPS harness.

Matching is greedy in descending score at a fixed IoU threshold. AP uses
all-point interpolation (precision envelope, area under the step curve).
Single class throughout, so mAP equals AP.
"""

from __future__ import annotations

import json
import os
import platform
import statistics
import time
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import config
from audit_logger import log_event
from boxes import Detection, GroundTruthBox, boxes_to_array, iou_matrix
from errors import ValidationError

MAP_THRESHOLDS = tuple(float(t) for t in np.round(0.5 + 0.05 * np.arange(10), 2))

FrameDets = Sequence[Detection]
FrameGts = Sequence[GroundTruthBox]


@dataclass(frozen=True)
class MatchResult:
    """Per-detection flags are in the caller's detection order."""
    det_tp: Tuple[bool, ...]
    det_gt: Tuple[int, ...]        # -1 when unmatched
    det_iou: Tuple[float, ...]     # IoU with the matched GT, 0 otherwise
    gt_matched: Tuple[bool, ...]

    @property
    def tp(self) -> int:
        return sum(self.det_tp)

    @property
    def fp(self) -> int:
        return len(self.det_tp) - self.tp

    @property
    def fn(self) -> int:
        return len(self.gt_matched) - sum(self.gt_matched)


@dataclass(frozen=True)
class APResult:
    ap: float
    n_gt: int
    n_det: int
    no_ground_truth: bool = False


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    avg_iou: float
    map_50: float
    map_50_95: float
    fps: Optional[float] = None
    conf_threshold: float = config.DEFAULT_CONF_THRESHOLD
    counts: Dict[str, int] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    hardware: Optional[str] = None

    def __post_init__(self):
        for name in ('precision', 'recall', 'f1', 'avg_iou', 'map_50', 'map_50_95'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} outside [0,1]: {value}")

    def to_dict(self) -> Dict:
        out = asdict(self)
        out['ap_interpolation'] = 'all-point'
        return out


def _sort_by_score(dets: FrameDets) -> np.ndarray:
    scores = np.array([d.score for d in dets], dtype=float)
    return np.argsort(-scores, kind='stable')


def match_detections(dets: FrameDets, gts: FrameGts, iou_thr: float = 0.5) -> MatchResult:
    """Greedy matching for one frame.

    Detections are visited by descending score (ties keep input order). Each
    takes the still-unmatched GT of highest IoU if that IoU reaches
    ``iou_thr``; equal IoUs go to the lower GT index.
    """
    n_det, n_gt = len(dets), len(gts)
    tp = [False] * n_det
    gt_of = [-1] * n_det
    ious = [0.0] * n_det
    taken = np.zeros(n_gt, dtype=bool)
    if n_det and n_gt:
        table = iou_matrix(boxes_to_array(dets), boxes_to_array(gts))
        for i in _sort_by_score(dets):
            row = np.where(taken, -1.0, table[i])
            j = int(np.argmax(row))
            if row[j] >= iou_thr and row[j] > 0:
                taken[j] = True
                tp[i], gt_of[i], ious[i] = True, j, float(row[j])
    return MatchResult(tuple(tp), tuple(gt_of), tuple(ious), tuple(bool(t) for t in taken))


def _as_frames(dets, gts) -> Tuple[List[FrameDets], List[FrameGts]]:
    """Accept one frame (flat lists) or a dataset (list of per-frame lists)."""
    def nested(x) -> bool:
        return len(x) > 0 and not isinstance(x[0], (Detection, GroundTruthBox))

    dets, gts = list(dets), list(gts)
    if nested(dets) or nested(gts):
        if len(dets) != len(gts):
            raise ValidationError(f"{len(dets)} detection frames vs {len(gts)} ground-truth frames")
        return [list(d) for d in dets], [list(g) for g in gts]
    return [dets], [gts]


def all_point_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the right-to-left running max of precision."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def ap_detail(dets, gts, iou_thr: float = 0.5) -> APResult:
    frames_d, frames_g = _as_frames(dets, gts)
    scores: List[float] = []
    flags: List[bool] = []
    for fd, fg in zip(frames_d, frames_g):
        m = match_detections(fd, fg, iou_thr)
        scores.extend(d.score for d in fd)
        flags.extend(m.det_tp)
    n_gt = sum(len(g) for g in frames_g)
    if n_gt == 0:
        return APResult(0.0, 0, len(scores), no_ground_truth=True)
    if not scores:
        return APResult(0.0, n_gt, 0)
    order = np.argsort(-np.asarray(scores), kind='stable')
    hits = np.asarray(flags, dtype=float)[order]
    cum_tp = np.cumsum(hits)
    cum_fp = np.cumsum(1.0 - hits)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    return APResult(min(1.0, all_point_ap(recall, precision)), n_gt, len(scores))


def average_precision(dets, gts, iou_thr: float = 0.5) -> float:
    return ap_detail(dets, gts, iou_thr).ap


def map_range(dets, gts, thresholds: Optional[Sequence[float]] = None) -> float:
    """Mean AP over IoU thresholds (0.50:0.05:0.95 by default)."""
    thresholds = MAP_THRESHOLDS if thresholds is None else tuple(thresholds)
    if not thresholds:
        raise ValidationError("map_range needs at least one IoU threshold")
    return float(np.mean([average_precision(dets, gts, t) for t in thresholds]))


def map_scores(dets_per_frame, gts_per_frame) -> Dict[str, float]:
    return {'map50': average_precision(dets_per_frame, gts_per_frame, 0.5),
            'map50_95': map_range(dets_per_frame, gts_per_frame)}


def summarize(dets, gts, conf_threshold: float = config.DEFAULT_CONF_THRESHOLD) -> EvalReport:
    """P/R/F1/avg-IoU at ``conf_threshold`` with IoU-0.5 matching; mAPs use every detection."""
    frames_d, frames_g = _as_frames(dets, gts)
    tp = fp = fn = 0
    matched_ious: List[float] = []
    for fd, fg in zip(frames_d, frames_g):
        kept = [d for d in fd if d.score >= conf_threshold]
        m = match_detections(kept, fg, 0.5)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
        matched_ious.extend(v for v, hit in zip(m.det_iou, m.det_tp) if hit)
    warnings: List[str] = []
    n_gt = tp + fn
    if n_gt == 0:
        warnings.append('no ground-truth boxes; recall and AP reported as 0')
    if tp + fp == 0:
        warnings.append(f'no detections at confidence >= {conf_threshold}; precision reported as 0')
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / n_gt if n_gt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    avg_iou = float(np.mean(matched_ious)) if matched_ious else 0.0
    scores = map_scores(frames_d, frames_g)
    return EvalReport(
        precision=precision, recall=recall, f1=f1, avg_iou=min(avg_iou, 1.0),
        map_50=scores['map50'], map_50_95=scores['map50_95'], conf_threshold=conf_threshold,
        counts={'frames': len(frames_d), 'detections': sum(len(d) for d in frames_d),
                'ground_truth': n_gt, 'tp': tp, 'fp': fp, 'fn': fn},
        warnings=warnings)


def ground_truth_for_split(root: str, split: str) -> Dict[str, List[GroundTruthBox]]:
    """GT boxes of a dataset split, keyed by frame id, in the aligned-frame coordinates."""
    from alignment import read_labeled_frame, split_frame_ids

    ids = split_frame_ids(root, split)
    return {fid: list(read_labeled_frame(root, fid).boxes) for fid in ids}


def evaluate(detections: Dict[str, List[Detection]], ground_truth: Dict[str, List[GroundTruthBox]],
             conf_threshold: float = config.DEFAULT_CONF_THRESHOLD) -> EvalReport:
    """Dataset-level report; frames missing from ``detections`` count as empty."""
    unknown = sorted(set(detections) - set(ground_truth))
    ids = sorted(ground_truth)
    report = summarize([detections.get(fid, []) for fid in ids], [ground_truth[fid] for fid in ids],
                       conf_threshold)
    if unknown:
        report.warnings.append(f'{len(unknown)} detection frame(s) without ground truth ignored')
    log_event('eval_done', {'frames': len(ids), 'map50': report.map_50, 'map50_95': report.map_50_95,
                            'precision': report.precision, 'recall': report.recall})
    return report


# ---------- reporting ----------

_TABLE_COLUMNS = ('Avg. IoU', 'Precision', 'Recall', 'F1-Score', 'mAP@0.50', 'mAP@0.5:0.95', 'FPS')


def format_report_table(report: EvalReport, label: str = 'fusion') -> str:
    header = (f"AP: all-point interpolation | P/R/F1 at confidence >= {report.conf_threshold:g}, "
              f"IoU 0.5")
    cells = [f"{100 * report.avg_iou:.2f} %", f"{report.precision:.2f}", f"{report.recall:.2f}",
             f"{report.f1:.2f}", f"{100 * report.map_50:.2f}", f"{100 * report.map_50_95:.2f}",
             '-' if report.fps is None else f"{report.fps:.1f}"]
    widths = [max(len(c), len(v)) for c, v in zip(_TABLE_COLUMNS, cells)]
    name_w = max(len('Model'), len(label))
    lines = [header,
             '  '.join(['Model'.ljust(name_w)] + [c.rjust(w) for c, w in zip(_TABLE_COLUMNS, widths)]),
             '  '.join([label.ljust(name_w)] + [v.rjust(w) for v, w in zip(cells, widths)])]
    if report.hardware:
        lines.append(f"hardware: {report.hardware}")
    lines.extend(f"warning: {w}" for w in report.warnings)
    return '\n'.join(lines)


def write_report(path: str, report: EvalReport, config_echo: Optional[Dict] = None):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    payload = report.to_dict()
    payload['config'] = config_echo or {}
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=True)


# ---------- FPS ----------

def hardware_descriptor() -> str:
    cpu = platform.processor() or platform.machine() or 'unknown-cpu'
    return (f"{cpu} | {os.cpu_count() or 0} logical cores | {platform.system()} {platform.release()} | "
            f"python {platform.python_version()} | numpy {np.__version__}")


@dataclass(frozen=True)
class BenchResult:
    fps: float
    run_fps: Tuple[float, ...]
    frames_per_run: int
    input_size: int
    hardware: str

    def to_dict(self) -> Dict:
        return asdict(self)


def fps_bench(model, frames: Sequence[Tuple], warmup: int = config.BENCH_WARMUP,
              measured: int = config.BENCH_MEASURED, runs: int = config.BENCH_RUNS,
              conf: float = config.DEFAULT_CONF_THRESHOLD) -> BenchResult:
    """Median-of-runs end-to-end FPS (letterbox, forward, decode, NMS).

    ``frames`` holds (ir, thermal) GrayImage pairs, cycled as needed. The
    timed loop runs in the calling thread.
    """
    from detector import infer_pair

    if not frames:
        raise ValidationError("fps_bench needs at least one frame pair")
    if warmup < 0 or measured < 1 or runs < 1:
        raise ValidationError(f"invalid bench counts warmup={warmup} measured={measured} runs={runs}")
    model.eval()
    for i in range(warmup):
        ir, th = frames[i % len(frames)]
        infer_pair(model, ir, th, conf)
    run_fps = []
    for _ in range(runs):
        start = time.perf_counter()
        for i in range(measured):
            ir, th = frames[i % len(frames)]
            infer_pair(model, ir, th, conf)
        elapsed = time.perf_counter() - start
        run_fps.append(measured / max(elapsed, 1e-9))
    result = BenchResult(fps=float(statistics.median(run_fps)), run_fps=tuple(run_fps),
                         frames_per_run=measured, input_size=model.config.input_size,
                         hardware=hardware_descriptor())
    log_event('bench_done', result.to_dict())
    return result


def bench_frames_from_dataset(root: str, split: str = 'test', limit: int = 16) -> List[Tuple]:
    from alignment import read_labeled_frame, split_frame_ids

    ids = list(ground_truth_for_split(root, split))[:limit]
    out = []
    for fid in ids:
        frame = read_labeled_frame(root, fid)
        out.append((frame.pair.ir, frame.pair.thermal_warped))
    return out

