"""Detection metrics: PSDS (intersection-based, multi-operating-point) and
1-second segment-based F-score / precision / recall.

Conventions, fixed here and exercised by the test suite:

* Intersection fractions (DTC/GTC/CTTC) are geometric: a detection's overlap
  is measured against the *union* of the opposing intervals, so fractions
  never exceed 1. Comparisons use >=.
* Per class c: TPR = TP / #refs(c); FPR = #FP / dataset-duration-in-hours;
  cross-trigger rates use the same per-hour normalization. Effective FPR is
  FPR + alpha_ct * mean over the other evaluated classes of the CT rate.
* Classes with no reference events are excluded from the ROC mean/std.
* Per class, the ROC is the running maximum of TPR over increasing eFPR
  (a right-continuous staircase starting at 0). The PSD-ROC is
  max(0, mean - alpha_st * population-std) across classes, evaluated on the
  union of all per-class eFPR breakpoints and integrated over [0, e_max];
  PSDS is that area divided by e_max.
* Zero-denominator conventions: precision with no detections is 0, recall
  with no references is 0, F is 0 when P + R = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import median_filter


@dataclass(frozen=True, order=True)
class Event:
    clip_id: str
    label: str
    onset: float
    offset: float

    def __post_init__(self):
        if not self.onset < self.offset:
            raise ValueError(
                f"event {self.label}@{self.clip_id}: onset {self.onset} must precede "
                f"offset {self.offset}")

    @property
    def duration(self) -> float:
        return self.offset - self.onset


def write_events_tsv(path, events: list[Event]) -> None:
    """Tab-separated: clip_id, onset, offset, label. Six decimals, no header."""
    with open(path, "w", encoding="utf-8") as f:
        for e in events:
            f.write(f"{e.clip_id}\t{e.onset:.6f}\t{e.offset:.6f}\t{e.label}\n")


def read_events_tsv(path) -> list[Event]:
    events = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            clip_id, onset, offset, label = line.rstrip("\n").split("\t")
            events.append(Event(clip_id, label, float(onset), float(offset)))
    return events


DEFAULT_THRESHOLDS = tuple(np.linspace(0.01, 0.99, 50))


@dataclass(frozen=True)
class PsdsParams:
    dtc: float = 0.7
    gtc: float = 0.7
    cttc: float = 0.3
    alpha_ct: float = 0.0
    alpha_st: float = 0.0
    e_max: float = 100.0
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS

    def __post_init__(self):
        for name in ("dtc", "gtc", "cttc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0,1], got {v}")
        if self.alpha_ct < 0 or self.alpha_st < 0:
            raise ValueError("alpha_ct and alpha_st must be non-negative")
        if self.e_max <= 0:
            raise ValueError(f"e_max must be positive, got {self.e_max}")
        t = np.asarray(self.thresholds)
        if len(t) == 0 or not ((t > 0) & (t < 1)).all() or not (np.diff(t) > 0).all():
            raise ValueError("thresholds must be strictly increasing within (0,1)")


def psds1_star(**overrides) -> PsdsParams:
    """Timing-sensitive preset: dtc=gtc=0.7, no cross-trigger cost, alpha_st=0."""
    return PsdsParams(**{**dict(dtc=0.7, gtc=0.7, cttc=0.3, alpha_ct=0.0, alpha_st=0.0),
                         **overrides})


def psds2_star(**overrides) -> PsdsParams:
    """Confusion-sensitive preset: dtc=gtc=0.1, cttc=0.3, alpha_ct=0.5, alpha_st=0."""
    return PsdsParams(**{**dict(dtc=0.1, gtc=0.1, cttc=0.3, alpha_ct=0.5, alpha_st=0.0),
                         **overrides})


METRIC_PRESETS = {"psds1_star": psds1_star, "psds2_star": psds2_star}


# ---------------------------------------------------------------------------
# binarization
# ---------------------------------------------------------------------------

def binarize_to_events(probs: np.ndarray, threshold: float, frame_rate: float,
                       class_names: list[str], clip_id: str,
                       median_filter_frames: int = 3) -> list[Event]:
    """Threshold frame probabilities into events.

    Maximal runs of frames >= threshold become events; onset is the first
    frame index / frame_rate and offset is (last + 1) / frame_rate. A median
    filter (window `median_filter_frames`, edge-replicated) smooths each
    class track first; pass 0 or 1 to disable.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != len(class_names):
        raise ValueError(f"probs shape {probs.shape} does not match {len(class_names)} classes")
    if median_filter_frames and median_filter_frames > 1:
        probs = median_filter(probs, size=(median_filter_frames, 1), mode="nearest")
    events = []
    active = probs >= threshold
    for c, name in enumerate(class_names):
        col = active[:, c]
        edges = np.flatnonzero(np.diff(np.concatenate(([False], col, [False]))))
        for start, stop in edges.reshape(-1, 2):
            events.append(Event(clip_id, name, start / frame_rate, stop / frame_rate))
    return events


# ---------------------------------------------------------------------------
# segment-based metrics
# ---------------------------------------------------------------------------

@dataclass
class SegmentScores:
    f: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = 100.0 * tp / (tp + fp) if tp + fp else 0.0
    r = 100.0 * tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return f, p, r


def segment_metrics(refs: list[Event], dets: list[Event],
                    clip_durations: dict[str, float],
                    segment: float = 1.0) -> SegmentScores:
    """Micro-averaged segment P/R/F over (segment, class) pairs, scores x100.

    Each clip is tiled into `segment`-second segments (the last partial one
    included); a (segment, class) is active when any event overlaps it with
    positive length.
    """
    for e in refs + dets:
        if e.clip_id not in clip_durations:
            raise ValueError(f"event references unknown clip_id {e.clip_id!r}")

    def activity(events: list[Event]) -> set[tuple[str, int, str]]:
        act = set()
        for e in events:
            n_seg = int(np.ceil(clip_durations[e.clip_id] / segment))
            first = int(np.floor(e.onset / segment))
            last = int(np.ceil(e.offset / segment))
            for s in range(max(0, first), min(n_seg, last)):
                lo, hi = s * segment, (s + 1) * segment
                if min(e.offset, hi) - max(e.onset, lo) > 0:
                    act.add((e.clip_id, s, e.label))
        return act

    ref_act, det_act = activity(refs), activity(dets)
    tp = len(ref_act & det_act)
    fp = len(det_act - ref_act)
    fn = len(ref_act - det_act)
    f, p, r = _prf(tp, fp, fn)

    per_class: dict[str, dict[str, float]] = {}
    for label in sorted({a[2] for a in ref_act | det_act}):
        rc = {a for a in ref_act if a[2] == label}
        dc = {a for a in det_act if a[2] == label}
        ctp, cfp, cfn = len(rc & dc), len(dc - rc), len(rc - dc)
        cf, cp, cr = _prf(ctp, cfp, cfn)
        per_class[label] = {"f": cf, "precision": cp, "recall": cr,
                            "tp": ctp, "fp": cfp, "fn": cfn}
    return SegmentScores(f, p, r, tp, fp, fn, per_class)


# ---------------------------------------------------------------------------
# PSDS
# ---------------------------------------------------------------------------

def _union_intervals(intervals: list[tuple[float, float]]) -> list[tuple[float, float]]:
    if not intervals:
        return []
    merged = []
    for lo, hi in sorted(intervals):
        if merged and lo <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
        else:
            merged.append((lo, hi))
    return merged


def _overlap_with_union(lo: float, hi: float, union: list[tuple[float, float]]) -> float:
    return sum(max(0.0, min(hi, b) - max(lo, a)) for a, b in union)


@dataclass
class PsdRoc:
    classes: list[str]
    thresholds: np.ndarray          # (T,)
    efpr: np.ndarray                # (C, T)
    tpr: np.ndarray                 # (C, T)
    grid: np.ndarray                # union of breakpoints within [0, e_max]
    etpr_curve: np.ndarray          # effective TPR on the grid
    e_max: float

    def class_staircase(self, c: int, grid: np.ndarray) -> np.ndarray:
        """Running-max TPR of class c evaluated at each grid point."""
        order = np.argsort(self.efpr[c], kind="stable")
        xs, ys = self.efpr[c][order], np.maximum.accumulate(self.tpr[c][order])
        idx = np.searchsorted(xs, grid, side="right") - 1
        return np.where(idx >= 0, ys[np.clip(idx, 0, None)], 0.0)

    def per_class_area(self) -> dict[str, float]:
        out = {}
        for c, name in enumerate(self.classes):
            vals = self.class_staircase(c, self.grid)
            out[name] = float(_staircase_area(self.grid, vals, self.e_max) / self.e_max)
        return out


def _staircase_area(grid: np.ndarray, values: np.ndarray, e_max: float) -> float:
    widths = np.diff(np.concatenate((grid, [e_max])))
    return float(np.sum(values * widths))


@dataclass
class PsdsResult:
    score: float
    roc: PsdRoc


def count_matches(refs: list[Event], dets: list[Event], params: PsdsParams,
                  class_list: list[str]) -> tuple[dict, dict, dict]:
    """DTC/GTC/CTTC counting for one operating point.

    Returns (tp, fp, ct) where tp/fp map class -> count and ct maps
    (det_class, ref_class) -> count.
    """
    clip_ids = sorted({e.clip_id for e in refs} | {e.clip_id for e in dets})
    ref_by = {}
    for e in refs:
        ref_by.setdefault((e.clip_id, e.label), []).append(e)
    det_by = {}
    for e in dets:
        det_by.setdefault((e.clip_id, e.label), []).append(e)

    tp = {c: 0 for c in class_list}
    fp = {c: 0 for c in class_list}
    ct = {(c, k): 0 for c in class_list for k in class_list if k != c}

    for clip in clip_ids:
        ref_union = {c: _union_intervals([(r.onset, r.offset)
                                          for r in ref_by.get((clip, c), [])])
                     for c in class_list}
        for c in class_list:
            valid = []
            for d in det_by.get((clip, c), []):
                frac = _overlap_with_union(d.onset, d.offset, ref_union[c]) / d.duration
                if frac >= params.dtc:
                    valid.append(d)
                else:
                    fp[c] += 1
                    if params.alpha_ct > 0:
                        for k in class_list:
                            if k == c or not ref_union[k]:
                                continue
                            xfrac = (_overlap_with_union(d.onset, d.offset, ref_union[k])
                                     / d.duration)
                            if xfrac >= params.cttc:
                                ct[(c, k)] += 1
            valid_union = _union_intervals([(d.onset, d.offset) for d in valid])
            for r in ref_by.get((clip, c), []):
                covered = _overlap_with_union(r.onset, r.offset, valid_union)
                if covered / r.duration >= params.gtc:
                    tp[c] += 1
    return tp, fp, ct


def psds(refs: list[Event], dets_by_threshold: dict[float, list[Event]],
         params: PsdsParams, dataset_duration: float) -> PsdsResult:
    """PSDS over the operating points in `params.thresholds`.

    `dets_by_threshold` must supply a detection list for every threshold;
    `dataset_duration` is the total evaluated audio in seconds.
    """
    missing = [t for t in params.thresholds if t not in dets_by_threshold]
    if missing:
        raise ValueError(f"missing detections for thresholds {missing}")
    if dataset_duration <= 0:
        raise ValueError("dataset_duration must be positive")

    class_list = sorted({e.label for e in refs})
    if not class_list:
        raise ValueError("psds: no reference events")
    n_refs = {c: 0 for c in class_list}
    for e in refs:
        n_refs[e.label] += 1

    hours = dataset_duration / 3600.0
    thresholds = np.asarray(params.thresholds)
    n_c, n_t = len(class_list), len(thresholds)
    tpr = np.zeros((n_c, n_t))
    efpr = np.zeros((n_c, n_t))

    for ti, thr in enumerate(params.thresholds):
        tp, fp, ct = count_matches(refs, [e for e in dets_by_threshold[thr]], params, class_list)
        for ci, c in enumerate(class_list):
            tpr[ci, ti] = tp[c] / n_refs[c]
            others = [k for k in class_list if k != c]
            ct_rate = (np.mean([ct[(c, k)] / hours for k in others]) if others else 0.0)
            efpr[ci, ti] = fp[c] / hours + params.alpha_ct * ct_rate

    grid = np.unique(np.concatenate(([0.0], efpr[efpr <= params.e_max].ravel())))
    roc = PsdRoc(class_list, thresholds, efpr, tpr, grid, np.zeros_like(grid), params.e_max)
    stair = np.stack([roc.class_staircase(c, grid) for c in range(n_c)])
    mu = stair.mean(axis=0)
    sigma = stair.std(axis=0)
    roc.etpr_curve = np.maximum(0.0, mu - params.alpha_st * sigma)
    score = _staircase_area(grid, roc.etpr_curve, params.e_max) / params.e_max
    return PsdsResult(float(score), roc)
