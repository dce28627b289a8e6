"""Batch inference and detection scoring shared by validation and the
evaluation harness."""

from __future__ import annotations

import numpy as np
import torch
from scipy.ndimage import median_filter

from .metrics import (Event, PsdsParams, binarize_to_events, psds,
                      segment_metrics)
from .model import SedCrnn, pad_token_batch

SEGMENT_F_THRESHOLD = 0.5


def predict_probs(model: SedCrnn, features: list[np.ndarray],
                  token_lists: list[list[int] | None] | None = None,
                  batch_size: int = 16) -> np.ndarray:
    """Sigmoid frame probabilities for each clip, shape (N, T', n_classes).

    `token_lists` supplies per-clip token ids (None entries take the
    zero-fusion path); pass None for a fully text-free evaluation.
    """
    model.eval()
    outs = []
    with torch.no_grad():
        for lo in range(0, len(features), batch_size):
            chunk = features[lo:lo + batch_size]
            feats = torch.from_numpy(np.stack(chunk)).float()
            if token_lists is None:
                tokens, pad_mask, has_text = None, None, None
            else:
                tokens, pad_mask, has_text = pad_token_batch(token_lists[lo:lo + batch_size])
            frame_logits, _ = model(feats, tokens, pad_mask, has_text)
            outs.append(torch.sigmoid(frame_logits).numpy())
    return np.concatenate(outs, axis=0)


def probs_to_detections(probs: np.ndarray, clip_ids: list[str], thresholds,
                        frame_rate: float, class_names: list[str],
                        median_filter_frames: int = 3) -> dict[float, list[Event]]:
    dets: dict[float, list[Event]] = {float(t): [] for t in thresholds}
    for p, clip_id in zip(probs, clip_ids):
        if median_filter_frames and median_filter_frames > 1:
            # filter once per clip; thresholding commutes with the median
            p = median_filter(p, size=(median_filter_frames, 1), mode="nearest")
        for t in thresholds:
            dets[float(t)].extend(binarize_to_events(
                p, float(t), frame_rate, class_names, clip_id, median_filter_frames=0))
    return dets


def score_detections(probs: np.ndarray, clip_ids: list[str], refs: list[Event],
                     durations: dict[str, float], class_names: list[str],
                     frame_rate: float, presets: dict[str, PsdsParams],
                     median_filter_frames: int = 3) -> dict:
    """PSDS for every preset plus 1-second segment P/R/F at the 0.5 threshold."""
    thresholds = {t for params in presets.values() for t in params.thresholds}
    thresholds.add(SEGMENT_F_THRESHOLD)
    dets = probs_to_detections(probs, clip_ids, sorted(thresholds), frame_rate,
                               class_names, median_filter_frames)
    total_duration = sum(durations[c] for c in clip_ids)
    scores: dict = {}
    rocs = {}
    for name, params in presets.items():
        result = psds(refs, dets, params, total_duration)
        scores[name] = result.score
        rocs[name] = result.roc
    seg = segment_metrics(refs, dets[SEGMENT_F_THRESHOLD],
                          {c: durations[c] for c in clip_ids})
    scores["f"] = seg.f
    scores["precision"] = seg.precision
    scores["recall"] = seg.recall
    return {"scores": scores, "rocs": rocs, "segment": seg}
