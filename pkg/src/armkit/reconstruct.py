"""Global progress reconstruction from interval deltas and completion anchors.

An episode is tiled into non-overlapping causal windows, inferred in one
batch, and padded predictions are discarded. Interval transitions between
adjacent windows get their own causal window ending at the boundary, so
every one of the T_sub - 1 subsampled intervals receives a prediction.
Deltas accumulate into a raw cumulative sum which is normalized against a
completion anchor (anchored mode) or scaled by the dataset-mean increment
per +1 interval (anchor-free mode).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InconsistentLabelsError, ValidationError
from .simenv import DONE_EPS, Episode
from .trajdata import EpisodeStore, subsampled_indices, window_samples

DEFAULT_SUCC_THRESHOLD = 0.5


@dataclass
class ProgressCurve:
    """Reconstructed per-subsampled-frame progress plus anchoring metadata."""

    episode_id: str
    P: np.ndarray             # (T_sub,) floats in [0, 1]
    anchored: bool
    anchor_index: int | None  # subsampled index where P is pinned to 1
    raw_cumsum: np.ndarray    # (T_sub,) signed integers
    stride: int = 1


def segment_and_infer_probs(model, episode: Episode,
                            include_boundaries: bool = True
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Tile, batch-infer, and drop padded predictions.

    Returns interval softmax probabilities with columns ordered
    (-1, 0, +1), shaped (T_sub - 1, 3), and per-frame completion
    probabilities shaped (T_sub,).
    """
    from .armmodel import infer_windows_batch

    cfg = model.config
    if len(episode) < 1:
        raise ValidationError("cannot reconstruct an empty episode")
    W = cfg.window
    ts = subsampled_indices(len(episode), cfg.stride)
    t_sub = len(ts)
    dtype = model.pos.data.dtype
    vis_sub = episode.vis[ts].astype(dtype)
    pro_sub = episode.proprio[ts].astype(dtype)

    windows = window_samples(episode, W, cfg.stride)
    tile_idx = np.array(
        [[min(w * W + i, t_sub - 1) for i in range(W)]
         for w in range(len(windows))])
    g = np.full(len(windows), episode.instruction_id, dtype=np.int64)
    logits, completion_b = infer_windows_batch(
        model, vis_sub[tile_idx], pro_sub[tile_idx], g)
    probs_b = _softmax_np(logits)

    interval_probs = np.zeros((max(t_sub - 1, 0), 3))
    completion = np.zeros(t_sub)
    for w, sample in enumerate(windows):
        real = [not p for p in sample.pad_mask]
        for i in range(W):
            if real[i]:
                completion[w * W + i] = completion_b[w, i]
        for i in range(W - 1):
            if sample.interval_valid(i):
                interval_probs[w * W + i] = probs_b[w, i]

    if include_boundaries and len(windows) > 1:
        # boundary intervals (w*W - 1, w*W) are not covered by the tiling;
        # give each a causal window ending at the boundary's right frame
        bpos = np.array([w * W for w in range(1, len(windows))
                         if w * W <= t_sub - 1])
        b_idx = bpos[:, None] + np.arange(-(W - 1), 1)[None, :]
        gb = np.full(len(bpos), episode.instruction_id, dtype=np.int64)
        blogits, _ = infer_windows_batch(
            model, vis_sub[b_idx], pro_sub[b_idx], gb)
        bprobs = _softmax_np(blogits)
        for row, p in enumerate(bpos):
            interval_probs[p - 1] = bprobs[row, W - 2]
    return interval_probs, completion


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def segment_and_infer(model, episode: Episode,
                      include_boundaries: bool = True
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Predicted deltas in {-1, 0, +1} per interval plus completion probs."""
    probs, completion = segment_and_infer_probs(model, episode,
                                                include_boundaries)
    deltas = probs.argmax(axis=-1) - 1
    return deltas.astype(np.int64), completion


def find_anchor(completion: np.ndarray,
                succ_threshold: float = DEFAULT_SUCC_THRESHOLD) -> int | None:
    """Earliest frame whose completion probability reaches the threshold."""
    hits = np.flatnonzero(np.asarray(completion) >= succ_threshold)
    return int(hits[0]) if hits.size else None


def gt_anchor(episode: Episode, stride: int) -> int | None:
    """Earliest subsampled frame whose ground truth marks completion."""
    ts = subsampled_indices(len(episode), stride)
    gt = episode.gt[ts].astype(np.float64)
    hits = np.flatnonzero(gt >= 1.0 - DONE_EPS)
    return int(hits[0]) if hits.size else None


def reconstruct_curve(deltas: np.ndarray, anchor_index: int | None = None,
                      mean_increment: float | None = None,
                      p_start: float = 0.0, episode_id: str = "",
                      stride: int = 1) -> ProgressCurve:
    """Accumulate deltas into a dense [0, 1] progress curve.

    Anchored mode divides the cumulative sum by its value at the anchor
    (which must be positive); anchor-free mode scales by the dataset-mean
    progress increment per +1 interval.
    """
    deltas = np.asarray(deltas, dtype=np.int64)
    cumsum = np.concatenate([[0], np.cumsum(deltas)])
    if anchor_index is not None:
        if not 0 <= anchor_index < cumsum.shape[0]:
            raise ValidationError(f"anchor index {anchor_index} outside curve")
        anchor_value = int(cumsum[anchor_index])
        if anchor_value <= 0:
            raise InconsistentLabelsError(
                "anchored reconstruction requires a positive cumulative "
                f"delta at the anchor, got {anchor_value}")
        P = np.clip(cumsum / anchor_value, 0.0, 1.0)
        return ProgressCurve(episode_id=episode_id, P=P, anchored=True,
                             anchor_index=int(anchor_index),
                             raw_cumsum=cumsum, stride=stride)
    if mean_increment is None:
        raise ValidationError("anchor-free reconstruction needs the "
                              "dataset-mean increment per +1 interval")
    P = np.clip(p_start + mean_increment * cumsum, 0.0, 1.0)
    return ProgressCurve(episode_id=episode_id, P=P, anchored=False,
                         anchor_index=None, raw_cumsum=cumsum, stride=stride)


def estimate_mean_increment(anchored: list[tuple[np.ndarray, int]]) -> float:
    """Mean progress step per +1 interval across anchored episodes."""
    if not anchored:
        raise ValidationError("no anchored episodes to estimate the "
                              "mean increment from")
    values = []
    for deltas, anchor in anchored:
        cumsum = np.concatenate([[0], np.cumsum(np.asarray(deltas))])
        if cumsum[anchor] > 0:
            values.append(1.0 / cumsum[anchor])
    if not values:
        raise ValidationError("all anchored episodes have non-positive "
                              "cumulative deltas")
    return float(np.mean(values))


def build_curves(model, store: EpisodeStore,
                 episode_ids: list[str] | None = None,
                 succ_threshold: float = DEFAULT_SUCC_THRESHOLD,
                 ) -> dict[str, ProgressCurve]:
    """Reconstruct every requested episode from model predictions.

    Anchored episodes are built first so their scale can transfer to the
    anchor-free ones (failures, fragments).
    """
    if episode_ids is None:
        episode_ids = store.episode_ids()
    inferred = {}
    for episode_id in episode_ids:
        episode = store.read_episode(episode_id)
        deltas, completion = segment_and_infer(model, episode)
        anchor = find_anchor(completion, succ_threshold)
        if anchor == 0:
            anchor = None  # a zero-position anchor cannot normalize
        inferred[episode_id] = (deltas, anchor)
    anchored_pairs = [(d, a) for d, a in inferred.values()
                      if a is not None and
                      np.concatenate([[0], np.cumsum(d)])[a] > 0]
    mean_inc = (estimate_mean_increment(anchored_pairs)
                if anchored_pairs else None)
    curves = {}
    for episode_id, (deltas, anchor) in inferred.items():
        usable = anchor is not None and \
            np.concatenate([[0], np.cumsum(deltas)])[anchor] > 0
        if usable:
            curves[episode_id] = reconstruct_curve(
                deltas, anchor_index=anchor, episode_id=episode_id,
                stride=model.config.stride)
        else:
            if mean_inc is None:
                raise ValidationError(
                    "dataset has no anchored episodes; cannot scale "
                    "anchor-free reconstructions")
            curves[episode_id] = reconstruct_curve(
                deltas, mean_increment=mean_inc, episode_id=episode_id,
                stride=model.config.stride)
    return curves


def reconstruct_oracle(episode: Episode, stride: int,
                       stag_threshold: float,
                       mean_increment: float | None = None) -> ProgressCurve:
    """Reference reconstruction from oracle labels and ground-truth anchors.

    Unanchored episodes start from their true initial progress, so this
    path measures tri-state quantization error alone.
    """
    from .labeling import label_episode_oracle

    labels = label_episode_oracle(episode, stride, stag_threshold)
    deltas = np.array([lab.y for lab in labels], dtype=np.int64)
    anchor = gt_anchor(episode, stride)
    if anchor is not None and anchor > 0:
        return reconstruct_curve(deltas, anchor_index=anchor,
                                 episode_id=episode.id, stride=stride)
    return reconstruct_curve(deltas, mean_increment=mean_increment or 0.0,
                             p_start=float(episode.gt[0]),
                             episode_id=episode.id, stride=stride)


def upsample(curve: ProgressCurve, length: int) -> np.ndarray:
    """Linear interpolation of the curve back to the full frame rate."""
    xs = np.arange(curve.P.shape[0]) * curve.stride
    return np.interp(np.arange(length), xs, curve.P)


def eval_mse(curve: ProgressCurve, episode: Episode) -> float:
    """Mean squared error against normalized ground truth, per subsampled
    frame."""
    if np.isnan(episode.gt).any():
        raise ValidationError(f"episode {episode.id!r} lacks ground truth")
    ts = subsampled_indices(len(episode), curve.stride)
    gt = episode.gt[ts].astype(np.float64)
    if gt.shape != curve.P.shape:
        raise ValidationError("curve length does not match episode")
    return float(np.mean((curve.P - gt) ** 2))


def eval_success_id(model, episodes: list[Episode],
                    succ_threshold: float = DEFAULT_SUCC_THRESHOLD
                    ) -> tuple[float, float]:
    """Success-identification accuracy on known-outcome episodes.

    An episode is predicted successful iff any frame's completion
    probability reaches the threshold. Returns (SE accuracy over success
    episodes, FE accuracy over failure episodes).
    """
    from .simenv import Outcome

    se_hits = se_total = fe_hits = fe_total = 0
    for episode in episodes:
        _, completion = segment_and_infer(model, episode)
        predicted_success = bool((completion >= succ_threshold).any())
        if episode.outcome == Outcome.SUCCESS:
            se_total += 1
            se_hits += int(predicted_success)
        elif episode.outcome == Outcome.FAILURE:
            fe_total += 1
            fe_hits += int(not predicted_success)
    se = se_hits / se_total if se_total else float("nan")
    fe = fe_hits / fe_total if fe_total else float("nan")
    return se, fe


def export_curve_csv(curve: ProgressCurve, episode: Episode,
                     completion: np.ndarray, path: str | Path) -> None:
    """Per-episode CSV: frame, predicted P, gt (blank if absent),
    completion prob."""
    ts = subsampled_indices(len(episode), curve.stride)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "p_pred", "p_gt", "completion_prob"])
        for j, t in enumerate(ts):
            gt = episode.gt[t]
            gt_cell = "" if math.isnan(float(gt)) else repr(float(gt))
            writer.writerow([t, repr(float(curve.P[j])), gt_cell,
                             repr(float(completion[j]))])
