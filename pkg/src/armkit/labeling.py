"""Tri-state advantage labels from oracle, human, and model annotators.

A label judges the transition between two frames spaced one stride apart:
+1 progressing, -1 regressing, 0 stagnant. Annotator precedence when
merging is human > oracle > model; ties within a class go to the most
recent label.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ValidationError
from .simenv import Episode
from .trajdata import EpisodeStore

DEFAULT_STAG_THRESHOLD = 0.005
DEFAULT_CONFIDENCE = 0.9

_PRECEDENCE = {"human": 2, "oracle": 1, "model": 0}


@dataclass(frozen=True)
class TriStateLabel:
    episode_id: str
    t_a: int
    t_b: int
    y: int
    annotator: str
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        if self.y not in (-1, 0, 1):
            raise ValidationError(f"label value {self.y!r} not in {{-1, 0, +1}}")
        if not self.t_a < self.t_b:
            raise ValidationError("label requires t_a < t_b")
        if not self.annotator:
            raise ValidationError("annotator tag missing")

    @property
    def annotator_class(self) -> str:
        return self.annotator.split(":", 1)[0]

    def to_record(self) -> dict:
        return {"episode_id": self.episode_id, "t_a": self.t_a,
                "t_b": self.t_b, "y": self.y, "annotator": self.annotator,
                "timestamp": self.timestamp}

    @classmethod
    def from_record(cls, rec: dict) -> "TriStateLabel":
        return cls(episode_id=rec["episode_id"], t_a=int(rec["t_a"]),
                   t_b=int(rec["t_b"]), y=int(rec["y"]),
                   annotator=rec["annotator"],
                   timestamp=float(rec.get("timestamp", 0.0)))


def oracle_tristate(p_a: float, p_b: float, stag_threshold: float) -> int:
    """Label a progress pair: +1/-1 when |delta| exceeds the threshold."""
    if not (0.0 <= p_a <= 1.0 and 0.0 <= p_b <= 1.0):
        raise DomainError("progress values must lie in [0, 1]")
    if stag_threshold <= 0:
        raise DomainError("stagnation threshold must be > 0")
    delta = p_b - p_a
    if delta > stag_threshold:
        return 1
    if delta < -stag_threshold:
        return -1
    return 0


def label_episode_oracle(episode: Episode, stride: int,
                         stag_threshold: float = DEFAULT_STAG_THRESHOLD,
                         ) -> list[TriStateLabel]:
    if np.isnan(episode.gt).any():
        raise ValidationError(
            f"episode {episode.id!r} lacks ground-truth progress")
    labels = []
    for t_a in range(0, len(episode) - stride, stride):
        t_b = t_a + stride
        y = oracle_tristate(float(episode.gt[t_a]), float(episode.gt[t_b]),
                            stag_threshold)
        labels.append(TriStateLabel(episode.id, t_a, t_b, y, "oracle"))
    return labels


def label_dataset_oracle(store: EpisodeStore, stride: int,
                         stag_threshold: float = DEFAULT_STAG_THRESHOLD,
                         ) -> list[TriStateLabel]:
    """One oracle label per stride interval per stored episode."""
    labels = []
    for episode_id in store.episode_ids():
        episode = store.read_episode(episode_id)
        labels.extend(label_episode_oracle(episode, stride, stag_threshold))
    return labels


def merge_labels(labels) -> dict[tuple[str, int], TriStateLabel]:
    """Reduce label sets to one effective label per (episode, t_a).

    Precedence human > oracle > model; within a class the latest
    timestamp wins (then latest arrival for exact ties).
    """
    best: dict[tuple[str, int], tuple[tuple, TriStateLabel]] = {}
    for seq, lab in enumerate(labels):
        rank = (_PRECEDENCE.get(lab.annotator_class, -1), lab.timestamp, seq)
        key = (lab.episode_id, lab.t_a)
        cur = best.get(key)
        if cur is None or rank >= cur[0]:
            best[key] = (rank, lab)
    return {k: v[1] for k, v in best.items()}


def pseudo_label(checkpoint, store: EpisodeStore,
                 confidence: float = DEFAULT_CONFIDENCE,
                 episode_ids: list[str] | None = None) -> list[TriStateLabel]:
    """Model-generated labels for intervals the log does not yet cover.

    Runs windowed inference over the target episodes and emits a label
    wherever the interval softmax peak reaches `confidence`. `checkpoint`
    is a checkpoint path or an already-loaded model.
    """
    from .armmodel import ArmModel, load_checkpoint
    from .reconstruct import segment_and_infer_probs

    model = checkpoint if isinstance(checkpoint, ArmModel) \
        else load_checkpoint(checkpoint)
    annotator = f"model:{model.checkpoint_id or 'unsaved'}"
    if episode_ids is None:
        covered = {lab.episode_id for lab in store.read_labels()}
        episode_ids = [i for i in store.episode_ids() if i not in covered]
    stride = model.config.stride
    labels = []
    for episode_id in episode_ids:
        episode = store.read_episode(episode_id)
        probs, _ = segment_and_infer_probs(model, episode)
        peaks = probs.max(axis=1) if probs.size else np.empty(0)
        classes = probs.argmax(axis=1) - 1 if probs.size else np.empty(0)
        for j in range(probs.shape[0]):
            if peaks[j] >= confidence:
                t_a = j * stride
                labels.append(TriStateLabel(episode_id, t_a, t_a + stride,
                                            int(classes[j]), annotator))
    return labels
