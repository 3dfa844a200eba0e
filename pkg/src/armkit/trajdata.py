"""Episodic dataset persistence, causal windowing, and label attachment.

On-disk layout of a store directory:
  manifest.jsonl   one JSON metadata record per episode
  <id>.bin         frames as [vis | proprio | action | gt-or-NaN] rows,
                   row-major little-endian float32
  labels.jsonl     append-only tri-state label log
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (ConfigurationError, ConflictError, NotFoundError,
                     StorageError, ValidationError)
from .simenv import DONE_EPS, Episode, Outcome, Source

UNLABELED = None  # marker for intervals without an effective label


@dataclass
class WindowSample:
    """A causal window of W subsampled frames with training targets.

    `frame_indices` are original frame indices spaced `stride` apart;
    padded slots repeat the last real index and are flagged in `pad_mask`.
    `interval_targets[i]` labels the transition between window positions
    i and i+1 (values -1/0/+1, or None when unlabeled or padded).
    """

    episode_id: str
    frame_indices: list[int]
    stride: int
    interval_targets: list[int | None]
    completion_targets: list[bool]
    pad_mask: list[bool]

    @property
    def window(self) -> int:
        return len(self.frame_indices)

    def interval_valid(self, i: int) -> bool:
        """True when both endpoints of interval i are real frames."""
        return not self.pad_mask[i + 1]


def subsampled_indices(length: int, stride: int) -> list[int]:
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    return list(range(0, length, stride))


def window_samples(episode: Episode, window: int, stride: int) -> list[WindowSample]:
    """Tile the stride-subsampled timeline into non-overlapping windows.

    Every real subsampled frame lands in exactly one window; the terminal
    window is padded by replicating the final real frame.
    """
    if window < 2:
        raise ConfigurationError("window must be >= 2")
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    if len(episode) < 1:
        raise ValidationError("episode has no frames")
    ts = subsampled_indices(len(episode), stride)
    n_windows = math.ceil(len(ts) / window)
    gt = episode.gt
    samples = []
    for w in range(n_windows):
        chunk = ts[w * window:(w + 1) * window]
        pad = window - len(chunk)
        indices = chunk + [chunk[-1]] * pad
        pad_mask = [False] * len(chunk) + [True] * pad
        completion = []
        for t in indices:
            g = float(gt[t])
            completion.append(bool(not math.isnan(g) and g >= 1.0 - DONE_EPS))
        samples.append(WindowSample(
            episode_id=episode.id,
            frame_indices=indices,
            stride=stride,
            interval_targets=[UNLABELED] * (window - 1),
            completion_targets=completion,
            pad_mask=pad_mask,
        ))
    return samples


def fill_window_targets(samples: list[WindowSample],
                        effective: dict[tuple[str, int], int]) -> None:
    """Fill interval targets from an (episode_id, t_a) -> y mapping."""
    for s in samples:
        for i in range(s.window - 1):
            if not s.interval_valid(i):
                continue
            y = effective.get((s.episode_id, s.frame_indices[i]))
            if y is not None:
                s.interval_targets[i] = int(y)


class EpisodeStore:
    """Append-oriented store for episodes plus a shared label log."""

    MANIFEST = "manifest.jsonl"
    LABELS = "labels.jsonl"

    def __init__(self, root: str | Path, create: bool = False):
        self.root = Path(root)
        if create:
            self.root.mkdir(parents=True, exist_ok=True)
        if not self.root.is_dir():
            raise StorageError(f"store directory {self.root} does not exist")
        self._manifest: dict[str, dict] = {}
        mpath = self.root / self.MANIFEST
        if mpath.exists():
            with open(mpath, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    self._manifest[rec["id"]] = rec

    @classmethod
    def create(cls, root: str | Path) -> "EpisodeStore":
        return cls(root, create=True)

    def __len__(self) -> int:
        return len(self._manifest)

    def episode_ids(self) -> list[str]:
        return list(self._manifest.keys())

    def manifest_record(self, episode_id: str) -> dict:
        try:
            return self._manifest[episode_id]
        except KeyError:
            raise NotFoundError(f"episode {episode_id!r} not in store") from None

    def write_episode(self, episode: Episode) -> None:
        if episode.id in self._manifest:
            raise ConflictError(f"episode id {episode.id!r} already present")
        length = len(episode)
        d_vis = episode.vis.shape[1]
        d_state = episode.proprio.shape[1]
        rows = np.concatenate([
            episode.vis.astype(np.float32),
            episode.proprio.astype(np.float32),
            episode.actions.astype(np.float32)[:, None],
            episode.gt.astype(np.float32)[:, None],
        ], axis=1)
        rec = {
            "id": episode.id,
            "instruction_id": episode.instruction_id,
            "source": episode.source.value,
            "outcome": episode.outcome.value,
            "length": length,
            "d_vis": d_vis,
            "d_state": d_state,
        }
        try:
            with open(self.root / f"{episode.id}.bin", "wb") as fh:
                fh.write(rows.astype("<f4").tobytes())
            with open(self.root / self.MANIFEST, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as exc:
            raise StorageError(f"failed to persist episode {episode.id!r}: {exc}")
        self._manifest[episode.id] = rec

    def read_episode(self, episode_id: str) -> Episode:
        rec = self.manifest_record(episode_id)
        path = self.root / f"{episode_id}.bin"
        try:
            raw = np.frombuffer(path.read_bytes(), dtype="<f4")
        except OSError as exc:
            raise StorageError(f"failed to read {path}: {exc}")
        d_vis, d_state, length = rec["d_vis"], rec["d_state"], rec["length"]
        width = d_vis + d_state + 2
        if raw.size != length * width:
            raise StorageError(
                f"episode {episode_id!r}: expected {length * width} floats, "
                f"got {raw.size}")
        rows = raw.reshape(length, width)
        return Episode(
            id=episode_id,
            instruction_id=rec["instruction_id"],
            source=Source(rec["source"]),
            outcome=Outcome(rec["outcome"]),
            vis=rows[:, :d_vis].copy(),
            proprio=rows[:, d_vis:d_vis + d_state].copy(),
            actions=rows[:, width - 2].astype(np.int64),
            gt=rows[:, width - 1].copy(),
        )

    def read_all(self) -> list[Episode]:
        return [self.read_episode(i) for i in self.episode_ids()]

    # -- label log ---------------------------------------------------------

    @property
    def labels_path(self) -> Path:
        return self.root / self.LABELS

    def append_labels(self, labels) -> None:
        from .labeling import TriStateLabel  # local import to avoid a cycle
        recs = []
        for lab in labels:
            if not isinstance(lab, TriStateLabel):
                raise ValidationError("labels must be TriStateLabel values")
            recs.append(lab.to_record())
        try:
            with open(self.labels_path, "a", encoding="utf-8") as fh:
                for rec in recs:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as exc:
            raise StorageError(f"failed to append labels: {exc}")

    def read_labels(self):
        from .labeling import TriStateLabel
        out = []
        if not self.labels_path.exists():
            return out
        with open(self.labels_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    out.append(TriStateLabel.from_record(json.loads(line)))
        return out


def validate_label_refs(store: EpisodeStore, labels, stride: int) -> None:
    """Check that every label points at an existing stride-aligned pair."""
    for lab in labels:
        if lab.episode_id not in store.episode_ids():
            raise ValidationError(f"label references unknown episode "
                                  f"{lab.episode_id!r}")
        rec = store.manifest_record(lab.episode_id)
        if lab.t_b - lab.t_a != stride:
            raise ValidationError(
                f"label pair gap {lab.t_b - lab.t_a} != stride {stride}")
        if not (0 <= lab.t_a < lab.t_b < rec["length"]):
            raise ValidationError(
                f"label frames ({lab.t_a}, {lab.t_b}) outside episode "
                f"{lab.episode_id!r} of length {rec['length']}")


def attach_labels(store: EpisodeStore, labels, window: int,
                  stride: int) -> dict[str, list[WindowSample]]:
    """Build windows for all labeled episodes and fill interval targets.

    Labels are merged by annotator precedence (human > oracle > model)
    before attachment.
    """
    from .labeling import merge_labels
    validate_label_refs(store, labels, stride)
    effective = merge_labels(labels)
    windows: dict[str, list[WindowSample]] = {}
    ids = {lab.episode_id for lab in labels}
    for episode_id in sorted(ids):
        episode = store.read_episode(episode_id)
        samples = window_samples(episode, window, stride)
        fill_window_targets(samples, {k: v.y for k, v in effective.items()})
        windows[episode_id] = samples
    return windows
