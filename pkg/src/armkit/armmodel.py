"""MIMO temporal reward model with interval and completion heads.

Per-frame visual, proprioceptive, and instruction inputs are fused
additively into a shared width, passed through a causal transformer
encoder, and decoded by two heads: a 3-way classifier over consecutive
hidden-state pairs (regressing / stagnant / progressing) and a per-frame
task-completion probability. The joint loss is
``lambda_int * L_int + lambda_succ * L_succ`` with focal loss on the
completion head.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import (ConfigurationError, ShapeError, TrainingError,
                     ValidationError)
from .labeling import merge_labels
from .simenv import DONE_EPS, Episode, Outcome
from .trajdata import EpisodeStore, subsampled_indices
from . import tensorcore as tc
from .tensorcore import tensor as T
from .tensorcore import Tensor

logger = logging.getLogger(__name__)

CLASS_OFFSET = 1  # label y in {-1,0,+1} maps to class index y + 1


@dataclass(frozen=True)
class ArmConfig:
    window: int = 5
    stride: int = 8
    width: int = 64
    layers: int = 2
    heads: int = 4
    ff_mult: int = 4
    lambda_int: float = 1.0
    lambda_succ: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 2.0
    completion_eps: float = 1e-3
    d_vis: int = 32
    d_state: int = 13
    vocab_size: int = 4
    lr: float = 5e-5
    weight_decay: float = 1e-3
    batch_size: int = 64
    train_steps: int = 4000
    warmup_frac: float = 0.05
    grad_clip: float = 0.0
    use_class_weights: bool = True
    class_weight_cap: float = 10.0
    prob_floor: float = 1e-7

    def __post_init__(self) -> None:
        if self.window < 2:
            raise ConfigurationError("window must be >= 2")
        if self.stride < 1:
            raise ConfigurationError("stride must be >= 1")
        if self.width % self.heads != 0:
            raise ConfigurationError("width must be divisible by heads")
        if self.layers < 0:
            raise ConfigurationError("layers must be >= 0")
        if self.lambda_int < 0 or self.lambda_succ < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if not 0 < self.prob_floor < 0.5:
            raise ConfigurationError("prob_floor must lie in (0, 0.5)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ArmConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown ArmConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ArmOutputs:
    interval_logits: Tensor   # (..., window-1, 3)
    completion_prob: Tensor   # (..., window)
    hidden: Tensor            # (..., window, width)


class ArmModel(tc.Module):
    def __init__(self, config: ArmConfig, rng: np.random.Generator):
        d = config.width
        self.config = config
        self.proj_v = tc.MLP([config.d_vis, d, d], rng)
        self.proj_s = tc.MLP([config.d_state, d, d], rng)
        self.embed_g = tc.Embedding(config.vocab_size, d, rng)
        self.pos = Tensor(tc.init_uniform(rng, (config.window, d), d),
                          requires_grad=True)
        self.blocks = [tc.EncoderBlock(d, config.heads, config.ff_mult * d, rng)
                       for _ in range(config.layers)]
        self.head_int = tc.MLP([2 * d, d, 3], rng)
        self.head_succ = tc.MLP([d, d, 1], rng)
        self.checkpoint_id: str | None = None

    # -- spec surface --------------------------------------------------------

    def fuse(self, vis: np.ndarray, pro: np.ndarray,
             instruction: np.ndarray | int) -> Tensor:
        """Additive multimodal fusion: proj_v(v) + proj_s(s) + embed(g)."""
        vis = np.asarray(vis)
        pro = np.asarray(pro)
        if vis.shape[-1] != self.config.d_vis:
            raise ShapeError(f"vis feature dim {vis.shape[-1]} != "
                             f"{self.config.d_vis}")
        if pro.shape[-1] != self.config.d_state:
            raise ShapeError(f"proprio dim {pro.shape[-1]} != "
                             f"{self.config.d_state}")
        ids = np.asarray(instruction)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValidationError("instruction id out of vocabulary")
        single = vis.ndim == 1
        if single:
            vis = vis[None, :]
            pro = pro[None, :]
        dtype = self.pos.data.dtype
        xv = self.proj_v(Tensor(vis.astype(dtype)))
        xs = self.proj_s(Tensor(pro.astype(dtype)))
        xg = self.embed_g(ids)
        if vis.ndim == 3 and ids.ndim == 1:
            xg = T.reshape(xg, (ids.shape[0], 1, self.config.width))
        out = T.add(T.add(xv, xs), xg)
        return T.reshape(out, (self.config.width,)) if single else out

    def encode(self, xs: Tensor) -> Tensor:
        """Causal transformer encoding; identity when layers == 0."""
        if xs.shape[-2] != self.config.window:
            raise ShapeError(f"encode expects {self.config.window} rows, "
                             f"got {xs.shape[-2]}")
        single = xs.data.ndim == 2
        hs = T.reshape(xs, (1,) + xs.shape) if single else xs
        for block in self.blocks:
            hs = block(hs)
        return T.reshape(hs, hs.shape[1:]) if single else hs

    def heads(self, hs: Tensor) -> ArmOutputs:
        """Interval logits over (h_i, h_{i+1}) pairs; completion per frame."""
        squeeze = hs.data.ndim == 2
        if squeeze:
            hs = T.reshape(hs, (1,) + hs.shape)
        pairs = T.concat([hs[:, :-1, :], hs[:, 1:, :]], axis=-1)
        interval_logits = self.head_int(pairs)
        completion = T.sigmoid(self.head_succ(hs))
        completion = T.reshape(completion, completion.shape[:-1])
        if squeeze:
            interval_logits = T.reshape(interval_logits,
                                        interval_logits.shape[1:])
            completion = T.reshape(completion, completion.shape[1:])
            hs = T.reshape(hs, hs.shape[1:])
        return ArmOutputs(interval_logits=interval_logits,
                          completion_prob=completion, hidden=hs)

    def forward(self, vis: np.ndarray, pro: np.ndarray,
                instruction: np.ndarray | int) -> ArmOutputs:
        fused = self.fuse(vis, pro, instruction)
        x = T.add(fused, self.pos)
        hs = self.encode(x)
        return self.heads(hs)


@dataclass
class LossValues:
    total: Tensor
    interval: float
    completion: float

    @property
    def total_value(self) -> float:
        return float(self.total.data)


def arm_loss(outputs: ArmOutputs, interval_targets: np.ndarray,
             completion_targets: np.ndarray, frame_mask: np.ndarray,
             config: ArmConfig,
             class_weights: np.ndarray | None = None) -> LossValues:
    """Joint loss over a batch of windows.

    `interval_targets` holds class indices 0/1/2 (for y -1/0/+1) with -1
    marking unlabeled or padded intervals; `frame_mask` zeroes padded
    frames out of the completion term.
    """
    logits = outputs.interval_logits
    probs = outputs.completion_prob
    if logits.data.ndim == 2:
        logits = T.reshape(logits, (1,) + logits.shape)
        probs = T.reshape(probs, (1,) + probs.shape)
        interval_targets = np.asarray(interval_targets)[None, :]
        completion_targets = np.asarray(completion_targets)[None, :]
        frame_mask = np.asarray(frame_mask)[None, :]
    interval_targets = np.asarray(interval_targets)
    completion_targets = np.asarray(completion_targets, dtype=np.float64)
    frame_mask = np.asarray(frame_mask, dtype=np.float64)
    if frame_mask.sum() == 0:
        raise ValidationError("every position in the batch is padded")

    dtype = probs.data.dtype

    # completion head: focal loss over real frames
    clamped = T.clamp(probs, config.prob_floor, 1.0 - config.prob_floor)
    focal = T.focal_loss(clamped, completion_targets,
                         config.focal_gamma, config.focal_alpha)
    mask_t = Tensor(frame_mask.astype(dtype))
    loss_succ = T.scale(T.tensor_sum(T.mul(focal, mask_t)),
                        1.0 / frame_mask.sum())

    # interval head: class-weighted cross-entropy over labeled intervals
    int_mask = interval_targets >= 0
    if int_mask.any():
        safe_targets = np.where(int_mask, interval_targets, 0)
        ce = T.cross_entropy(logits, safe_targets)
        if class_weights is not None:
            w = class_weights[safe_targets] * int_mask
        else:
            w = int_mask.astype(np.float64)
        w_t = Tensor(w.astype(dtype))
        loss_int = T.scale(T.tensor_sum(T.mul(ce, w_t)), 1.0 / w.sum())
        total = T.add(T.scale(loss_int, config.lambda_int),
                      T.scale(loss_succ, config.lambda_succ))
        int_value = float(loss_int.data)
    else:
        total = T.scale(loss_succ, config.lambda_succ)
        int_value = 0.0
    return LossValues(total=total, interval=int_value,
                      completion=float(loss_succ.data))


# -- training -----------------------------------------------------------------


@dataclass
class _EpisodeArrays:
    episode_id: str
    vis: np.ndarray        # (T_sub, d_vis) float64
    pro: np.ndarray        # (T_sub, d_state)
    instruction: int
    completion: np.ndarray  # (T_sub,) float64 in {0,1}
    interval: np.ndarray    # (T_sub-1,) class index or -1


def _episode_arrays(episode: Episode, config: ArmConfig,
                    effective: dict) -> _EpisodeArrays:
    ts = subsampled_indices(len(episode), config.stride)
    vis = episode.vis[ts].astype(np.float64)
    pro = episode.proprio[ts].astype(np.float64)
    gt = episode.gt[ts].astype(np.float64)
    completion = np.where(np.isnan(gt), 0.0,
                          (gt >= 1.0 - config.completion_eps).astype(float))
    interval = np.full(max(len(ts) - 1, 0), -1, dtype=np.int64)
    for j in range(len(ts) - 1):
        lab = effective.get((episode.id, ts[j]))
        if lab is not None:
            interval[j] = lab.y + CLASS_OFFSET
    return _EpisodeArrays(episode.id, vis, pro, episode.instruction_id,
                          completion, interval)


def compute_class_weights(arrays: list[_EpisodeArrays],
                          cap: float) -> np.ndarray:
    counts = np.zeros(3, dtype=np.float64)
    for arr in arrays:
        labeled = arr.interval[arr.interval >= 0]
        for c in range(3):
            counts[c] += (labeled == c).sum()
    total = counts.sum()
    if total == 0:
        return np.ones(3)
    weights = np.where(counts > 0, total / (3.0 * np.maximum(counts, 1)), cap)
    return np.minimum(weights, cap)


def _sample_batch(arrays: list[_EpisodeArrays], probs: np.ndarray,
                  config: ArmConfig, rng: np.random.Generator):
    B, W = config.batch_size, config.window
    vis = np.empty((B, W, config.d_vis))
    pro = np.empty((B, W, config.d_state))
    g = np.empty(B, dtype=np.int64)
    int_t = np.full((B, W - 1), -1, dtype=np.int64)
    comp_t = np.zeros((B, W))
    mask = np.zeros((B, W))
    picks = rng.choice(len(arrays), size=B, p=probs)
    for b, e in enumerate(picks):
        arr = arrays[e]
        t_sub = arr.vis.shape[0]
        if t_sub <= W:
            start = 0
        else:
            start = int(rng.integers(0, t_sub - W + 1))
        idx = np.minimum(np.arange(start, start + W), t_sub - 1)
        real = np.arange(start, start + W) <= t_sub - 1
        vis[b] = arr.vis[idx]
        pro[b] = arr.pro[idx]
        g[b] = arr.instruction
        comp_t[b] = arr.completion[idx]
        mask[b] = real.astype(float)
        for i in range(W - 1):
            j = start + i
            if real[i + 1] and j < arr.interval.shape[0]:
                int_t[b, i] = arr.interval[j]
    return vis, pro, g, int_t, comp_t, mask


@dataclass
class TrainResult:
    model: "ArmModel"
    checkpoint_id: str
    checkpoint_path: Path | None
    trace: list[tuple[int, float, float, float]]
    class_weights: np.ndarray


def train(config: ArmConfig, store: EpisodeStore, labels, seed: int,
          steps: int | None = None, epochs: float | None = None,
          out_path: str | Path | None = None,
          trace_path: str | Path | None = None) -> TrainResult:
    """Train the reward model; deterministic given (config, data, seed)."""
    if not labels:
        raise ValidationError("training requires at least some labels")
    outcomes = {store.manifest_record(i)["outcome"]
                for i in store.episode_ids()}
    if Outcome.SUCCESS.value not in outcomes:
        raise ValidationError("training set needs at least one success episode")
    if Outcome.FAILURE.value not in outcomes:
        raise ValidationError("training set needs at least one failure episode")

    effective = merge_labels(labels)
    arrays = [_episode_arrays(store.read_episode(i), config, effective)
              for i in store.episode_ids()]
    if not any((arr.interval >= 0).any() for arr in arrays):
        raise ValidationError("no labels align with stored episodes")
    lengths = np.array([max(a.vis.shape[0], 1) for a in arrays], dtype=float)
    probs = lengths / lengths.sum()
    class_weights = (compute_class_weights(arrays, config.class_weight_cap)
                     if config.use_class_weights else None)

    seq = np.random.SeedSequence(seed)
    init_seq, sample_seq = seq.spawn(2)
    model = ArmModel(config, np.random.default_rng(init_seq))
    rng = np.random.default_rng(sample_seq)

    if steps is None:
        if epochs is not None:
            windows_total = sum(math.ceil(a.vis.shape[0] / config.window)
                                for a in arrays)
            steps = max(1, round(epochs * windows_total / config.batch_size))
        else:
            steps = config.train_steps
    warmup = max(1, int(config.warmup_frac * steps))
    opt = tc.AdamW(model.named_parameters(), lr=config.lr,
                   weight_decay=config.weight_decay)
    trace = []
    for step_i in range(steps):
        vis, pro, g, int_t, comp_t, mask = _sample_batch(
            arrays, probs, config, rng)
        opt.zero_grad()
        outputs = model.forward(vis, pro, g)
        values = arm_loss(outputs, int_t, comp_t, mask, config, class_weights)
        total = values.total_value
        if not math.isfinite(total):
            raise TrainingError(f"non-finite loss at step {step_i}")
        values.total.backward()
        if config.grad_clip > 0:
            tc.clip_grad_norm(model.named_parameters(), config.grad_clip)
        opt.step(lr=tc.cosine_schedule(step_i, steps, config.lr, warmup))
        trace.append((step_i, total, values.interval, values.completion))
        if step_i % 500 == 0:
            logger.info("step %d: loss=%.4f int=%.4f succ=%.4f",
                        step_i, total, values.interval, values.completion)

    checkpoint_path = None
    if out_path is not None:
        checkpoint_path = Path(out_path)
        ckpt_id = save_checkpoint(model, checkpoint_path)
    else:
        ckpt_id = compute_checkpoint_id(model)
    model.checkpoint_id = ckpt_id
    if trace_path is not None:
        write_trace(trace, trace_path)
    return TrainResult(model=model, checkpoint_id=ckpt_id,
                       checkpoint_path=checkpoint_path, trace=trace,
                       class_weights=(class_weights if class_weights is not None
                                      else np.ones(3)))


def compute_checkpoint_id(model: ArmModel) -> str:
    from .tensorcore.checkpoint import _payload, checkpoint_id
    meta = {"config": model.config.to_dict(), "kind": "arm"}
    payload, entries = _payload(model.state_dict())
    return checkpoint_id(payload, meta, entries)


def write_trace(trace, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss_total", "loss_interval",
                         "loss_completion"])
        for row in trace:
            writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


def save_checkpoint(model: ArmModel, path: str | Path) -> str:
    meta = {"config": model.config.to_dict(), "kind": "arm"}
    ckpt_id = tc.save_checkpoint(path, model.state_dict(), meta)
    model.checkpoint_id = ckpt_id
    return ckpt_id


def load_checkpoint(path: str | Path) -> ArmModel:
    params, meta, ckpt_id = tc.load_checkpoint_file(path)
    if meta.get("kind") != "arm":
        raise ValidationError(f"{path} is not a reward-model checkpoint")
    config = ArmConfig.from_dict(meta["config"])
    model = ArmModel(config, np.random.default_rng(0))
    model.load_state(params)
    model.checkpoint_id = ckpt_id
    return model


def clone_model(model: ArmModel, dtype=np.float64) -> ArmModel:
    clone = ArmModel(model.config, np.random.default_rng(0))
    clone.load_state(model.state_dict())
    clone.checkpoint_id = model.checkpoint_id
    if dtype is not np.float64:
        clone.astype(dtype)
    return clone


# -- inference ----------------------------------------------------------------


def infer_window(model: ArmModel, vis: np.ndarray, pro: np.ndarray,
                 instruction: int = 0) -> dict[str, np.ndarray]:
    """Forward one (possibly padded) window; returns numpy outputs."""
    cfg = model.config
    vis = np.asarray(vis)
    pro = np.asarray(pro)
    if vis.shape != (cfg.window, cfg.d_vis):
        raise ValidationError(f"window vis shape {vis.shape} != "
                              f"{(cfg.window, cfg.d_vis)}")
    if pro.shape != (cfg.window, cfg.d_state):
        raise ValidationError(f"window proprio shape {pro.shape} != "
                              f"{(cfg.window, cfg.d_state)}")
    with tc.no_grad():
        out = model.forward(vis, pro, int(instruction))
    return {"interval_logits": out.interval_logits.data.copy(),
            "completion_prob": out.completion_prob.data.copy(),
            "hidden": out.hidden.data.copy()}


def infer_windows_batch(model: ArmModel, vis: np.ndarray, pro: np.ndarray,
                        instruction: np.ndarray
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Forward a (B, W, .) batch; returns (interval logits, completion)."""
    with tc.no_grad():
        out = model.forward(vis, pro, np.asarray(instruction))
    return out.interval_logits.data.copy(), out.completion_prob.data.copy()


@dataclass
class MisoOutputs:
    positions: np.ndarray    # subsampled positions with predictions
    deltas: np.ndarray       # predicted y at (pos-1, pos)
    completion: np.ndarray   # completion prob at pos
    forward_passes: int


def infer_episode_miso(model: ArmModel, episode: Episode) -> MisoOutputs:
    """Slide the window one subsampled step at a time, keeping only the
    final-position outputs of each pass."""
    cfg = model.config
    ts = subsampled_indices(len(episode), cfg.stride)
    t_sub = len(ts)
    W = cfg.window
    dtype = model.pos.data.dtype
    vis_sub = episode.vis[ts].astype(dtype)
    pro_sub = episode.proprio[ts].astype(dtype)
    passes = max(1, t_sub - W + 1)
    idx = np.minimum(np.arange(passes)[:, None] + np.arange(W)[None, :],
                     t_sub - 1)
    vis_b = vis_sub[idx]
    pro_b = pro_sub[idx]
    g = np.full(passes, episode.instruction_id, dtype=np.int64)
    logits, completion = infer_windows_batch(model, vis_b, pro_b, g)
    if t_sub >= W:
        positions = np.arange(W - 1, t_sub)
        deltas = logits[:, W - 2, :].argmax(axis=-1) - CLASS_OFFSET
        comp = completion[:, W - 1]
    else:
        # degenerate short episode: one padded pass, outputs at the last
        # real position (no interval prediction for a single frame)
        last = t_sub - 1
        positions = np.array([last])
        comp = completion[:, last]
        if t_sub >= 2:
            deltas = logits[:, last - 1, :].argmax(axis=-1) - CLASS_OFFSET
        else:
            deltas = np.array([], dtype=np.int64)
    return MisoOutputs(positions=positions, deltas=np.asarray(deltas),
                       completion=np.asarray(comp), forward_passes=passes)


def mimo_pass_count(t_sub: int, window: int) -> int:
    return math.ceil(max(t_sub, 1) / window)


def miso_pass_count(t_sub: int, window: int) -> int:
    return max(1, t_sub - window + 1)


def benchmark_modes(model: ArmModel, episode: Episode,
                    repeats: int = 3) -> dict:
    """Wall-clock and forward-pass comparison of tiled vs sliding inference."""
    from .reconstruct import segment_and_infer

    cfg = model.config
    t_sub = len(subsampled_indices(len(episode), cfg.stride))
    fast = clone_model(model, np.float32)

    def time_call(fn):
        best = math.inf
        for _ in range(repeats):
            start = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - start)
        return best

    mimo_seconds = time_call(lambda: segment_and_infer(
        fast, episode, include_boundaries=False))
    miso_seconds = time_call(lambda: infer_episode_miso(fast, episode))
    mimo_n = mimo_pass_count(t_sub, cfg.window)
    miso_n = miso_pass_count(t_sub, cfg.window)
    return {
        "t_sub": t_sub,
        "window": cfg.window,
        "mimo_forward_passes": mimo_n,
        "miso_forward_passes": miso_n,
        "pass_ratio": miso_n / mimo_n,
        "mimo_seconds": mimo_seconds,
        "miso_seconds": miso_seconds,
        "wallclock_speedup": miso_seconds / mimo_seconds,
        "mimo_outputs_per_pass": cfg.window + (cfg.window - 1),
    }


# -- evaluation ----------------------------------------------------------------


def interval_accuracy(model: ArmModel, store: EpisodeStore, labels,
                      episode_ids: list[str] | None = None,
                      balanced: bool = False) -> float:
    """Accuracy of predicted interval classes against effective labels."""
    from .reconstruct import segment_and_infer

    effective = merge_labels(labels)
    if episode_ids is None:
        episode_ids = sorted({lab.episode_id for lab in labels})
    per_class_hits = np.zeros(3)
    per_class_total = np.zeros(3)
    for episode_id in episode_ids:
        episode = store.read_episode(episode_id)
        deltas, _ = segment_and_infer(model, episode)
        ts = subsampled_indices(len(episode), model.config.stride)
        for j in range(len(ts) - 1):
            lab = effective.get((episode_id, ts[j]))
            if lab is None:
                continue
            cls = lab.y + CLASS_OFFSET
            per_class_total[cls] += 1
            if deltas[j] == lab.y:
                per_class_hits[cls] += 1
    if balanced:
        present = per_class_total > 0
        if not present.any():
            raise ValidationError("no labeled intervals to evaluate")
        return float((per_class_hits[present]
                      / per_class_total[present]).mean())
    total = per_class_total.sum()
    if total == 0:
        raise ValidationError("no labeled intervals to evaluate")
    return float(per_class_hits.sum() / total)
