"""Length-adaptive gains, statistical weighting, and weighted behavior cloning.

Progress curves become per-chunk gains (progress change over an action
horizon, scaled by episode length over the dataset mean), gains become
training weights through 2-sigma clamped normalization or hard
thresholds, and the policy minimizes the weighted negative log-likelihood
of its action chunks. Evaluation is closed-loop in the simulator with
greedy action selection.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import (ConfigurationError, TrainingError, ValidationError)
from .reconstruct import ProgressCurve, upsample
from .simenv import Action, ObservationBuilder, SimConfig, reset, step
from .trajdata import EpisodeStore
from . import tensorcore as tc
from .tensorcore import tensor as T
from .tensorcore import Tensor

logger = logging.getLogger(__name__)

WEIGHT_EPS = 1e-6
SIGMA_DEGENERATE = 1e-9
N_ACTIONS = 3

WEIGHTING_MODES = ("none", "statistical", "threshold")
BATCH_SCOPES = ("batch", "global")


@dataclass(frozen=True)
class PolicyConfig:
    hidden: tuple[int, ...] = (128, 128)
    horizon: int = 8
    epochs: int = 12
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    weighting: str = "statistical"
    batch_scope: str = "batch"
    threshold_positive: float = 0.01

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ConfigurationError("action horizon must be >= 1")
        if self.weighting not in WEIGHTING_MODES:
            raise ConfigurationError(f"weighting must be one of "
                                     f"{WEIGHTING_MODES}")
        if self.batch_scope not in BATCH_SCOPES:
            raise ConfigurationError(f"batch_scope must be one of "
                                     f"{BATCH_SCOPES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "PolicyConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(
                f"unknown PolicyConfig keys: {sorted(unknown)}")
        if "hidden" in data:
            data = dict(data, hidden=tuple(data["hidden"]))
        return cls(**data)


@dataclass(frozen=True)
class GainWeight:
    """One chunk's gain and training weight plus the batch statistics
    that produced it."""

    episode_id: str
    t: int
    delta_g: float
    weight: float
    horizon: int
    length: int
    mean_length: float
    mu: float
    sigma: float
    b_lower: float
    b_upper: float
    eps: float


def gains(curve: ProgressCurve | np.ndarray, horizon: int, length: int,
          mean_length: float) -> list[tuple[int, float]]:
    """Length-adaptive gain per chunk: (P_{t+H} - P_t) * L_seq / L_mean.

    Chunks tile the episode; the final partial chunk uses the last
    available progress value.
    """
    if mean_length <= 0:
        raise ValidationError("mean episode length must be > 0")
    if isinstance(curve, ProgressCurve):
        p = upsample(curve, length)
    else:
        p = np.asarray(curve, dtype=np.float64)
        if p.shape[0] != length:
            raise ValidationError(
                f"curve length {p.shape[0]} != episode length {length}")
    if horizon >= length:
        warnings.warn("action horizon >= episode length; emitting a single "
                      "whole-episode chunk", stacklevel=2)
        scale = length / mean_length
        return [(0, float((p[-1] - p[0]) * scale))]
    scale = length / mean_length
    out = []
    for t in range(0, length, horizon):
        end = min(t + horizon, length - 1)
        out.append((t, float((p[end] - p[t]) * scale)))
    return out


def weights_statistical(batch_gains: np.ndarray,
                        eps: float = WEIGHT_EPS) -> np.ndarray:
    """2-sigma clamped normalization of a batch of gains to [0, 1].

    Population statistics; a degenerate batch (sigma ~ 0) carries no
    ranking information and maps to uniform 0.5 weights.
    """
    g = np.asarray(batch_gains, dtype=np.float64)
    if g.size == 0:
        raise ValidationError("cannot weight an empty batch")
    if eps <= 0:
        raise ValidationError("eps must be > 0")
    mu = g.mean()
    sigma = g.std()  # population std
    if sigma < SIGMA_DEGENERATE:
        return np.full(g.shape, 0.5)
    b_lower = mu - 2.0 * sigma
    b_upper = mu + 2.0 * sigma
    return np.clip((g - b_lower) / (b_upper - b_lower + eps), 0.0, 1.0)


def weights_threshold(batch_gains: np.ndarray,
                      positive: float = 0.01) -> np.ndarray:
    """Hard gating: 1 above the positive threshold, 0 at or below zero.

    The unspecified gap (0, positive] also maps to 0: near-stagnant
    chunks are filtered.
    """
    g = np.asarray(batch_gains, dtype=np.float64)
    return (g > positive).astype(np.float64)


class PolicyNet(tc.Module):
    """Feed-forward classifier over H-step action chunks.

    The chunk likelihood factorizes into independent per-step softmaxes
    over the discrete action set.
    """

    def __init__(self, config: PolicyConfig, obs_dim: int,
                 rng: np.random.Generator):
        self.config = config
        self.obs_dim = obs_dim
        dims = [obs_dim, *config.hidden, config.horizon * N_ACTIONS]
        self.mlp = tc.MLP(dims, rng)

    def logits(self, obs: np.ndarray | Tensor) -> Tensor:
        x = obs if isinstance(obs, Tensor) else Tensor(
            np.asarray(obs, dtype=np.float64))
        single = x.data.ndim == 1
        if single:
            x = T.reshape(x, (1, self.obs_dim))
        out = self.mlp(x)
        out = T.reshape(out, (out.shape[0], self.config.horizon, N_ACTIONS))
        return T.reshape(out, out.shape[1:]) if single else out

    def act(self, obs: np.ndarray) -> np.ndarray:
        """Greedy action chunk for one observation."""
        with tc.no_grad():
            logits = self.logits(obs)
        return logits.data.argmax(axis=-1).astype(np.int64)


def awbc_loss(logits: Tensor, action_chunks: np.ndarray,
              weights: np.ndarray) -> Tensor:
    """Weighted negative log-likelihood of action chunks.

    `weights` are plain numbers (detached); a zero weight contributes
    exactly zero loss and zero gradient.
    """
    action_chunks = np.asarray(action_chunks)
    weights = np.asarray(weights, dtype=np.float64)
    if logits.data.ndim != 3:
        raise ValidationError("expected batched (B, H, A) logits")
    batch = logits.shape[0]
    if action_chunks.shape != logits.shape[:2] or weights.shape != (batch,):
        raise ValidationError("weights/actions misaligned with logits")
    nll = T.cross_entropy(logits, action_chunks)       # (B, H)
    per_chunk = T.tensor_sum(nll, axis=1)              # chunk log-likelihood
    weighted = T.mul(per_chunk, Tensor(weights))
    return T.scale(T.tensor_sum(weighted), 1.0 / batch)


@dataclass
class ChunkDataset:
    obs: np.ndarray          # (N, obs_dim)
    actions: np.ndarray      # (N, horizon)
    gains: np.ndarray        # (N,)
    episode_ids: list[str]
    starts: np.ndarray       # (N,) chunk start frames
    mean_length: float


def build_chunks(store: EpisodeStore, curves: dict[str, np.ndarray] | None,
                 config: PolicyConfig,
                 episode_ids: list[str] | None = None) -> ChunkDataset:
    """Assemble (observation, action-chunk, gain) training rows.

    `curves` maps episode id to a full-rate progress curve; None uses the
    stored ground truth directly (oracle mode). Short tail chunks are
    padded with noop actions.
    """
    if episode_ids is None:
        episode_ids = store.episode_ids()
    horizon = config.horizon
    lengths = [store.manifest_record(i)["length"] for i in episode_ids]
    mean_length = float(np.mean(lengths))
    obs_rows, act_rows, gain_rows, ids, starts = [], [], [], [], []
    for episode_id in episode_ids:
        episode = store.read_episode(episode_id)
        length = len(episode)
        if curves is None:
            if np.isnan(episode.gt).any():
                raise ValidationError(
                    f"episode {episode_id!r} lacks gt for oracle gains")
            p = episode.gt.astype(np.float64)
        else:
            if episode_id not in curves:
                raise ValidationError(f"no curve for episode {episode_id!r}")
            p = np.asarray(curves[episode_id], dtype=np.float64)
            if p.shape[0] != length:
                raise ValidationError(
                    f"curve for {episode_id!r} has wrong length")
        chunk_gains = gains(p, horizon, length, mean_length)
        obs_all = np.concatenate([episode.vis, episode.proprio], axis=1)
        for t, dg in chunk_gains:
            chunk = episode.actions[t:t + horizon]
            if chunk.shape[0] < horizon:
                pad = np.full(horizon - chunk.shape[0], int(Action.NOOP),
                              dtype=np.int64)
                chunk = np.concatenate([chunk, pad])
            obs_rows.append(obs_all[t].astype(np.float64))
            act_rows.append(chunk)
            gain_rows.append(dg)
            ids.append(episode_id)
            starts.append(t)
    if not obs_rows:
        raise ValidationError("no chunks produced from the store")
    return ChunkDataset(obs=np.stack(obs_rows),
                        actions=np.stack(act_rows).astype(np.int64),
                        gains=np.asarray(gain_rows),
                        episode_ids=ids,
                        starts=np.asarray(starts, dtype=np.int64),
                        mean_length=mean_length)


def compute_gain_weights(data: ChunkDataset, config: PolicyConfig
                         ) -> list[GainWeight]:
    """Dataset-scope gains and weights for export and inspection."""
    g = data.gains
    mu = float(g.mean())
    sigma = float(g.std())
    if config.weighting == "statistical":
        w = weights_statistical(g)
    elif config.weighting == "threshold":
        w = weights_threshold(g, config.threshold_positive)
    else:
        w = np.ones_like(g)
    b_lower, b_upper = mu - 2 * sigma, mu + 2 * sigma
    return [GainWeight(episode_id=data.episode_ids[i], t=int(data.starts[i]),
                       delta_g=float(g[i]), weight=float(w[i]),
                       horizon=config.horizon, length=0,
                       mean_length=data.mean_length, mu=mu, sigma=sigma,
                       b_lower=b_lower, b_upper=b_upper, eps=WEIGHT_EPS)
            for i in range(g.shape[0])]


@dataclass
class PolicyResult:
    policy: PolicyNet
    config: PolicyConfig
    trace: list[tuple[int, float]]
    checkpoint_path: Path | None


def train_policy(config: PolicyConfig, store: EpisodeStore,
                 curves: dict[str, np.ndarray] | None, seed: int,
                 episode_ids: list[str] | None = None,
                 out_path: str | Path | None = None) -> PolicyResult:
    """Behavior cloning under the selected weighting mode.

    `curves` as in `build_chunks`; mode "none" ignores gains entirely.
    Deterministic given (config, data, seed).
    """
    data = build_chunks(store, curves, config, episode_ids)
    n = data.obs.shape[0]
    seq = np.random.SeedSequence(seed)
    init_seq, order_seq = seq.spawn(2)
    policy = PolicyNet(config, data.obs.shape[1],
                       np.random.default_rng(init_seq))
    rng = np.random.default_rng(order_seq)
    opt = tc.AdamW(policy.named_parameters(), lr=config.lr,
                   weight_decay=config.weight_decay)

    if config.weighting == "threshold":
        fixed_w = weights_threshold(data.gains, config.threshold_positive)
    elif config.weighting == "statistical" and config.batch_scope == "global":
        fixed_w = weights_statistical(data.gains)
    else:
        fixed_w = None

    trace = []
    step_i = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            if idx.shape[0] < 2:
                continue  # batch statistics need at least two samples
            if fixed_w is not None:
                w = fixed_w[idx]
            elif config.weighting == "statistical":
                w = weights_statistical(data.gains[idx])
            else:
                w = np.ones(idx.shape[0])
            opt.zero_grad()
            logits = policy.logits(data.obs[idx])
            loss = awbc_loss(logits, data.actions[idx], w)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite policy loss at step {step_i}")
            loss.backward()
            if config.grad_clip > 0:
                tc.clip_grad_norm(policy.named_parameters(), config.grad_clip)
            opt.step()
            trace.append((step_i, value))
            step_i += 1
    checkpoint_path = None
    if out_path is not None:
        checkpoint_path = Path(out_path)
        save_policy(policy, checkpoint_path)
    return PolicyResult(policy=policy, config=config, trace=trace,
                        checkpoint_path=checkpoint_path)


def save_policy(policy: PolicyNet, path: str | Path) -> str:
    meta = {"kind": "policy", "config": policy.config.to_dict(),
            "obs_dim": policy.obs_dim}
    return tc.save_checkpoint(path, policy.state_dict(), meta)


def load_policy(path: str | Path) -> PolicyNet:
    params, meta, _ = tc.load_checkpoint_file(path)
    if meta.get("kind") != "policy":
        raise ValidationError(f"{path} is not a policy checkpoint")
    config = PolicyConfig.from_dict(meta["config"])
    policy = PolicyNet(config, int(meta["obs_dim"]), np.random.default_rng(0))
    policy.load_state(params)
    return policy


def rollout(policy_fn, sim_config: SimConfig, seed: int,
            horizon: int) -> tuple[bool, int]:
    """One closed-loop episode; returns (succeeded, steps taken).

    `policy_fn` maps a (d_vis + d_state,) observation to a horizon-length
    array of action ids; actions execute open-loop within each chunk.
    """
    state = reset(sim_config, seed)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    obs_builder = ObservationBuilder(sim_config)
    while not state.done:
        obs = np.concatenate([obs_builder.vis(state, rng),
                              obs_builder.proprio(state)]).astype(np.float64)
        chunk = np.asarray(policy_fn(obs), dtype=np.int64)
        for a in chunk[:horizon]:
            state, _ = step(state, Action(int(a)))
            if state.done:
                break
    return state.succeeded, state.step_count


def eval_policy(policy, sim_config: SimConfig, episodes: int,
                base_seed: int) -> tuple[float, float]:
    """Seeded closed-loop evaluation: (success rate, mean steps to success).

    `policy` is a PolicyNet or a bare obs -> action-chunk callable.
    """
    if episodes < 1:
        raise ValidationError("need at least one evaluation episode")
    if isinstance(policy, PolicyNet):
        horizon = policy.config.horizon
        policy_fn = policy.act
    else:
        horizon = None
        policy_fn = policy
    successes = 0
    steps_acc = []
    for i in range(episodes):
        seed = int(np.random.SeedSequence([base_seed, i]).generate_state(1)[0])
        chunk_h = horizon
        if chunk_h is None:
            probe = policy_fn(np.zeros(
                sim_config.feature_dim + sim_config.proprio_dim))
            chunk_h = np.asarray(probe).shape[0]
        ok, steps = rollout(policy_fn, sim_config, seed, chunk_h)
        if ok:
            successes += 1
            steps_acc.append(steps)
    rate = successes / episodes
    mean_steps = float(np.mean(steps_acc)) if steps_acc else float("nan")
    return rate, mean_steps


def export_gain_weights_csv(rows: list[GainWeight], path: str | Path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode_id", "t", "delta_g", "weight", "horizon",
                         "mean_length", "mu", "sigma", "b_lower", "b_upper"])
        for r in rows:
            writer.writerow([r.episode_id, r.t, repr(r.delta_g),
                             repr(r.weight), r.horizon, repr(r.mean_length),
                             repr(r.mu), repr(r.sigma), repr(r.b_lower),
                             repr(r.b_upper)])
