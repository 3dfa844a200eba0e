"""Seeded simulator of a long-horizon multi-stage manipulation task.

The task is a chain of ``num_stages`` stages, each completed by a fixed
number of unit advances. Ground-truth progress is tracked exactly as an
integer unit count, so progress values are exact rationals and scripted
demonstrators are reproducible bit-for-bit from (config, seed).

Demonstrator kinds:
  expert          monotone advances to completion
  sluggish        completes, but with idle (noop) runs along the way
  error_recovery  completes after at least one deep regression + recovery
  failure         gets stuck thrashing at a hard stage and never finishes
  dagger_fragment corrective snippet starting mid-task, truncated
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum, IntEnum

import numpy as np

from .errors import ConfigurationError, UsageError, ValidationError

# Success threshold on ground-truth progress: done when gt >= 1 - DONE_EPS.
DONE_EPS = 1e-3


class Action(IntEnum):
    ADVANCE = 0
    RETREAT = 1
    NOOP = 2


class Source(str, Enum):
    EXPERT = "expert"
    SLUGGISH = "sluggish"
    ERROR_RECOVERY = "error_recovery"
    FAILURE = "failure"
    DAGGER_FRAGMENT = "dagger_fragment"


class Outcome(str, Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class SimConfig:
    num_stages: int = 8
    max_steps: int = 800
    advance_delta: float = 0.0125
    regress_prob: float = 0.25
    regress_depth: float = 0.05
    stagnate_prob: float = 0.15
    feature_dim: int = 32
    proprio_dim: int = 13
    noise_std: float = 0.05
    projection_seed: int = 1234

    def __post_init__(self) -> None:
        if self.num_stages < 1:
            raise ConfigurationError("num_stages must be >= 1")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")
        if self.advance_delta <= 0:
            raise ConfigurationError("advance_delta must be > 0")
        ups = round(1.0 / self.advance_delta)
        if ups < 1 or abs(ups * self.advance_delta - 1.0) > 1e-9:
            # Integer units per stage keep progress arithmetic exact.
            raise ConfigurationError(
                "advance_delta must divide a stage into an integer number of steps"
            )
        if not 0.0 <= self.regress_prob <= 1.0:
            raise ConfigurationError("regress_prob must lie in [0, 1]")
        if not 0.0 <= self.stagnate_prob <= 1.0:
            raise ConfigurationError("stagnate_prob must lie in [0, 1]")
        if self.regress_depth <= 0 or self.regress_depth >= 1:
            raise ConfigurationError("regress_depth must lie in (0, 1)")
        if self.feature_dim < 1 or self.proprio_dim < 1:
            raise ConfigurationError("feature_dim and proprio_dim must be >= 1")
        if self.proprio_dim != self.num_stages + 5:
            # Layout: [stage one-hot | sub progress | last-action one-hot | time].
            raise ConfigurationError(
                f"proprio_dim must equal num_stages + 5 = {self.num_stages + 5}"
            )
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")

    @property
    def units_per_stage(self) -> int:
        return round(1.0 / self.advance_delta)

    @property
    def total_units(self) -> int:
        return self.num_stages * self.units_per_stage


@dataclass(frozen=True)
class SimState:
    """Immutable snapshot of the task; progress is an exact unit count."""

    config: SimConfig
    progress_units: int
    step_count: int
    rng_state: dict
    done: bool
    succeeded: bool
    last_action: Action | None = None

    @property
    def stage_index(self) -> int:
        return min(self.progress_units // self.config.units_per_stage,
                   self.config.num_stages - 1)

    @property
    def sub_progress(self) -> tuple[float, ...]:
        ups = self.config.units_per_stage
        out = []
        for s in range(self.config.num_stages):
            in_stage = min(max(self.progress_units - s * ups, 0), ups)
            out.append(in_stage / ups)
        return tuple(out)

    @property
    def gt_progress(self) -> float:
        return self.progress_units / self.config.total_units


def reset(config: SimConfig, seed: int) -> SimState:
    rng_state = np.random.default_rng(seed).bit_generator.state
    return SimState(config=config, progress_units=0, step_count=0,
                    rng_state=rng_state, done=False, succeeded=False,
                    last_action=None)


def step(state: SimState, action: Action) -> tuple[SimState, float]:
    """Apply one action; returns the successor state and its gt progress."""
    if state.done:
        raise UsageError("cannot step a done state")
    cfg = state.config
    units = state.progress_units
    if action == Action.ADVANCE:
        units = min(units + 1, cfg.total_units)
    elif action == Action.RETREAT:
        units = max(units - 1, 0)
    elif action != Action.NOOP:
        raise UsageError(f"unknown action {action!r}")
    steps = state.step_count + 1
    succeeded = units == cfg.total_units
    done = succeeded or steps >= cfg.max_steps
    new = replace(state, progress_units=units, step_count=steps,
                  done=done, succeeded=succeeded, last_action=Action(action))
    return new, new.gt_progress


class ObservationBuilder:
    """Maps states to frame features.

    Visual features are a fixed random linear projection (seeded by
    ``projection_seed``) of the one-hot stage + current sub-progress
    vector, plus per-frame Gaussian noise. Proprioception is the clean
    channel: stage one-hot, sub progress, last-action one-hot, and the
    normalized step count.
    """

    def __init__(self, config: SimConfig):
        self.config = config
        z_dim = config.num_stages + 1
        rng = np.random.default_rng(config.projection_seed)
        self.projection = rng.normal(0.0, 1.0 / math.sqrt(z_dim),
                                     size=(config.feature_dim, z_dim))

    def state_vector(self, state: SimState) -> np.ndarray:
        z = np.zeros(self.config.num_stages + 1)
        z[state.stage_index] = 1.0
        z[-1] = state.sub_progress[state.stage_index]
        return z

    def vis(self, state: SimState, rng: np.random.Generator) -> np.ndarray:
        feat = self.projection @ self.state_vector(state)
        if self.config.noise_std > 0:
            feat = feat + rng.normal(0.0, self.config.noise_std,
                                     size=self.config.feature_dim)
        return feat.astype(np.float32)

    def proprio(self, state: SimState) -> np.ndarray:
        cfg = self.config
        out = np.zeros(cfg.proprio_dim, dtype=np.float32)
        out[state.stage_index] = 1.0
        out[cfg.num_stages] = state.sub_progress[state.stage_index]
        if state.last_action is not None:
            out[cfg.num_stages + 1 + int(state.last_action)] = 1.0
        out[-1] = state.step_count / cfg.max_steps
        return out


@dataclass(frozen=True)
class Frame:
    t: int
    vis_feat: np.ndarray
    proprio: np.ndarray
    action: Action
    gt_progress: float | None


@dataclass
class Episode:
    """A recorded trajectory; frame data is stored column-wise."""

    id: str
    instruction_id: int
    source: Source
    outcome: Outcome
    vis: np.ndarray       # (L, feature_dim) float32
    proprio: np.ndarray   # (L, proprio_dim) float32
    actions: np.ndarray   # (L,) int64
    gt: np.ndarray        # (L,) float32, NaN where ground truth is absent

    def __len__(self) -> int:
        return self.vis.shape[0]

    @property
    def length(self) -> int:
        return len(self)

    def frame(self, t: int) -> Frame:
        gt = float(self.gt[t])
        return Frame(t=t, vis_feat=self.vis[t], proprio=self.proprio[t],
                     action=Action(int(self.actions[t])),
                     gt_progress=None if math.isnan(gt) else gt)

    @property
    def frames(self) -> list[Frame]:
        return [self.frame(t) for t in range(len(self))]

    def has_gt(self) -> bool:
        return not np.isnan(self.gt).any()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        return (self.id == other.id
                and self.instruction_id == other.instruction_id
                and self.source == other.source
                and self.outcome == other.outcome
                and np.array_equal(self.vis, other.vis)
                and np.array_equal(self.proprio, other.proprio)
                and np.array_equal(self.actions, other.actions)
                and np.array_equal(self.gt, other.gt, equal_nan=True))


def _hard_stages(num_stages: int) -> list[int]:
    # Stages where demonstrators stall or regress; entry stays <= 0.8 of gt.
    upper = int(0.78 * num_stages)
    stages = [s for s in range(2, upper + 1, 2)]
    return stages or [min(max(num_stages // 2, 0), num_stages - 1)]


class _Recorder:
    def __init__(self, config: SimConfig, state: SimState,
                 rng: np.random.Generator):
        self.config = config
        self.state = state
        self.rng = rng
        self.obs = ObservationBuilder(config)
        self.vis: list[np.ndarray] = []
        self.proprio: list[np.ndarray] = []
        self.actions: list[int] = []
        self.gt: list[float] = []

    def emit(self, action: Action) -> None:
        """Record the current frame with `action`, then apply it."""
        self.vis.append(self.obs.vis(self.state, self.rng))
        self.proprio.append(self.obs.proprio(self.state))
        self.actions.append(int(action))
        self.gt.append(self.state.gt_progress)
        self.state, _ = step(self.state, action)

    def emit_terminal(self) -> None:
        """Record a final observation-only frame (action slot = noop)."""
        self.vis.append(self.obs.vis(self.state, self.rng))
        self.proprio.append(self.obs.proprio(self.state))
        self.actions.append(int(Action.NOOP))
        self.gt.append(self.state.gt_progress)

    def burn_in(self, action: Action) -> None:
        self.state, _ = step(self.state, action)

    @property
    def units(self) -> int:
        return self.state.progress_units

    @property
    def budget(self) -> int:
        return self.config.max_steps - self.state.step_count

    def build(self, episode_id: str, instruction_id: int, source: Source,
              outcome: Outcome) -> Episode:
        return Episode(
            id=episode_id, instruction_id=instruction_id, source=source,
            outcome=outcome,
            vis=np.stack(self.vis).astype(np.float32),
            proprio=np.stack(self.proprio).astype(np.float32),
            actions=np.asarray(self.actions, dtype=np.int64),
            gt=np.asarray(self.gt, dtype=np.float32),
        )


def _gen_expert(rec: _Recorder, cfg: SimConfig) -> None:
    while not rec.state.done:
        rec.emit(Action.ADVANCE)
    rec.emit_terminal()


def _gen_sluggish(rec: _Recorder, cfg: SimConfig) -> None:
    hard = set(_hard_stages(cfg.num_stages))
    ups = cfg.units_per_stage
    run = 0
    while not rec.state.done:
        needed = cfg.total_units - rec.units
        if needed + 4 >= rec.budget:
            run = 0
            rec.emit(Action.ADVANCE)
            continue
        if run > 0:
            run -= 1
            rec.emit(Action.NOOP)
            continue
        p = cfg.stagnate_prob
        # Idle runs cluster near the entry of hard stages.
        if rec.state.stage_index in hard and rec.units % ups < 6:
            p = min(1.0, 3.0 * p)
        if rec.rng.random() < p / 4.0:
            run = 3 + int(rec.rng.geometric(0.3))
            run = min(run, 12)
            rec.emit(Action.NOOP)
        else:
            rec.emit(Action.ADVANCE)
    rec.emit_terminal()


def _gen_error_recovery(rec: _Recorder, cfg: SimConfig) -> None:
    hard = _hard_stages(cfg.num_stages)
    forced = int(rec.rng.choice(hard))
    # One extra unit keeps the dip depth >= regress_depth at f32 resolution.
    depth = math.ceil(cfg.regress_depth * cfg.total_units) + 1
    ups = cfg.units_per_stage
    has_dip = False
    while not rec.state.done:
        pos = rec.units
        at_entry = pos % ups == 0 and (pos // ups) in hard and pos > depth
        if at_entry:
            stage = pos // ups
            # Guarantee at least one dip: force it at the chosen stage, or
            # at the last hard entry if chance produced none earlier.
            must = not has_dip and (stage == forced or stage == hard[-1])
            want = must or rec.rng.random() < cfg.regress_prob
            needed = (cfg.total_units - pos) + 2 * depth + 8
            if want and rec.budget > needed:
                for _ in range(depth):
                    rec.emit(Action.RETREAT)
                for _ in range(depth):
                    rec.emit(Action.ADVANCE)
                has_dip = True
        rec.emit(Action.ADVANCE)
    rec.emit_terminal()


def _gen_failure(rec: _Recorder, cfg: SimConfig) -> None:
    """Stuck at a hard stage: repeated attempts that slip back at the same
    barrier point, never committing past it."""
    hard = _hard_stages(cfg.num_stages)
    stuck = int(rec.rng.choice(hard))
    entry = stuck * cfg.units_per_stage
    barrier = entry + 3
    while not rec.state.done and rec.units < entry:
        rec.emit(Action.ADVANCE)
    thrash = int(rec.rng.integers(250, 400))
    end_step = min(rec.state.step_count + thrash, cfg.max_steps - 1)
    while not rec.state.done and rec.state.step_count < end_step:
        if rec.units < barrier:
            rec.emit(Action.ADVANCE)
            continue
        # the attempt fails at the barrier: slip back below the entry
        slip = 3 + int(rec.rng.integers(0, 4))
        for _ in range(slip):
            if rec.state.done or rec.state.step_count >= end_step:
                break
            if rec.units > 0:
                rec.emit(Action.RETREAT)
        for _ in range(int(rec.rng.integers(0, 3))):
            if rec.state.done or rec.state.step_count >= end_step:
                break
            rec.emit(Action.NOOP)
    rec.emit_terminal()


def _gen_dagger_fragment(rec: _Recorder, cfg: SimConfig) -> None:
    total = cfg.total_units
    start = int(rec.rng.integers(int(0.15 * total), int(0.7 * total)))
    while rec.units < start:
        rec.burn_in(Action.ADVANCE)
    depth = int(rec.rng.integers(8, 25))
    depth = min(depth, rec.units - 1)
    for _ in range(depth):
        rec.emit(Action.RETREAT)
    overshoot = int(rec.rng.integers(10, 41))
    end_units = min(start + overshoot, total - 2)
    while rec.units < end_units and not rec.state.done:
        rec.emit(Action.ADVANCE)
    # Truncate without a terminal frame.


_GENERATORS = {
    Source.EXPERT: _gen_expert,
    Source.SLUGGISH: _gen_sluggish,
    Source.ERROR_RECOVERY: _gen_error_recovery,
    Source.FAILURE: _gen_failure,
    Source.DAGGER_FRAGMENT: _gen_dagger_fragment,
}

_SOURCE_ORDER = [Source.EXPERT, Source.SLUGGISH, Source.ERROR_RECOVERY,
                 Source.FAILURE, Source.DAGGER_FRAGMENT]


def gen_episode(config: SimConfig, kind: Source | str, seed: int,
                episode_id: str | None = None,
                instruction_id: int = 0) -> Episode:
    kind = Source(kind)
    state = reset(config, seed)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    rec = _Recorder(config, state, rng)
    _GENERATORS[kind](rec, config)
    final_gt = rec.gt[-1]
    if kind == Source.DAGGER_FRAGMENT:
        outcome = Outcome.UNKNOWN
    elif final_gt >= 1.0 - DONE_EPS:
        outcome = Outcome.SUCCESS
    else:
        outcome = Outcome.FAILURE
    if episode_id is None:
        episode_id = f"{kind.value}-{seed}"
    return rec.build(episode_id, instruction_id, kind, outcome)


def episode_seed(base_seed: int, kind: Source | str, index: int) -> int:
    kind_idx = _SOURCE_ORDER.index(Source(kind))
    seq = np.random.SeedSequence([base_seed, kind_idx, index])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def gen_dataset(spec: dict[Source | str, int], base_seed: int,
                config: SimConfig | None = None) -> list[Episode]:
    """Generate a deterministic multiset of episodes.

    `spec` maps source kind to episode count; per-episode seeds derive
    from (base seed, kind, index).
    """
    config = config or SimConfig()
    counts = {Source(k): int(v) for k, v in spec.items()}
    for kind, n in counts.items():
        if n < 0:
            raise ValidationError(f"negative count for {kind.value}")
    episodes = []
    for kind in _SOURCE_ORDER:
        for i in range(counts.get(kind, 0)):
            seed = episode_seed(base_seed, kind, i)
            episodes.append(gen_episode(config, kind, seed,
                                        episode_id=f"{kind.value}-{i:04d}"))
    return episodes


def render_frame(state: SimState, size: int = 128) -> np.ndarray:
    """Deterministic RGB raster of per-stage progress bars."""
    if size < 32:
        raise ValidationError("render size must be >= 32 pixels")
    img = np.full((size, size, 3), 24, dtype=np.uint8)
    num = state.config.num_stages
    margin = max(size // 16, 2)
    inner_w = size - 2 * margin
    slot_h = (size - 2 * margin) // num
    bar_h = max(slot_h - 2, 1)
    sub = state.sub_progress
    for s in range(num):
        y0 = margin + s * slot_h
        y1 = y0 + bar_h
        x0 = margin
        img[y0:y1, x0:x0 + inner_w] = (70, 70, 70)
        fill = int(round(sub[s] * inner_w))
        if fill > 0:
            img[y0:y1, x0:x0 + fill] = (90, 180, 110)
        if s == state.stage_index and not state.done:
            img[y0:y1, x0] = (200, 200, 90)
    return img


def render_frame_from_proprio(proprio: np.ndarray, config: SimConfig,
                              size: int = 128) -> np.ndarray:
    """Rebuild the raster for a stored frame from its clean state channel."""
    num = config.num_stages
    stage = int(np.argmax(proprio[:num]))
    sub_cur = float(proprio[num])
    units = round((stage + sub_cur) * config.units_per_stage)
    state = SimState(config=config, progress_units=units,
                     step_count=int(round(float(proprio[-1]) * config.max_steps)),
                     rng_state={}, done=False, succeeded=False)
    return render_frame(state, size)
