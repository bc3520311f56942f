"""Episode rollouts and advantage actor-critic training (sync and async)."""

from __future__ import annotations

import hashlib
import itertools
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .model import SSNetPolicy, ZSBaselinePolicy, act
from .reward import RewardConfig, RewardState, semantic_reward
from .semantic import ClassSplit, EmbeddingTable
from .world import (
    Action,
    GridWorld,
    Pose,
    WorldSpec,
    gen_world,
    step,
    success_check,
    visible_classes,
)


def derive_seed(master: int, *keys) -> int:
    """Counter-style 63-bit seed derived from ``master`` and a key path."""
    text = "/".join([str(int(master))] + [str(k) for k in keys])
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little") >> 1


def world_pool_seeds(world_seed: int, n_train: int, n_test: int) -> tuple[list[int], list[int]]:
    seeds = [derive_seed(world_seed, "world", i) for i in range(n_train + n_test)]
    train, test = seeds[:n_train], seeds[n_train:]
    assert not set(train) & set(test)
    return train, test


def world_pool(
    world_seed: int,
    n_train: int,
    n_test: int,
    spec: WorldSpec,
    split: ClassSplit,
    table: EmbeddingTable,
) -> tuple[list[GridWorld], list[GridWorld]]:
    train, test = world_pool_seeds(world_seed, n_train, n_test)
    return (
        [gen_world(s, spec, split, table) for s in train],
        [gen_world(s, spec, split, table) for s in test],
    )


@dataclass
class TrainConfig:
    split: ClassSplit
    embeddings: EmbeddingTable
    episodes_total: int = 50_000
    max_steps: int = 50
    gamma: float = 0.99
    entropy_weight: float = 0.01
    value_weight: float = 0.5
    n_workers: int = 1
    lr: float = 1e-4
    optimizer: str = "adam"
    grad_clip: float = 40.0
    seed: int = 0
    world_seed: int = 0
    n_train_worlds: int = 8
    world_spec: WorldSpec = field(default_factory=WorldSpec)
    reward: RewardConfig = field(default_factory=RewardConfig)
    model: str = "ssnet"
    use_attention: bool = True
    d_in: int = 16
    d_k: int = 16
    d_out: int = 16
    hidden: int = 64
    log_every: int = 500
    log_wall_time: bool = True
    train_worlds: Sequence[GridWorld] | None = None

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.episodes_total < 0:
            raise ValueError("episodes_total must be >= 0")
        if self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")
        if self.model not in ("ssnet", "zs_baseline"):
            raise ValueError(f"unknown model kind {self.model!r}")

    def worlds(self) -> list[GridWorld]:
        if self.train_worlds is not None:
            return list(self.train_worlds)
        train, _ = world_pool(self.world_seed, self.n_train_worlds, 0, self.world_spec, self.split, self.embeddings)
        return train


def make_policy(cfg: TrainConfig):
    if cfg.model == "ssnet":
        return SSNetPolicy.create(
            cfg.split, cfg.embeddings, derive_seed(cfg.seed, "init"),
            d_in=cfg.d_in, d_k=cfg.d_k, d_out=cfg.d_out, hidden=cfg.hidden, use_attention=cfg.use_attention,
        )
    return ZSBaselinePolicy.create(cfg.split, cfg.embeddings, derive_seed(cfg.seed, "init"), hidden=cfg.hidden)


# ---------------------------------------------------------------- rollout


@dataclass
class Trajectory:
    observations: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    poses: list = field(default_factory=list)
    world_seed: int = 0
    start: Pose | None = None
    target: str = ""
    success: bool = False
    bootstrap_value: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.actions)

    @property
    def terminated(self) -> bool:
        return bool(self.dones) and self.dones[-1]


RewardFn = Callable[[RewardState, Action, str, list], tuple]


def make_reward_fn(split: ClassSplit, table: EmbeddingTable, cfg: RewardConfig, training: bool = True) -> RewardFn:
    return partial(_reward, split=split, table=table, cfg=cfg, training=training)


def _reward(state, action, target, visible, *, split, table, cfg, training):
    return semantic_reward(state, action, target, visible, split, table, cfg, training)


def rollout(
    world: GridWorld,
    start: Pose,
    target: str,
    policy,
    reward_fn: RewardFn | None,
    max_steps: int,
    rng: np.random.Generator | None = None,
    mode: str = "sample",
) -> Trajectory:
    """Run one episode until Done or ``max_steps`` actions."""
    traj = Trajectory(world_seed=world.seed, start=start, target=target)
    pose = start
    hidden = policy.initial_hidden()
    rstate = RewardState()
    for _ in range(max_steps):
        obs = policy.encode(world, pose, target)
        out = policy.step(obs, hidden)
        action = act(out, mode, rng)
        z = out.logits - out.logits.max()
        logp = float(z[action] - np.log(np.exp(z).sum()))
        nxt, _ = step(world, pose, action)
        done = action is Action.DONE
        if reward_fn is not None:
            r, rstate = reward_fn(rstate, action, target, visible_classes(world, nxt))
        else:
            r = 0.0
        traj.observations.append(obs)
        traj.actions.append(int(action))
        traj.log_probs.append(logp)
        traj.values.append(out.value)
        traj.rewards.append(float(r))
        traj.dones.append(done)
        traj.poses.append(pose)
        hidden = out.hidden
        pose = nxt
        if done:
            traj.success = success_check(world, pose, target)
            break
    else:
        if getattr(policy, "params", None) is not None:
            traj.bootstrap_value = policy.step(policy.encode(world, pose, target), hidden).value
    traj.poses.append(pose)
    return traj


# ---------------------------------------------------------------- losses


def discounted_returns(rewards: Sequence[float], gamma: float, bootstrap: float = 0.0) -> np.ndarray:
    out = np.empty(len(rewards))
    running = bootstrap
    for t in reversed(range(len(rewards))):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def entropy(logits: T.Tensor) -> T.Tensor:
    """Per-row entropy of softmax(logits)."""
    logp = T.log_softmax(logits, axis=-1)
    p = T.softmax(logits, axis=-1)
    return T.neg(T.sum(p * logp, axis=-1))


def a2c_loss(
    logits: T.Tensor,
    values: T.Tensor,
    actions: Sequence[int],
    rewards: Sequence[float],
    gamma: float,
    entropy_weight: float,
    value_weight: float,
    bootstrap: float = 0.0,
    advantages: np.ndarray | None = None,
) -> T.Tensor:
    """sum_t [-log pi(a_t) A_t + w_v (R_t - V_t)^2 - beta H_t] with A_t held constant.

    ``advantages`` pins A_t to given values instead of R_t - V_t; finite
    difference checks need this, since the stop-gradient is invisible to a
    perturbed loss value.
    """
    n = len(actions)
    if n == 0:
        raise ValueError("empty trajectory")
    returns = discounted_returns(rewards, gamma, bootstrap)
    if advantages is None:
        advantages = returns - values.data
    logp = T.log_softmax(logits, axis=-1)
    chosen = logp[np.arange(n), np.asarray(actions)]
    policy_loss = T.neg(T.sum(chosen * advantages))
    value_loss = T.mul(T.sum(T.square(T.sub(returns, values))), value_weight)
    ent = T.sum(entropy(logits))
    return policy_loss + value_loss - T.mul(ent, entropy_weight)


def compute_losses(
    traj: Trajectory, policy, gamma: float, beta: float, value_weight: float, advantages: np.ndarray | None = None
) -> T.Tensor:
    if traj.steps == 0:
        raise ValueError("empty trajectory")
    logits, values = policy.unroll(traj.observations)
    bootstrap = 0.0 if traj.terminated else traj.bootstrap_value
    return a2c_loss(logits, values, traj.actions, traj.rewards, gamma, beta, value_weight, bootstrap, advantages)


def advantages_of(traj: Trajectory, policy, gamma: float) -> np.ndarray:
    """R_t - V(s_t) under the current parameters, as plain numbers."""
    with T.no_grad():
        _, values = policy.unroll(traj.observations)
    bootstrap = 0.0 if traj.terminated else traj.bootstrap_value
    return discounted_returns(traj.rewards, gamma, bootstrap) - values.data


# ---------------------------------------------------------------- sampling


def sample_start(world: GridWorld, rng: np.random.Generator) -> Pose:
    free = world.free_cells()
    x, y = free[int(rng.integers(len(free)))]
    return Pose(x, y, int(rng.integers(8)), 0)


def curriculum_sampler(
    seed: int,
    split: ClassSplit,
    world_spec: WorldSpec,
    episodes_total: int,
    embeddings: EmbeddingTable | None = None,
    worlds: Sequence[GridWorld] | None = None,
    n_train_worlds: int = 8,
    world_seed: int | None = None,
) -> Iterator[tuple[GridWorld, Pose, str]]:
    """Deterministic stream of (world, start pose, seen target) training episodes."""
    if worlds is None:
        worlds, _ = world_pool(seed if world_seed is None else world_seed, n_train_worlds, 0, world_spec, split, embeddings)
    worlds = list(worlds)
    targets = [sorted(c for c in w.classes() if c in split.seen) for w in worlds]
    if not any(targets):
        raise ValueError("no seen class is placed in any training world")
    rng = np.random.default_rng(derive_seed(seed, "curriculum"))
    emitted = 0
    while emitted < episodes_total:
        i = int(rng.integers(len(worlds)))
        if not targets[i]:
            continue
        target = targets[i][int(rng.integers(len(targets[i])))]
        yield worlds[i], sample_start(worlds[i], rng), target
        emitted += 1


# ---------------------------------------------------------------- training


@dataclass
class LogRow:
    episode: int
    moving_avg_return: float
    moving_avg_success: float
    wall_seconds: float
    param_version: int

    def csv(self, wall: bool = True) -> str:
        w = f"{self.wall_seconds:.3f}" if wall else "0"
        return f"{self.episode},{self.moving_avg_return:.6f},{self.moving_avg_success:.6f},{w},{self.param_version}"


@dataclass
class TrainResult:
    policy: object
    optimizer: object
    log: list
    target_counts: Counter
    config: TrainConfig

    def log_text(self) -> str:
        lines = ["# " + line for line in config_header(self.config)]
        lines.append("episode,moving_avg_return,moving_avg_success,wall_seconds,param_version")
        lines += [row.csv(self.config.log_wall_time) for row in self.log]
        return "\n".join(lines) + "\n"


def config_header(cfg: TrainConfig) -> list[str]:
    keys = (
        "model", "use_attention", "episodes_total", "max_steps", "gamma", "entropy_weight", "value_weight",
        "n_workers", "lr", "optimizer", "grad_clip", "seed", "world_seed", "n_train_worlds",
        "d_in", "d_k", "d_out", "hidden",
    )
    out = [f"{k} = {getattr(cfg, k)}" for k in keys]
    out += [f"reward.{k} = {v}" for k, v in vars(cfg.reward).items()]
    return out


class _Logger:
    def __init__(self, every: int):
        self.every = max(1, every)
        self.rows: list[LogRow] = []
        self.returns: list[float] = []
        self.successes: list[float] = []
        self.start = time.perf_counter()

    def record(self, episode: int, ret: float, success: bool, version: int) -> None:
        self.returns.append(ret)
        self.successes.append(float(success))
        if episode % self.every == 0:
            self.rows.append(
                LogRow(
                    episode,
                    float(np.mean(self.returns[-self.every :])),
                    float(np.mean(self.successes[-self.every :])),
                    time.perf_counter() - self.start,
                    version,
                )
            )


def _episode_grads(cfg: TrainConfig, policy, world, start, target, reward_fn, rng):
    traj = rollout(world, start, target, policy, reward_fn, cfg.max_steps, rng)
    policy.params.zero_grad()
    loss = compute_losses(traj, policy, cfg.gamma, cfg.entropy_weight, cfg.value_weight)
    T.backward(loss)
    grads = policy.params.grads()
    if cfg.grad_clip > 0:
        T.clip_grad_norm(grads, cfg.grad_clip)
    return traj, grads


def train(
    cfg: TrainConfig,
    policy=None,
    on_log: Callable[[LogRow], None] | None = None,
    episodes: Iterable[tuple[GridWorld, Pose, str]] | None = None,
) -> TrainResult:
    """Train a policy; ``n_workers == 1`` is fully deterministic in ``cfg.seed``.

    ``episodes`` replaces the curriculum stream (sync mode only); it is cut
    off at ``cfg.episodes_total``.
    """
    policy = make_policy(cfg) if policy is None else policy
    optimizer = T.make_optimizer(cfg.optimizer, cfg.lr)
    reward_fn = make_reward_fn(cfg.split, cfg.embeddings, cfg.reward)
    worlds = cfg.worlds() if episodes is None else []
    logger = _Logger(cfg.log_every)
    counts: Counter = Counter()

    if episodes is not None and cfg.n_workers != 1:
        raise ValueError("an explicit episode stream needs n_workers == 1")
    if cfg.n_workers == 1:
        rng = np.random.default_rng(derive_seed(cfg.seed, "actions"))
        if episodes is None:
            stream = curriculum_sampler(cfg.seed, cfg.split, cfg.world_spec, cfg.episodes_total, worlds=worlds)
        else:
            stream = itertools.islice(episodes, cfg.episodes_total)
        for ep, (world, start, target) in enumerate(stream, 1):
            traj, grads = _episode_grads(cfg, policy, world, start, target, reward_fn, rng)
            T.apply_update(policy.params, grads, optimizer)
            counts[target] += 1
            logger.record(ep, float(np.sum(traj.rewards)), traj.success, policy.params.version)
            if on_log and logger.rows and logger.rows[-1].episode == ep:
                on_log(logger.rows[-1])
    else:
        _train_async(cfg, policy, optimizer, reward_fn, worlds, logger, counts, on_log)
    return TrainResult(policy, optimizer, logger.rows, counts, cfg)


def _train_async(cfg, policy, optimizer, reward_fn, worlds, logger, counts, on_log):
    """A3C-style: workers roll out on parameter snapshots, updates are applied one at a time."""
    lock = threading.Lock()
    shared = policy.params
    per_worker = [cfg.episodes_total // cfg.n_workers + (w < cfg.episodes_total % cfg.n_workers) for w in range(cfg.n_workers)]
    finished = [0]
    errors: list[BaseException] = []

    def work(w: int) -> None:
        try:
            rng = np.random.default_rng(derive_seed(cfg.seed, "actions", w))
            stream = curriculum_sampler(derive_seed(cfg.seed, "worker", w), cfg.split, cfg.world_spec, per_worker[w], worlds=worlds)
            for world, start, target in stream:
                with lock:
                    local = policy.with_params(shared.snapshot())
                traj, grads = _episode_grads(cfg, local, world, start, target, reward_fn, rng)
                with lock:
                    T.apply_update(shared, grads, optimizer)
                    finished[0] += 1
                    counts[target] += 1
                    logger.record(finished[0], float(np.sum(traj.rewards)), traj.success, shared.version)
                    if on_log and logger.rows and logger.rows[-1].episode == finished[0]:
                        on_log(logger.rows[-1])
        except BaseException as exc:  # surfaced after join
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(w,), daemon=True) for w in range(cfg.n_workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
