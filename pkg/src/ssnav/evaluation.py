"""Held-out evaluation: SR / SPL with optimal-path-length buckets, split by seen/unseen."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .model import act
from .semantic import ClassSplit
from .training import derive_seed, sample_start
from .world import Action, GridWorld, Pose, Unreachable, shortest_path_length, step, success_check

BUCKETS = (1, 5)
GROUPS = ("unseen", "seen", "all")
EPISODE_FIELDS = (
    "index", "group", "target", "world_seed", "x", "y", "heading", "tilt",
    "success", "path_length", "optimal_length", "actions",
)


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    path_length: int
    optimal_length: int
    target: str
    group: str
    world_seed: int = 0
    start: Pose = Pose(0, 0)
    actions: tuple = ()

    def __post_init__(self):
        if self.path_length < 0 or self.optimal_length < 0:
            raise ValueError("path lengths must be non-negative")
        if self.success and self.path_length < self.optimal_length:
            raise ValueError("successful episode shorter than the optimal path")


def success_rate(results: Sequence[EpisodeResult]) -> float:
    if not results:
        raise ValueError("success rate of an empty result list")
    return 100.0 * sum(r.success for r in results) / len(results)


def spl(results: Sequence[EpisodeResult]) -> float:
    """100 * mean of S_i * l_i / max(l_i, e_i); a success with l_i = 0 scores 1."""
    if not results:
        raise ValueError("SPL of an empty result list")
    total = 0.0
    for r in results:
        if not r.success:
            continue
        total += 1.0 if r.optimal_length == 0 else r.optimal_length / max(r.optimal_length, r.path_length)
    return 100.0 * total / len(results)


def bucket(results: Iterable[EpisodeResult], threshold: int) -> list[EpisodeResult]:
    return [r for r in results if r.optimal_length >= threshold]


@dataclass(frozen=True)
class Cell:
    sr: float
    spl: float
    n: int


@dataclass
class MetricsReport:
    cells: dict = field(default_factory=dict)  # (group, threshold) -> Cell | None

    def __getitem__(self, key: tuple[str, int]) -> Cell | None:
        return self.cells[key]

    def to_csv(self) -> str:
        lines = ["group,bucket,SR,SPL,N"]
        for (group, th), cell in self.cells.items():
            if cell is None:
                lines.append(f"{group},L>={th},,,0")
            else:
                lines.append(f"{group},L>={th},{cell.sr:.4f},{cell.spl:.4f},{cell.n}")
        return "\n".join(lines) + "\n"

    def to_text(self, title: str = "") -> str:
        groups = [g for g in GROUPS if any(k[0] == g for k in self.cells)]
        head1 = f"{'':<10}" + "".join(f"{g + ' classes':^36}" for g in groups)
        head2 = f"{'':<10}" + "".join(f"{'L>=' + str(th):^18}" for g in groups for th in BUCKETS)
        head3 = f"{'':<10}" + "".join(f"{'SR(%)':>9}{'SPL(%)':>9}" for _ in groups for _ in BUCKETS)
        row = f"{title[:10]:<10}"
        for g in groups:
            for th in BUCKETS:
                cell = self.cells.get((g, th))
                row += f"{'-':>9}{'-':>9}" if cell is None else f"{cell.sr:>9.1f}{cell.spl:>9.1f}"
        counts = f"{'N':<10}" + "".join(
            f"{('-' if self.cells.get((g, th)) is None else str(self.cells[(g, th)].n)):>18}"
            for g in groups for th in BUCKETS
        )
        return "\n".join([head1, head2, head3, row, counts]) + "\n"


def report(results: Sequence[EpisodeResult], split: ClassSplit | None = None) -> MetricsReport:
    """Fill every (group, bucket) cell; empty cells are ``None``, not zero."""
    by_group = {
        "seen": [r for r in results if r.group == "seen"],
        "unseen": [r for r in results if r.group == "unseen"],
        "all": list(results),
    }
    rep = MetricsReport()
    for group in GROUPS:
        for th in BUCKETS:
            sub = bucket(by_group[group], th)
            rep.cells[(group, th)] = Cell(success_rate(sub), spl(sub), len(sub)) if sub else None
    return rep


# ---------------------------------------------------------------- running


def run_episode(world: GridWorld, start: Pose, target: str, policy, max_steps: int, mode: str, rng) -> tuple[bool, list[int]]:
    pose = start
    hidden = policy.initial_hidden()
    actions: list[int] = []
    for _ in range(max_steps):
        out = policy.step(policy.encode(world, pose, target), hidden)
        a = act(out, mode, rng)
        actions.append(int(a))
        if a is Action.DONE:
            return success_check(world, pose, target), actions
        hidden = out.hidden
        pose, _ = step(world, pose, a)
    return False, actions


def sample_episode(worlds: Sequence[GridWorld], classes: Sequence[str], rng: np.random.Generator, max_tries: int = 1000):
    """Draw (world, start, target, optimal length) with the target present, reachable and l >= 1."""
    for _ in range(max_tries):
        world = worlds[int(rng.integers(len(worlds)))]
        present = sorted(c for c in world.classes() if c in classes)
        if not present:
            continue
        target = present[int(rng.integers(len(present)))]
        start = sample_start(world, rng)
        try:
            length = shortest_path_length(world, start, target)
        except Unreachable:
            continue
        if length >= 1:
            return world, start, target, length
    raise RuntimeError("could not sample a valid evaluation episode")


def run_eval(
    policy,
    split: ClassSplit,
    worlds: Sequence[GridWorld],
    n_episodes: int,
    seed: int,
    mode: str = "greedy",
    groups: Sequence[str] = ("seen", "unseen"),
    max_steps: int = 50,
) -> list[EpisodeResult]:
    """Evaluate ``n_episodes`` per group. Episode i of a group depends only on (seed, group, i)."""
    meta_rows = getattr(policy, "cfg", None)
    if meta_rows is not None and meta_rows.n_rows != len(split.model_classes):
        from .model import CheckpointMismatch

        raise CheckpointMismatch("policy row count differs from the split")
    results = []
    for group in groups:
        classes = split.seen if group == "seen" else split.unseen
        if not classes or n_episodes <= 0:
            continue
        for i in range(n_episodes):
            rng = np.random.default_rng(derive_seed(seed, "eval", group, i))
            world, start, target, length = sample_episode(worlds, classes, rng)
            success, actions = run_episode(world, start, target, policy, max_steps, mode, rng)
            e = sum(1 for a in actions if a != Action.DONE)
            results.append(EpisodeResult(success, e, length, target, group, world.seed, start, tuple(actions)))
    return results


# ---------------------------------------------------------------- episode log


def format_episode(i: int, r: EpisodeResult) -> str:
    acts = "".join(str(a) for a in r.actions)
    return ",".join(
        str(v)
        for v in (
            i, r.group, r.target, r.world_seed, r.start.x, r.start.y, r.start.heading, r.start.tilt,
            int(r.success), r.path_length, r.optimal_length, acts,
        )
    )


def parse_episode(line: str) -> EpisodeResult:
    parts = line.strip().split(",")
    if len(parts) != len(EPISODE_FIELDS):
        raise ValueError(f"episode line has {len(parts)} fields, expected {len(EPISODE_FIELDS)}")
    _, group, target, wseed, x, y, h, t, s, e, l, acts = parts
    return EpisodeResult(
        bool(int(s)), int(e), int(l), target, group, int(wseed), Pose(int(x), int(y), int(h), int(t)),
        tuple(int(c) for c in acts),
    )


def dump_episodes(results: Sequence[EpisodeResult], header: Sequence[str] = ()) -> str:
    lines = [f"# {h}" for h in header] + [",".join(EPISODE_FIELDS)]
    lines += [format_episode(i, r) for i, r in enumerate(results)]
    return "\n".join(lines) + "\n"


def parse_episodes(text: str) -> tuple[dict, list[EpisodeResult]]:
    meta: dict[str, str] = {}
    results = []
    for line in text.splitlines():
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                k, v = (s.strip() for s in body.split("=", 1))
                meta[k] = v
            continue
        if not line.strip() or line.startswith("index,"):
            continue
        results.append(parse_episode(line))
    return meta, results
