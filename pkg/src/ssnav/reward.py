"""Semantic reward: episodic running-max similarity plus terminal success bonus."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .semantic import ClassSplit, EmbeddingTable, MissingClass
from .world import Action


@dataclass(frozen=True)
class RewardState:
    cs_max: float = 0.0


@dataclass(frozen=True)
class RewardConfig:
    success_reward: float = 5.0
    step_penalty: float = -0.01
    partial_reward_enabled: bool = True

    def __post_init__(self):
        if not self.success_reward > 0:
            raise ValueError("success_reward must be positive")
        if not self.step_penalty < 0:
            raise ValueError("step_penalty must be negative")


class TargetNotSeen(ValueError):
    pass


def semantic_reward(
    state: RewardState,
    action: Action | int,
    target: str,
    visible: Iterable[str],
    split: ClassSplit,
    table: EmbeddingTable,
    cfg: RewardConfig = RewardConfig(),
    training: bool = True,
) -> tuple[float, RewardState]:
    """One step of the reward; returns ``(reward, next_state)``.

    Done pays ``success_reward`` if the target is visible, else 0, and leaves
    the state alone. Any other action pays ``step_penalty`` unless some
    visible seen/irrelevant class beats the episode's best similarity so far,
    in which case it pays that similarity and raises the running max.
    """
    visible = list(visible)
    if training and target not in split.seen:
        if target not in split:
            raise MissingClass(target)
        raise TargetNotSeen(f"training target {target!r} is not a seen class")
    for name in visible:
        split.group_of(name)

    if Action(action) is Action.DONE:
        return (cfg.success_reward if target in visible else 0.0), state

    reward = cfg.step_penalty
    if not cfg.partial_reward_enabled:
        return reward, state
    table[target]
    best = None
    for name in set(visible):
        if split.group_of(name) == "unseen":
            continue
        cs = table.similarity(name, target)
        if best is None or cs > best:
            best = cs
    if best is not None and best > state.cs_max:
        return best, RewardState(best)
    return reward, state
