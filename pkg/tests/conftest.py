from __future__ import annotations

from dataclasses import dataclass

import pytest

from forge.agents import ActionDecision, default_memory
from forge.cage_lite import ActionKind, BlueAction, Observation


def blank_observation(step_index: int = 0, **overrides) -> Observation:
    falses = tuple([False] * 13)
    fields = {
        "anomalous_process": falses,
        "suspicious_connection": falses,
        "new_file": falses,
        "step_index": step_index,
    }
    fields.update(overrides)
    return Observation(**fields)


def flags_for(hosts: list[int]) -> tuple[bool, ...]:
    return tuple(i in hosts for i in range(13))


@dataclass
class FakeState:
    step: int


class ScriptedRewardEnv:
    """Minimal episode driver emitting a fixed reward sequence."""

    def __init__(self, rewards: list[float]):
        self.rewards = list(rewards)

    def reset(self, seed: int):
        return FakeState(0), blank_observation(0)

    def is_terminal(self, state: FakeState) -> bool:
        return state.step >= len(self.rewards)

    def step(self, state: FakeState, action: BlueAction):
        reward = self.rewards[state.step]
        new_state = FakeState(state.step + 1)
        return new_state, blank_observation(new_state.step), reward


class MonitorBackend:
    """Policy stub that always monitors."""

    def decide(self, observation, memory, ctx=None) -> ActionDecision:
        return ActionDecision(BlueAction(ActionKind.MONITOR), "stub")


@pytest.fixture
def memory():
    return default_memory()
