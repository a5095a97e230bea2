"""
Session rollouts: run a policy against the simulator and flatten the result
into detailed-balance transitions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Tuple

import numpy as np

from retention_lab.gfn_policy import ActionVector, Transition, action_to_slate
from retention_lab.state_encoder import Request
from retention_lab.user_env import SessionSummary, World, end_session, env_step, reset_session

logger = logging.getLogger(__name__)


class Policy(Protocol):
    tag: str

    def act(self, request: Request, rng: np.random.Generator) -> ActionVector: ...


@dataclass(frozen=True)
class SessionStep:
    request: Request
    action: ActionVector
    slate: Tuple[int, ...]
    feedback: np.ndarray
    reward: float


@dataclass
class SessionTrajectory:
    user_id: int
    steps: List[SessionStep] = field(default_factory=list)
    final_request: Optional[Request] = None
    summary: Optional[SessionSummary] = None
    return_day: Optional[int] = None
    retention: Optional[float] = None

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def immediate_rewards(self) -> List[float]:
        return [step.reward for step in self.steps]

    @property
    def complete(self) -> bool:
        return self.retention is not None and bool(self.steps)


def collect_session(
    world: World, user_id: int, policy: Policy, rng: np.random.Generator
) -> SessionTrajectory:
    """Run one session until the leave module fires, then sample the return day."""
    trajectory = SessionTrajectory(user_id=user_id)
    request = reset_session(world, user_id, rng)
    K = world.config.slate_size
    while True:
        action = np.asarray(policy.act(request, rng), dtype=np.float64)
        slate = action_to_slate(action, world.items, K)
        outcome = env_step(world, user_id, slate, rng)
        trajectory.steps.append(
            SessionStep(request, action, tuple(slate), outcome.feedback, outcome.reward)
        )
        if outcome.left_session:
            break
        request = outcome.next_request
    trajectory.final_request = request
    trajectory.summary, trajectory.return_day, trajectory.retention = end_session(world, user_id, rng)
    return trajectory


def to_transitions(trajectory: SessionTrajectory) -> List[Transition]:
    """Steps 1..T-1 become non-terminal transitions; step T carries the retention reward."""
    if not trajectory.complete:
        raise ValueError(f"trajectory of user {trajectory.user_id} is incomplete (no retention)")
    steps = trajectory.steps
    T = len(steps)
    rewards = trajectory.immediate_rewards
    session_reward = float(sum(rewards[: T - 1]))
    transitions: List[Transition] = []
    prefix = 0.0
    for t, step in enumerate(steps):
        terminal = t == T - 1
        next_request = trajectory.final_request if terminal else steps[t + 1].request
        transitions.append(
            Transition(
                request=step.request,
                action=step.action,
                reward=step.reward,
                next_request=next_request,
                is_terminal=terminal,
                retention=trajectory.retention if terminal else None,
                reward_prefix=prefix,
                session_reward=session_reward if terminal else 0.0,
            )
        )
        prefix += step.reward
    return transitions
