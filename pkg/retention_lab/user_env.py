"""
Parametric cross-session user simulator.

Users carry a latent preference and an activity level; items are unit
vectors. Each step the user reacts to a slate with per-behavior Bernoulli
feedback, may leave the session, and after leaving draws the number of days
until the next visit from a multinomial return module.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, List, Optional, Sequence, Tuple

import numpy as np

from retention_lab.exceptions import ConfigError, UsageError
from retention_lab.nn_core import sigmoid
from retention_lab.state_encoder import InteractionHistory, Request

logger = logging.getLogger(__name__)

BEHAVIORS: Tuple[str, ...] = ("click", "long_view", "like")


@dataclass(frozen=True)
class EnvConfig:
    n_users: int = 200
    n_items: int = 500
    d_action: int = 8
    d_feat: int = 8
    slate_size: int = 6
    max_steps: int = 20
    max_return_day: int = 10
    max_history: int = 50
    behaviors: Tuple[str, ...] = BEHAVIORS
    omega: Tuple[float, ...] = (0.5, 0.25, 0.125)
    kappa: Tuple[float, ...] = (3.0, 2.5, 2.0)
    base_logit: Tuple[float, ...] = (-0.5, -1.5, -2.0)
    leave_theta: Tuple[float, float, float] = (-2.0, 0.15, 0.6)
    return_kappa: float = 2.0
    return_diversity: float = 0.1
    drift: float = 0.02
    boredom: float = 0.3
    boredom_window: int = 5
    activity_range: Tuple[float, float] = (0.01, 0.1)

    def validate(self) -> None:
        n_b = len(self.behaviors)
        if self.slate_size > self.n_items:
            raise ConfigError(
                f"slate size K={self.slate_size} exceeds the item catalog ({self.n_items})"
            )
        if min(self.n_users, self.n_items, self.d_action, self.d_feat, self.slate_size) < 1:
            raise ConfigError("user/item counts and dimensions must be positive")
        if len(self.omega) != n_b or len(self.kappa) != n_b or len(self.base_logit) != n_b:
            raise ConfigError(f"omega, kappa and base_logit need one value per behavior ({n_b})")
        if any(w < 0 for w in self.omega):
            raise ConfigError(f"behavior weights must be non-negative, got {self.omega}")
        if self.max_return_day < 1 or self.max_steps < 1:
            raise ConfigError("max_return_day and max_steps must be at least 1")
        low, high = self.activity_range
        if not 0.0 < low <= high < 1.0:
            raise ConfigError(f"activity range must lie in (0, 1), got {self.activity_range}")


@dataclass
class ActiveSession:
    step: int = 0
    satisfaction: float = 0.0
    slates: List[np.ndarray] = field(default_factory=list)


@dataclass
class UserState:
    latent: np.ndarray
    activity: float
    features: np.ndarray
    log_items: Deque[np.ndarray]
    log_feedback: Deque[np.ndarray]
    session: Optional[ActiveSession] = None


@dataclass
class World:
    config: EnvConfig
    users: List[UserState]
    items: np.ndarray
    omega: np.ndarray
    kappa: np.ndarray
    base_logit: np.ndarray
    projection: np.ndarray


@dataclass(frozen=True)
class StepOutcome:
    feedback: np.ndarray
    reward: float
    left_session: bool
    next_request: Optional[Request]


@dataclass(frozen=True)
class SessionSummary:
    total_satisfaction: float
    diversity: float
    length: int

    @property
    def satisfaction_rate(self) -> float:
        return self.total_satisfaction / self.length if self.length else 0.0


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def world_init(config: EnvConfig, seed: int) -> World:
    """Draw users and items deterministically from ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    latents = _unit_rows(rng.standard_normal((config.n_users, config.d_action)))
    items = _unit_rows(rng.standard_normal((config.n_items, config.d_action)))
    low, high = config.activity_range
    activity = rng.uniform(low, high, size=config.n_users)
    projection = rng.standard_normal((config.d_action, config.d_feat)) / np.sqrt(config.d_action)
    features = np.tanh(latents @ projection)

    users = [
        UserState(
            latent=latents[i].copy(),
            activity=float(activity[i]),
            features=features[i].copy(),
            log_items=deque(maxlen=config.max_history),
            log_feedback=deque(maxlen=config.max_history),
        )
        for i in range(config.n_users)
    ]
    logger.debug(
        "World initialized: %d users, %d items, K=%d (seed %d).",
        config.n_users,
        config.n_items,
        config.slate_size,
        seed,
    )
    return World(
        config=config,
        users=users,
        items=items,
        omega=np.asarray(config.omega, dtype=np.float64),
        kappa=np.asarray(config.kappa, dtype=np.float64),
        base_logit=np.asarray(config.base_logit, dtype=np.float64),
        projection=projection,
    )


def _user(world: World, user_id: int) -> UserState:
    if not 0 <= user_id < len(world.users):
        raise ValueError(f"unknown user id {user_id}")
    return world.users[user_id]


def current_request(world: World, user_id: int) -> Request:
    user = _user(world, user_id)
    n_b = len(world.config.behaviors)
    if user.log_items:
        history = InteractionHistory(np.stack(user.log_items), np.stack(user.log_feedback))
    else:
        history = InteractionHistory.empty(world.config.d_action, n_b)
    return Request(features=user.features.copy(), history=history)


def reset_session(world: World, user_id: int, rng: np.random.Generator) -> Request:
    """Open a session for ``user_id``; the history carries over from earlier sessions."""
    user = _user(world, user_id)
    user.session = ActiveSession()
    return current_request(world, user_id)


def immediate_reward(y: Sequence[float], weights: Sequence[float]) -> float:
    y = np.asarray(y, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if y.shape != weights.shape:
        raise ValueError(f"feedback over {y.shape} behaviors but weights over {weights.shape}")
    return float(np.dot(weights, y))


def leave_probability(
    step_index: int, satisfaction_so_far: float, config: EnvConfig = EnvConfig()
) -> float:
    if step_index >= config.max_steps:
        return 1.0
    theta0, theta1, theta2 = config.leave_theta
    return float(sigmoid(theta0 + theta1 * step_index - theta2 * satisfaction_so_far))


def behavior_probabilities(world: World, user_id: int, slate: Sequence[int]) -> np.ndarray:
    user = _user(world, user_id)
    mean_item = world.items[list(slate)].mean(axis=0)
    effective = user.latent.copy()
    if user.log_items:
        recent = list(user.log_items)[-world.config.boredom_window:]
        effective -= world.config.boredom * np.mean(recent, axis=0)
    return sigmoid(world.kappa * float(effective @ mean_item) + world.base_logit)


def _validate_slate(world: World, slate: Sequence[int]) -> None:
    K = world.config.slate_size
    if len(slate) != K:
        raise ValueError(f"slate must hold K={K} items, got {len(slate)}")
    if len(set(slate)) != len(slate):
        raise ValueError(f"duplicate item ids in slate {list(slate)}")
    if min(slate) < 0 or max(slate) >= len(world.items):
        raise ValueError(f"slate {list(slate)} references unknown items")


def env_step(
    world: World, user_id: int, slate: Sequence[int], rng: np.random.Generator
) -> StepOutcome:
    """Show ``slate`` to the user and return the feedback and leave decision."""
    user = _user(world, user_id)
    if user.session is None:
        raise UsageError(f"user {user_id} has no active session; call reset_session first")
    _validate_slate(world, slate)

    probs = behavior_probabilities(world, user_id, slate)
    feedback = (rng.random(len(probs)) < probs).astype(np.float64)
    reward = immediate_reward(feedback, world.omega)
    mean_item = world.items[list(slate)].mean(axis=0)

    session = user.session
    session.step += 1
    session.satisfaction += reward
    session.slates.append(world.items[list(slate)])
    user.log_items.append(mean_item)
    user.log_feedback.append(feedback)
    if feedback.any():
        user.latent += world.config.drift * (mean_item - user.latent)

    p_leave = leave_probability(session.step, session.satisfaction, world.config)
    left = p_leave >= 1.0 or bool(rng.random() < p_leave)
    next_request = None if left else current_request(world, user_id)
    return StepOutcome(feedback=feedback, reward=reward, left_session=left, next_request=next_request)


def slate_diversity(slate_embeddings: np.ndarray) -> float:
    """1 - mean pairwise cosine, clipped to [0, 1]."""
    n = slate_embeddings.shape[0]
    if n < 2:
        return 0.0
    unit = _unit_rows(slate_embeddings)
    cos = unit @ unit.T
    mean_cos = (cos.sum() - np.trace(cos)) / (n * (n - 1))
    return float(np.clip(1.0 - mean_cos, 0.0, 1.0))


def return_logits(summary: SessionSummary, activity: float, config: EnvConfig) -> np.ndarray:
    days = np.arange(1, config.max_return_day + 1, dtype=np.float64)
    rate = (
        config.return_kappa * summary.satisfaction_rate
        + config.return_diversity * summary.diversity
        + activity
    )
    return -days * rate


def sample_return_day(
    summary: SessionSummary,
    activity: float,
    rng: np.random.Generator,
    config: EnvConfig = EnvConfig(),
) -> Tuple[int, float]:
    """Draw the return day d in [1, D_max]; the retention reward is 1/d."""
    logits = return_logits(summary, activity, config)
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    day = int(rng.choice(config.max_return_day, p=probs)) + 1
    return day, 1.0 / day


def end_session(
    world: World, user_id: int, rng: np.random.Generator
) -> Tuple[SessionSummary, int, float]:
    user = _user(world, user_id)
    session = user.session
    if session is None or session.step == 0:
        raise UsageError(f"user {user_id} has no session with at least one step to close")
    diversity = float(np.mean([slate_diversity(s) for s in session.slates]))
    summary = SessionSummary(
        total_satisfaction=session.satisfaction, diversity=diversity, length=session.step
    )
    user.session = None
    day, retention = sample_return_day(summary, user.activity, rng, world.config)
    logger.debug(
        "User %d session closed: length %d, satisfaction %.3f, diversity %.3f, return day %d.",
        user_id,
        summary.length,
        summary.total_satisfaction,
        summary.diversity,
        day,
    )
    return summary, day, retention
