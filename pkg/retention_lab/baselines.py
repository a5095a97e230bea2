"""Reference policies: uniform-random actions and the cross-entropy method."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, TextIO

import numpy as np

from retention_lab.exceptions import CheckpointError
from retention_lab.gfn_policy import ActionVector
from retention_lab.nn_core import read_tensors, write_tensors
from retention_lab.rollout import collect_session
from retention_lab.state_encoder import Request
from retention_lab.user_env import World

logger = logging.getLogger(__name__)


def random_act(d_action: int, rng: np.random.Generator) -> ActionVector:
    return rng.uniform(-1.0, 1.0, size=d_action)


class RandomPolicy:
    tag = "random"

    def __init__(self, d_action: int) -> None:
        self.d_action = d_action

    def act(self, request: Request, rng: np.random.Generator) -> ActionVector:
        return random_act(self.d_action, rng)


class FixedActionPolicy:
    """Recommends with the same action vector for every request (a CEM mean)."""

    tag = "cem"

    def __init__(self, action: ActionVector) -> None:
        self.action = np.asarray(action, dtype=np.float64)

    def act(self, request: Request, rng: np.random.Generator) -> ActionVector:
        return self.action


# -------------------------------------------------------------------
# Cross-entropy method
# -------------------------------------------------------------------

@dataclass(frozen=True)
class CemState:
    mu: np.ndarray
    sigma: np.ndarray
    population: int = 64
    elite_fraction: float = 0.25
    sigma_min: float = 0.02

    def __post_init__(self) -> None:
        if self.population < 1 or not 0.0 < self.elite_fraction <= 1.0:
            raise ValueError("CEM needs population >= 1 and elite fraction in (0, 1]")

    @property
    def n_elite(self) -> int:
        return max(1, math.ceil(self.elite_fraction * self.population))


def cem_iteration(
    state: CemState,
    evaluate: Callable[[ActionVector], float],
    rng: np.random.Generator,
    samples: Optional[np.ndarray] = None,
) -> CemState:
    """
    Sample a population, keep the top ``ceil(rho * N)`` by return and refit.

    Ties in return are broken by sample index. ``samples`` overrides the
    Gaussian draw.
    """
    if samples is None:
        noise = rng.standard_normal((state.population, state.mu.shape[0]))
        samples = state.mu + state.sigma * noise
    samples = np.asarray(samples, dtype=np.float64)
    returns = np.array([evaluate(x) for x in samples])
    order = np.lexsort((np.arange(len(samples)), -returns))
    elites = samples[order[: state.n_elite]]
    mu = elites.mean(axis=0)
    sigma = np.maximum(elites.std(axis=0), state.sigma_min)
    logger.debug(
        "CEM iteration: mean return %.4f, best %.4f.", float(returns.mean()), float(returns.max())
    )
    return replace(state, mu=mu, sigma=sigma)


def episode_evaluator(
    world: World, alpha: float, rng: np.random.Generator, episodes: int = 8
) -> Callable[[ActionVector], float]:
    """
    Episodic return R + alpha * sum(r_t) of a fixed action, averaged over a user panel.

    The panel and the session random stream are drawn once, so every
    candidate meets the same users under the same noise. The panel users'
    state is restored after each evaluation.
    """
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    panel = [int(u) for u in rng.integers(len(world.users), size=episodes)]
    stream_seed = int(rng.integers(2**32))

    def evaluate(action: ActionVector) -> float:
        saved = {uid: copy.deepcopy(world.users[uid]) for uid in set(panel)}
        policy = FixedActionPolicy(action)
        session_rng = np.random.default_rng(stream_seed)
        total = 0.0
        try:
            for user_id in panel:
                trajectory = collect_session(world, user_id, policy, session_rng)
                total += trajectory.retention + alpha * sum(trajectory.immediate_rewards)
        finally:
            for uid, user in saved.items():
                world.users[uid] = user
        return total / episodes

    return evaluate


def train_cem(
    world: World,
    state: CemState,
    iterations: int,
    alpha: float,
    rng: np.random.Generator,
    episodes_per_candidate: int = 8,
) -> CemState:
    """Run ``iterations`` CEM updates, each scored on a freshly drawn user panel."""
    for i in range(iterations):
        evaluate = episode_evaluator(world, alpha, rng, episodes_per_candidate)
        state = cem_iteration(state, evaluate, rng)
        logger.info(
            "CEM iteration %d/%d: |mu| = %.3f, mean sigma = %.3f.",
            i + 1,
            iterations,
            float(np.linalg.norm(state.mu)),
            float(state.sigma.mean()),
        )
    return state


def save_cem(fh: TextIO, state: CemState) -> None:
    write_tensors(fh, [("cem.mu", state.mu[None]), ("cem.sigma", state.sigma[None])])


def load_cem(fh: TextIO, d_action: int, **kwargs) -> CemState:
    tensors = read_tensors(iter(fh))
    try:
        mu, sigma = tensors["cem.mu"][0], tensors["cem.sigma"][0]
    except KeyError as exc:
        raise CheckpointError(f"CEM checkpoint lacks tensor {exc}") from exc
    if mu.shape[0] != d_action:
        raise CheckpointError(f"CEM checkpoint has d_action={mu.shape[0]}, config has {d_action}")
    return CemState(mu=mu, sigma=sigma, **kwargs)
