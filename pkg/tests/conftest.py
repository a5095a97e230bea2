from dataclasses import replace
from pathlib import Path
from typing import List

import numpy as np
import pytest

from retention_lab.baselines import RandomPolicy
from retention_lab.config import RunConfig, parse_config
from retention_lab.gfn_policy import FlowNetworks, Hyper, Transition, build_networks
from retention_lab.rollout import collect_session, to_transitions
from retention_lab.state_encoder import EncoderSpec, InteractionHistory, Request
from retention_lab.user_env import EnvConfig, World, world_init

SMALL_OVERRIDES = {
    "env.n_users": 6,
    "env.n_items": 30,
    "env.d_action": 4,
    "env.d_feat": 3,
    "env.slate_size": 3,
    "env.max_steps": 5,
    "env.max_history": 6,
    "model.embedding_dim": 8,
    "model.num_heads": 2,
    "model.hidden_dim": 8,
    "model.context_window": 3,
    "train.steps": 6,
    "train.batch_size": 4,
    "train.min_fill": 8,
    "train.buffer_capacity": 50,
    "run.eval_window": 10,
    "run.eval_interval": 5,
    "run.eval_episodes": 6,
    "cem.population": 4,
    "cem.iterations": 2,
}


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)


@pytest.fixture
def encoder_spec() -> EncoderSpec:
    return EncoderSpec(
        d_feat=3, d_item=4, n_behaviors=3, d_model=8, num_heads=2, max_history=6, context_window=3
    )


@pytest.fixture
def hyper() -> Hyper:
    return Hyper(d_action=4, slate_size=3, hidden_dim=8, batch_size=4)


@pytest.fixture
def env_config() -> EnvConfig:
    return EnvConfig(
        n_users=6, n_items=30, d_action=4, d_feat=3, slate_size=3, max_steps=5, max_history=6
    )


@pytest.fixture
def world(env_config: EnvConfig) -> World:
    return world_init(env_config, seed=3)


@pytest.fixture
def nets(encoder_spec: EncoderSpec, hyper: Hyper) -> FlowNetworks:
    return build_networks(encoder_spec, hyper, np.random.default_rng(1))


@pytest.fixture
def transitions(env_config: EnvConfig) -> List[Transition]:
    """Three random-policy sessions that each run the full max_steps."""
    world = world_init(replace(env_config, leave_theta=(-50.0, 0.0, 0.0)), seed=3)
    rng = np.random.default_rng(5)
    policy = RandomPolicy(world.config.d_action)
    out: List[Transition] = []
    for user_id in (0, 1, 2):
        out.extend(to_transitions(collect_session(world, user_id, policy, rng)))
    return out


@pytest.fixture
def small_config() -> RunConfig:
    config = parse_config()
    for key, value in SMALL_OVERRIDES.items():
        config.set(key, value)
    return config


@pytest.fixture
def small_config_file(tmp_path) -> Path:
    path = tmp_path / "small.cfg"
    lines = [f"{key} = {value}" for key, value in SMALL_OVERRIDES.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _random_request(spec: EncoderSpec, rng: np.random.Generator) -> Request:
    n = int(rng.integers(0, spec.max_history + 1))
    items = rng.standard_normal((n, spec.d_item))
    feedback = (rng.random((n, spec.n_behaviors)) < 0.4).astype(np.float64)
    return Request(rng.uniform(-1.0, 1.0, spec.d_feat), InteractionHistory(items, feedback))


@pytest.fixture
def random_transitions(encoder_spec: EncoderSpec) -> List[Transition]:
    """1000 independent transitions, about a fifth of them terminal."""
    rng = np.random.default_rng(11)
    out: List[Transition] = []
    for _ in range(1000):
        terminal = bool(rng.random() < 0.2)
        out.append(
            Transition(
                request=_random_request(encoder_spec, rng),
                action=rng.standard_normal(encoder_spec.d_item),
                reward=float(rng.choice([0.0, 0.25, 0.5, 1.0, 1.75])),
                next_request=_random_request(encoder_spec, rng),
                is_terminal=terminal,
                retention=float(1.0 / rng.integers(1, 11)) if terminal else None,
                reward_prefix=float(rng.uniform(0.0, 4.0)),
                session_reward=float(rng.uniform(0.0, 6.0)),
            )
        )
    return out
