"""
Exact flow-matching check on enumerable trees.

A complete b-ary tree of depth D has one terminal state per leaf. A tabular
model (forward logits per internal state, one log-flow per state) is
trained with the detailed-balance loss; since every state has a unique
parent the backward probability is 1. The terminal distribution is then
computed exactly and compared with R / sum(R).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from retention_lab.nn_core import AdamState, ParamSet, adam_step

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TreeEnv:
    """Nodes are numbered level by level; the children of node i are b*i+1 .. b*i+b."""

    depth: int
    branching: int
    terminal_rewards: np.ndarray

    @property
    def n_internal(self) -> int:
        return sum(self.branching ** level for level in range(self.depth))

    @property
    def n_nodes(self) -> int:
        return self.n_internal + self.branching ** self.depth

    def children(self, node: int) -> np.ndarray:
        return self.branching * node + 1 + np.arange(self.branching)

    def leaf_reward(self, node: np.ndarray) -> np.ndarray:
        return self.terminal_rewards[np.asarray(node) - self.n_internal]


def build_tree_env(depth: int, branching: int, rewards: Sequence[float]) -> TreeEnv:
    rewards = np.asarray(rewards, dtype=np.float64)
    if depth < 1 or branching < 2:
        raise ValueError(f"tree needs depth >= 1 and branching >= 2, got {depth}, {branching}")
    if rewards.shape != (branching ** depth,):
        raise ValueError(f"expected {branching ** depth} terminal rewards, got {rewards.size}")
    if np.any(rewards <= 0) or not np.all(np.isfinite(rewards)):
        raise ValueError("terminal rewards must be finite and strictly positive")
    return TreeEnv(depth, branching, rewards)


@dataclass
class TabularGFN:
    params: ParamSet

    @property
    def logits(self) -> np.ndarray:
        return self.params.value("logits")

    @property
    def log_flow(self) -> np.ndarray:
        return self.params.value("log_flow")[:, 0]

    def forward_probs(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)


def init_tabular(env: TreeEnv) -> TabularGFN:
    params = ParamSet("tabular")
    params.add("logits", np.zeros((env.n_internal, env.branching)))
    params.add("log_flow", np.zeros((env.n_nodes, 1)))
    return TabularGFN(params)


def analytic_solution(env: TreeEnv) -> TabularGFN:
    """Flows equal subtree reward sums; logits are log child flows."""
    flow = np.zeros(env.n_nodes)
    flow[env.n_internal:] = env.terminal_rewards
    for node in reversed(range(env.n_internal)):
        flow[node] = flow[env.children(node)].sum()
    model = init_tabular(env)
    model.params.value("log_flow")[:, 0] = np.log(flow)
    for node in range(env.n_internal):
        model.params.value("logits")[node] = np.log(flow[env.children(node)])
    return model


def exact_db_loss(env: TreeEnv, model: TabularGFN) -> float:
    """Sum of squared residuals over every edge plus every terminal match."""
    log_pi = np.log(model.forward_probs())
    log_flow = model.log_flow
    total = 0.0
    for node in range(env.n_internal):
        kids = env.children(node)
        residual = log_flow[node] + log_pi[node] - log_flow[kids]
        total += float(np.sum(residual ** 2))
    leaves = np.arange(env.n_internal, env.n_nodes)
    total += float(np.sum((log_flow[leaves] - np.log(env.leaf_reward(leaves))) ** 2))
    return total


def train_tabular_db(
    env: TreeEnv,
    steps: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 64,
    explore: float = 0.5,
) -> TabularGFN:
    """
    Adam on the detailed-balance loss over sampled root-to-leaf trajectories.

    Trajectories follow a mixture of the current policy and the uniform
    policy (weight ``explore``); the loss is valid off-policy.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    model = init_tabular(env)
    state = AdamState.for_params(model.params)
    b = env.branching
    rows = np.arange(batch_size)
    for step in range(steps):
        probs = model.forward_probs()
        log_pi = np.log(probs)
        log_flow = model.log_flow
        g_logits = model.params.grad("logits")
        g_flow = model.params.grad("log_flow")[:, 0]
        loss = 0.0

        node = np.zeros(batch_size, dtype=np.int64)
        for _ in range(env.depth):
            behaviour = (1.0 - explore) * probs[node] + explore / b
            draws = rng.random(batch_size)[:, None]
            choice = np.minimum((draws > behaviour.cumsum(axis=1)).sum(axis=1), b - 1)
            child = b * node + 1 + choice
            residual = log_flow[node] + log_pi[node, choice] - log_flow[child]
            loss += float(np.sum(residual ** 2))
            grad = 2.0 * residual / batch_size
            np.add.at(g_flow, node, grad)
            np.add.at(g_flow, child, -grad)
            one_hot = np.zeros((batch_size, b))
            one_hot[rows, choice] = 1.0
            np.add.at(g_logits, node, grad[:, None] * (one_hot - probs[node]))
            node = child

        residual = log_flow[node] - np.log(env.leaf_reward(node))
        loss += float(np.sum(residual ** 2))
        np.add.at(g_flow, node, 2.0 * residual / batch_size)
        adam_step(model.params, state, lr)
        if (step + 1) % max(1, steps // 10) == 0:
            logger.debug("Tabular DB step %d/%d: loss %.6f.", step + 1, steps, loss / batch_size)
    return model


def terminal_distribution(env: TreeEnv, model: TabularGFN) -> np.ndarray:
    """Exact leaf probabilities as products of forward probabilities along each path."""
    probs = model.forward_probs()
    b = env.branching
    n_leaves = b ** env.depth
    result = np.ones(n_leaves)
    for leaf in range(n_leaves):
        digits = []
        code = leaf
        for _ in range(env.depth):
            digits.append(code % b)
            code //= b
        node = 0
        for choice in reversed(digits):
            result[leaf] *= probs[node, choice]
            node = b * node + 1 + choice
    return result


def enumerate_terminal_distribution(env: TreeEnv, model: TabularGFN) -> np.ndarray:
    """Same distribution by recursive marginalization from the root."""
    probs = model.forward_probs()
    mass = np.zeros(env.n_nodes)

    def visit(node: int, m: float) -> None:
        mass[node] = m
        if node < env.n_internal:
            for choice, child in enumerate(env.children(node)):
                visit(int(child), m * probs[node, choice])

    visit(0, 1.0)
    return mass[env.n_internal:]


def terminal_tv(env: TreeEnv, model: TabularGFN) -> float:
    target = env.terminal_rewards / env.terminal_rewards.sum()
    return 0.5 * float(np.abs(terminal_distribution(env, model) - target).sum())


def flow_conservation_gap(env: TreeEnv, model: TabularGFN) -> float:
    flow = np.exp(model.log_flow)
    gaps = [
        abs(flow[node] - flow[env.children(node)].sum()) for node in range(env.n_internal)
    ]
    return float(max(gaps))


def log_uniform_rewards(n: int, low: float, high: float, rng: np.random.Generator) -> np.ndarray:
    return np.exp(rng.uniform(np.log(low), np.log(high), size=n))
