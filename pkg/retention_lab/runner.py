"""
Training and evaluation drivers.

``run_train`` interleaves online inference (one session per draw, pushed to
the replay buffer) with training (``train.steps_per_session`` detailed-balance steps per
collected session once the buffer is full enough). ``run_eval`` replays a frozen
policy on a fresh simulator. ``run_gradcheck`` and ``run_sanity`` are the
two acceptance checks.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from retention_lab.baselines import (
    CemState,
    FixedActionPolicy,
    RandomPolicy,
    load_cem,
    save_cem,
    train_cem,
)
from retention_lab.config import RunConfig
from retention_lab.evaluator import (
    MetricsTable,
    MetricWindow,
    append_run_log,
    compute_metrics,
    loss_progress,
    record_from_trajectory,
)
from retention_lab.exceptions import ConfigError, NonFiniteError
from retention_lab.gfn_policy import (
    FlowNetworks,
    FlowPolicy,
    Transition,
    batch_db_loss,
    build_networks,
    load_checkpoint,
    make_optimizers,
    save_checkpoint,
    train_step,
)
from retention_lab.nn_core import GradCheckReport, gradient_check
from retention_lab.replay_buffer import CrossSessionBuffer
from retention_lab.rollout import Policy, SessionTrajectory, collect_session, to_transitions
from retention_lab.sanity_tabular import (
    build_tree_env,
    enumerate_terminal_distribution,
    log_uniform_rewards,
    terminal_distribution,
    terminal_tv,
    train_tabular_db,
)
from retention_lab.user_env import BEHAVIORS, World, world_init

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    run_dir: Path
    policy_tag: str
    episodes: int
    losses: List[float]
    metrics: Dict[str, float]
    checkpoint: Path
    nets: Optional[FlowNetworks] = None
    cem: Optional[CemState] = None


class RolloutWorkers:
    """
    Rollout actors, each owning a World copy and its own random stream.

    With one worker everything runs inline on the caller's thread.
    """

    def __init__(self, config: RunConfig, n_workers: int = 1) -> None:
        env = config.env_config()
        self.worlds: List[World] = [world_init(env, config.seeds.world) for _ in range(n_workers)]
        self.rngs = [config.seeds.actor_rng(i) for i in range(n_workers)]
        self._pool = ThreadPoolExecutor(max_workers=n_workers) if n_workers > 1 else None

    @property
    def size(self) -> int:
        return len(self.worlds)

    def collect(self, user_ids: Sequence[int], policy: Policy) -> List[SessionTrajectory]:
        if self._pool is None:
            return [collect_session(self.worlds[0], user_ids[0], policy, self.rngs[0])]
        futures = [
            self._pool.submit(collect_session, self.worlds[i], uid, policy, self.rngs[i])
            for i, uid in enumerate(user_ids)
        ]
        return [f.result() for f in futures]

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)


def _fresh(path: Path) -> Path:
    path.unlink(missing_ok=True)
    return path


def _write_losses(path: Path, losses: List[float]) -> None:
    frame = pd.DataFrame({"step": np.arange(1, len(losses) + 1), "loss": losses})
    frame.to_csv(path, index=False, float_format="%.8f")


def _interleave(
    config: RunConfig,
    run_dir: Path,
    workers: RolloutWorkers,
    sampling: np.random.Generator,
    make_policy: Callable[[], Policy],
    trainer: Optional[Callable[[CrossSessionBuffer], float]] = None,
    steps: int = 0,
) -> tuple[MetricsTable, List[float], int]:
    """
    Collect sessions until ``steps`` train steps ran and one eval interval passed.

    Once the buffer is ready, every collected session is followed by
    ``train.steps_per_session`` train steps.
    """
    interval = config["run.eval_interval"]
    batch_size = config["train.batch_size"]
    seed = config["run.seed"]
    slate_size = config["env.slate_size"]
    n_users = config["env.n_users"]
    per_session = config["train.steps_per_session"]

    buffer = CrossSessionBuffer(
        capacity=config["train.buffer_capacity"],
        min_fill=max(batch_size, config["train.min_fill"]),
    )
    window = MetricWindow(config["run.eval_window"], slate_size)
    table = MetricsTable(run_dir / "metrics.csv")
    log_path = _fresh(run_dir / "run_log.jsonl")
    losses: List[float] = []
    pending: List[float] = []
    episode = 0
    announced = False

    while len(losses) < steps or episode < interval:
        policy = make_policy()
        user_ids = [int(sampling.integers(n_users)) for _ in range(workers.size)]
        for trajectory in workers.collect(user_ids, policy):
            episode += 1
            record = record_from_trajectory(trajectory, seed, policy.tag, BEHAVIORS)
            window.append(record)
            append_run_log(log_path, record, episode)

            if trainer is not None and len(losses) < steps:
                buffer.push(trajectory)
                if buffer.ready(batch_size):
                    if not announced:
                        logger.info(
                            "Replay buffer holds %d transitions after %d sessions; training starts.",
                            len(buffer),
                            episode,
                        )
                        announced = True
                    for _ in range(min(per_session, steps - len(losses))):
                        try:
                            loss = trainer(buffer)
                        except NonFiniteError:
                            table.save()
                            _write_losses(run_dir / "losses.csv", losses)
                            raise
                        losses.append(loss)
                        pending.append(loss)

            if episode % interval == 0:
                db_loss = math.fsum(pending) / len(pending) if pending else None
                table.add(episode, compute_metrics(window), db_loss)
                table.save()
                pending = []

    if episode % interval:
        db_loss = math.fsum(pending) / len(pending) if pending else None
        table.add(episode, compute_metrics(window), db_loss)
    table.save()
    return table, losses, episode


def _train_gfn(config: RunConfig, run_dir: Path, workers: RolloutWorkers) -> TrainResult:
    seeds = config.seeds
    hyper = config.hyper()
    nets = build_networks(config.encoder_spec(), hyper, seeds.init_rng())
    opt = make_optimizers(nets)
    sampling = seeds.sampling_rng()
    checkpoint = run_dir / "checkpoint.txt"
    step_counter = [0]

    def trainer(buffer: CrossSessionBuffer) -> float:
        batch = buffer.sample(hyper.batch_size, sampling)
        try:
            loss = train_step(batch, nets, opt, hyper)
        except NonFiniteError as exc:
            with open(checkpoint, mode="w", encoding="utf-8") as fh:
                save_checkpoint(fh, nets)
            logger.error(
                "Non-finite value at train step %d (%s); last good state saved to %s.",
                step_counter[0] + 1,
                exc,
                checkpoint,
            )
            raise
        step_counter[0] += 1
        if step_counter[0] % 100 == 0:
            logger.debug("Train step %d: db_loss %.6f.", step_counter[0], loss)
        return loss

    def make_policy() -> Policy:
        return FlowPolicy(nets if workers.size == 1 else nets.copy())

    table, losses, episodes = _interleave(
        config, run_dir, workers, sampling, make_policy, trainer, steps=config["train.steps"]
    )
    _write_losses(run_dir / "losses.csv", losses)
    with open(checkpoint, mode="w", encoding="utf-8") as fh:
        save_checkpoint(fh, nets)
    logger.info("GFN training done: %d steps over %d sessions. Checkpoint: %s", len(losses), episodes, checkpoint)
    if len(losses) >= 20:
        logger.info(
            "Median db_loss over the last 10%% of steps is %.3f of the first 10%%.", loss_progress(losses)
        )
    return TrainResult(
        run_dir=run_dir,
        policy_tag=FlowPolicy.tag,
        episodes=episodes,
        losses=losses,
        metrics=table.rows[-1],
        checkpoint=checkpoint,
        nets=nets,
    )


def _train_cem(config: RunConfig, run_dir: Path, workers: RolloutWorkers) -> TrainResult:
    d = config["env.d_action"]
    sampling = config.seeds.sampling_rng()
    state = CemState(
        mu=np.zeros(d),
        sigma=np.full(d, config["cem.init_sigma"]),
        population=config["cem.population"],
        elite_fraction=config["cem.elite_fraction"],
        sigma_min=config["cem.sigma_min"],
    )
    state = train_cem(
        workers.worlds[0],
        state,
        config["cem.iterations"],
        config.effective_alpha,
        sampling,
        config["cem.episodes_per_candidate"],
    )
    checkpoint = run_dir / "cem.txt"
    with open(checkpoint, mode="w", encoding="utf-8") as fh:
        save_cem(fh, state)
    policy = FixedActionPolicy(state.mu)
    table, losses, episodes = _interleave(config, run_dir, workers, sampling, lambda: policy)
    _write_losses(run_dir / "losses.csv", losses)
    return TrainResult(run_dir, policy.tag, episodes, losses, table.rows[-1], checkpoint, cem=state)


def _run_random(config: RunConfig, run_dir: Path, workers: RolloutWorkers) -> TrainResult:
    policy = RandomPolicy(config["env.d_action"])
    sampling = config.seeds.sampling_rng()
    table, losses, episodes = _interleave(config, run_dir, workers, sampling, lambda: policy)
    _write_losses(run_dir / "losses.csv", losses)
    return TrainResult(run_dir, policy.tag, episodes, losses, table.rows[-1], run_dir / "metrics.csv")


def run_train(config: RunConfig, run_dir: Path) -> TrainResult:
    """
    Train the policy named by ``run.policy`` and write the run directory.

    Outputs: ``config.resolved``, ``metrics.csv``, ``losses.csv``,
    ``run_log.jsonl`` and ``checkpoint.txt`` (``cem.txt`` for CEM).
    """
    config.validate()
    run_dir.mkdir(parents=True, exist_ok=True)
    config.write_resolved(run_dir / "config.resolved")
    logger.info(
        "Training '%s' (seed %d, %d steps, alpha %.3g) into %s",
        config["run.policy"],
        config["run.seed"],
        config["train.steps"],
        config.effective_alpha,
        run_dir,
    )
    workers = RolloutWorkers(config, config["run.workers"])
    try:
        if config["run.policy"] == "gfn":
            return _train_gfn(config, run_dir, workers)
        if config["run.policy"] == "cem":
            return _train_cem(config, run_dir, workers)
        return _run_random(config, run_dir, workers)
    finally:
        workers.close()


def load_policy(config: RunConfig, checkpoint: Optional[Path]) -> Policy:
    """Rebuild the frozen policy for ``run.policy`` from ``checkpoint``."""
    kind = config["run.policy"]
    if kind == "random":
        return RandomPolicy(config["env.d_action"])
    if checkpoint is None:
        raise ConfigError(f"evaluating a '{kind}' policy needs --checkpoint")
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise FileNotFoundError(f"Checkpoint not found: {checkpoint}")
    with open(checkpoint, mode="r", encoding="utf-8") as fh:
        if kind == "cem":
            state = load_cem(fh, config["env.d_action"])
            return FixedActionPolicy(state.mu)
        nets = build_networks(config.encoder_spec(), config.hyper(), config.seeds.init_rng())
        return FlowPolicy(load_checkpoint(fh, nets))


def run_eval(
    config: RunConfig, checkpoint: Optional[Path], episodes: int, run_dir: Path
) -> Dict[str, float]:
    """Frozen-policy rollouts on a fresh simulator; metrics over every episode."""
    if episodes < 1:
        raise ConfigError(f"episodes must be >= 1, got {episodes}")
    config.validate()
    policy = load_policy(config, checkpoint)
    run_dir.mkdir(parents=True, exist_ok=True)
    world = world_init(config.env_config(), config.seeds.world)
    sampling = config.seeds.sampling_rng()
    actor = config.seeds.actor_rng(0)
    window = MetricWindow(episodes, config["env.slate_size"])
    log_path = _fresh(run_dir / "eval_log.jsonl")

    for episode in range(1, episodes + 1):
        user_id = int(sampling.integers(config["env.n_users"]))
        trajectory = collect_session(world, user_id, policy, actor)
        record = record_from_trajectory(trajectory, config["run.seed"], policy.tag, BEHAVIORS)
        window.append(record)
        append_run_log(log_path, record, episode)

    metrics = compute_metrics(window)
    table = MetricsTable(run_dir / "eval_metrics.csv")
    table.add(episodes, metrics, None)
    table.save()
    return metrics


# -------------------------------------------------------------------
# Acceptance checks
# -------------------------------------------------------------------

def gradcheck_batch(config: RunConfig, n_sessions: int = 2) -> List[Transition]:
    """Transitions from a few random-policy sessions; always contains terminals."""
    world = world_init(config.env_config(), config.seeds.world)
    rng = config.seeds.sampling_rng()
    policy = RandomPolicy(config["env.d_action"])
    batch: List[Transition] = []
    for i in range(n_sessions):
        batch.extend(to_transitions(collect_session(world, i % len(world.users), policy, rng)))
    return batch


def run_gradcheck(
    config: RunConfig, eps: float = 1e-3, tol: float = 1e-4
) -> Dict[str, GradCheckReport]:
    """Finite-difference check of every network through the detailed-balance loss."""
    hyper = config.hyper()
    nets = build_networks(config.encoder_spec(), hyper, config.seeds.init_rng())
    batch = gradcheck_batch(config)

    def loss() -> float:
        nets.zero_grad()
        return batch_db_loss(batch, nets, hyper, compute_grad=True).mean_loss

    reports: Dict[str, GradCheckReport] = {}
    for name, params in nets.all().items():
        report = gradient_check(
            loss, params, eps=eps, tol=tol, rng=np.random.default_rng(config["run.seed"])
        )
        reports[name] = report
        logger.info(
            "gradcheck %-8s %5d elements  max rel err %.3e  %s",
            name,
            report.checked,
            report.max_rel_error,
            "ok" if report.passed else f"FAILED at {report.offending_name}",
        )
    return reports


@dataclass
class SanityResult:
    tv: float
    exact_gap: float
    small_probs: np.ndarray
    threshold: float
    small_target: np.ndarray = field(default_factory=lambda: np.array([0.75, 0.25]))
    small_tolerance: float = 0.02

    @property
    def passed(self) -> bool:
        small_ok = bool(np.all(np.abs(self.small_probs - self.small_target) <= self.small_tolerance))
        return self.tv <= self.threshold and small_ok


def run_sanity(
    depth: int = 3,
    branching: int = 3,
    steps: int = 8000,
    lr: float = 0.02,
    reward_seed: int = 7,
    seed: int = 0,
    tv_threshold: float = 0.05,
) -> SanityResult:
    """Train tabular models on a random-reward tree and on the two-leaf (3, 1) tree."""
    rewards = log_uniform_rewards(branching ** depth, 0.1, 10.0, np.random.default_rng(reward_seed))
    env = build_tree_env(depth, branching, rewards)
    model = train_tabular_db(env, steps, lr, np.random.default_rng(seed))
    tv = terminal_tv(env, model)
    exact_gap = float(
        np.max(np.abs(terminal_distribution(env, model) - enumerate_terminal_distribution(env, model)))
    )

    small_env = build_tree_env(1, 2, [3.0, 1.0])
    small_model = train_tabular_db(small_env, steps, lr, np.random.default_rng(seed + 1))
    small_probs = terminal_distribution(small_env, small_model)

    result = SanityResult(tv=tv, exact_gap=exact_gap, small_probs=small_probs, threshold=tv_threshold)
    logger.info(
        "Tabular tree depth %d, branching %d: TV %.4f (threshold %.3f); two-leaf probabilities %s.",
        depth,
        branching,
        tv,
        tv_threshold,
        np.round(small_probs, 4).tolist(),
    )
    return result
