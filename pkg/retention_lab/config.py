"""
Run configuration: flat dotted keys with typed defaults.

Files are line based (``key = value``, ``#`` starts a comment). Values are
resolved in order: defaults, preset, config file, command-line overrides.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np

from retention_lab.exceptions import ConfigError, ConfigParseError
from retention_lab.gfn_policy import Hyper
from retention_lab.state_encoder import EncoderSpec
from retention_lab.user_env import BEHAVIORS, EnvConfig

logger = logging.getLogger(__name__)

_ENV = EnvConfig()

DEFAULTS: Dict[str, Any] = {
    # simulator
    "env.n_users": _ENV.n_users,
    "env.n_items": _ENV.n_items,
    "env.d_action": _ENV.d_action,
    "env.d_feat": _ENV.d_feat,
    "env.slate_size": _ENV.slate_size,
    "env.max_steps": _ENV.max_steps,
    "env.max_return_day": _ENV.max_return_day,
    "env.max_history": _ENV.max_history,
    **{f"env.omega.{b}": w for b, w in zip(BEHAVIORS, _ENV.omega)},
    **{f"env.kappa.{b}": k for b, k in zip(BEHAVIORS, _ENV.kappa)},
    **{f"env.c.{b}": c for b, c in zip(BEHAVIORS, _ENV.base_logit)},
    "env.leave_theta0": _ENV.leave_theta[0],
    "env.leave_theta1": _ENV.leave_theta[1],
    "env.leave_theta2": _ENV.leave_theta[2],
    "env.return_kappa": _ENV.return_kappa,
    "env.return_diversity": _ENV.return_diversity,
    "env.drift": _ENV.drift,
    "env.boredom": _ENV.boredom,
    "env.boredom_window": _ENV.boredom_window,
    "env.activity_low": _ENV.activity_range[0],
    "env.activity_high": _ENV.activity_range[1],
    # networks
    "model.embedding_dim": 32,
    "model.num_heads": 4,
    "model.hidden_dim": 128,
    "model.sigma_min": 0.05,
    "model.context_window": 10,
    # training
    "train.steps": 20000,
    "train.batch_size": 128,
    "train.lr_flow": 0.00002,
    "train.lr_forward": 0.0001,
    "train.lr_backward": 0.0001,
    "train.alpha": 1.0,
    "train.beta_F": 1.0,
    "train.beta_B": 1.0,
    "train.beta_r": 0.5,
    "train.buffer_capacity": 100000,
    "train.min_fill": 1000,
    "train.steps_per_session": 2,
    # run
    "run.policy": "gfn",
    "run.seed": 0,
    "run.out_dir": "",
    "run.eval_window": 1000,
    "run.eval_interval": 500,
    "run.eval_episodes": 2000,
    "run.workers": 1,
    # cross-entropy baseline
    "cem.population": 64,
    "cem.elite_fraction": 0.25,
    "cem.sigma_min": 0.02,
    "cem.iterations": 30,
    "cem.episodes_per_candidate": 8,
    "cem.init_sigma": 0.5,
    # ablations
    "ablation.ncd": False,
    "ablation.nif": False,
    "ablation.sif": False,
}

# Optional keys: unset unless a calibration file provides them.
OPTIONAL_FLOAT_KEYS = tuple(
    f"calib.{kind}.{b}" for kind in ("omega", "c") for b in BEHAVIORS
)

POLICIES = ("gfn", "cem", "random")

PRESETS: Dict[str, Dict[str, Any]] = {
    "kuairand": {},
    "movielens": {
        "train.lr_flow": 0.0003,
        "train.lr_forward": 0.001,
        "train.lr_backward": 0.001,
        "train.batch_size": 64,
        "train.beta_F": 0.8,
        "train.beta_B": 0.8,
        "train.beta_r": 0.5,
        "train.buffer_capacity": 10000,
        "model.hidden_dim": 64,
    },
}

_INT_RE = re.compile(r"^[+-]?\d+$")
_TRUE = {"true", "yes", "1"}
_FALSE = {"false", "no", "0"}


def _key_type(key: str) -> type:
    if key in OPTIONAL_FLOAT_KEYS:
        return float
    return type(DEFAULTS[key])


def _coerce(key: str, raw: str) -> Any:
    """Convert ``raw`` to the type of ``key``'s default; raise ValueError on mismatch."""
    kind = _key_type(key)
    text = raw.strip()
    if kind is bool:
        lowered = text.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ValueError(f"{key} expects a boolean (true/false/yes/no), got '{text}'")
    if kind is int:
        if not _INT_RE.match(text):
            raise ValueError(f"{key} expects an integer, got '{text}'")
        return int(text)
    if kind is float:
        try:
            value = float(text)
        except ValueError:
            raise ValueError(f"{key} expects a number, got '{text}'") from None
        if not np.isfinite(value):
            raise ValueError(f"{key} expects a finite number, got '{text}'")
        return value
    return text


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    """Effective key/value map; every key of ``DEFAULTS`` is always present."""

    values: Dict[str, Any] = field(default_factory=lambda: dict(DEFAULTS))
    source: Optional[Path] = None
    preset: str = "kuairand"

    def __getitem__(self, key: str) -> Any:
        if key in self.values:
            return self.values[key]
        if key in OPTIONAL_FLOAT_KEYS:
            return None
        raise KeyError(key)

    def set(self, key: str, value: Any) -> None:
        if key not in DEFAULTS and key not in OPTIONAL_FLOAT_KEYS:
            raise ConfigError(f"unknown configuration key '{key}'")
        if value is not None:
            value = _coerce(key, value if isinstance(value, str) else _format(value))
        self.values[key] = value

    def override(self, **overrides: Any) -> "RunConfig":
        """Copy with dotted keys given as ``train__alpha=0`` style keyword arguments."""
        clone = RunConfig(dict(self.values), self.source, self.preset)
        for name, value in overrides.items():
            clone.set(name.replace("__", "."), value)
        return clone

    def validate(self) -> None:
        if self["run.policy"] not in POLICIES:
            raise ConfigError(f"run.policy must be one of {POLICIES}, got '{self['run.policy']}'")
        for key in ("train.steps", "train.min_fill"):
            if self[key] < 0:
                raise ConfigError(f"{key} must be >= 0, got {self[key]}")
        for key in ("train.batch_size", "train.buffer_capacity", "run.eval_window",
                    "run.eval_interval", "run.workers", "model.num_heads",
                    "cem.episodes_per_candidate", "train.steps_per_session"):
            if self[key] < 1:
                raise ConfigError(f"{key} must be >= 1, got {self[key]}")
        if self["model.embedding_dim"] % self["model.num_heads"]:
            raise ConfigError("model.embedding_dim must be divisible by model.num_heads")
        if max(self["train.batch_size"], self["train.min_fill"]) > self["train.buffer_capacity"]:
            raise ConfigError("train.batch_size and train.min_fill must fit in train.buffer_capacity")
        self.env_config().validate()

    def resolved_lines(self) -> List[str]:
        lines = [f"# preset: {self.preset}"]
        for key in sorted(self.values):
            if self.values[key] is None:
                continue
            lines.append(f"{key} = {_format(self.values[key])}")
        return lines

    def write_resolved(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.resolved_lines()) + "\n", encoding="utf-8")
        return path

    # --- builders ---------------------------------------------------

    @property
    def effective_alpha(self) -> float:
        """The NIF ablation and ``train.alpha = 0`` both drop immediate feedback."""
        return 0.0 if self["ablation.nif"] else float(self["train.alpha"])

    def _per_behavior(self, kind: str) -> tuple:
        out = []
        for b in BEHAVIORS:
            calibrated = self[f"calib.{kind}.{b}"] if kind in ("omega", "c") else None
            out.append(calibrated if calibrated is not None else self[f"env.{kind}.{b}"])
        return tuple(float(v) for v in out)

    def env_config(self) -> EnvConfig:
        return EnvConfig(
            n_users=self["env.n_users"],
            n_items=self["env.n_items"],
            d_action=self["env.d_action"],
            d_feat=self["env.d_feat"],
            slate_size=self["env.slate_size"],
            max_steps=self["env.max_steps"],
            max_return_day=self["env.max_return_day"],
            max_history=self["env.max_history"],
            omega=self._per_behavior("omega"),
            kappa=self._per_behavior("kappa"),
            base_logit=self._per_behavior("c"),
            leave_theta=(
                self["env.leave_theta0"],
                self["env.leave_theta1"],
                self["env.leave_theta2"],
            ),
            return_kappa=self["env.return_kappa"],
            return_diversity=self["env.return_diversity"],
            drift=self["env.drift"],
            boredom=self["env.boredom"],
            boredom_window=self["env.boredom_window"],
            activity_range=(self["env.activity_low"], self["env.activity_high"]),
        )

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(
            d_feat=self["env.d_feat"],
            d_item=self["env.d_action"],
            n_behaviors=len(BEHAVIORS),
            d_model=self["model.embedding_dim"],
            num_heads=self["model.num_heads"],
            max_history=self["env.max_history"],
            context_window=self["model.context_window"],
            ncd=self["ablation.ncd"],
        )

    def hyper(self) -> Hyper:
        return Hyper(
            alpha=self.effective_alpha,
            beta_F=self["train.beta_F"],
            beta_B=self["train.beta_B"],
            beta_r=self["train.beta_r"],
            lr_flow=self["train.lr_flow"],
            lr_forward=self["train.lr_forward"],
            lr_backward=self["train.lr_backward"],
            batch_size=self["train.batch_size"],
            sigma_min=self["model.sigma_min"],
            d_action=self["env.d_action"],
            slate_size=self["env.slate_size"],
            hidden_dim=self["model.hidden_dim"],
            sif=self["ablation.sif"],
        )

    @property
    def seeds(self) -> "SeedStreams":
        return SeedStreams(self["run.seed"])


@dataclass(frozen=True)
class SeedStreams:
    """All randomness derives from one master seed through fixed offsets."""

    seed: int

    WORLD_OFFSET = 0
    INIT_OFFSET = 1
    SAMPLING_OFFSET = 2
    ACTOR_OFFSET = 100

    @property
    def world(self) -> int:
        return self.seed + self.WORLD_OFFSET

    def init_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed + self.INIT_OFFSET)

    def sampling_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed + self.SAMPLING_OFFSET)

    def actor_rng(self, index: int) -> np.random.Generator:
        return np.random.default_rng(self.seed + self.ACTOR_OFFSET + index)


def parse_lines(lines: Iterable[str], config: RunConfig) -> RunConfig:
    """Apply ``key = value`` lines on top of ``config`` (modified in place)."""
    seen: Dict[str, int] = {}
    for number, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigParseError(f"expected 'key = value', got '{text}'", number)
        key, raw = (part.strip() for part in text.split("=", 1))
        if key not in DEFAULTS and key not in OPTIONAL_FLOAT_KEYS:
            raise ConfigParseError(f"unknown key '{key}'", number)
        if key in seen:
            raise ConfigParseError(f"duplicate key '{key}' (first set on line {seen[key]})", number)
        seen[key] = number
        try:
            config.values[key] = _coerce(key, raw)
        except ValueError as exc:
            raise ConfigParseError(str(exc), number) from None
    return config


def parse_config(path: str | Path | None = None, preset: str = "kuairand") -> RunConfig:
    """
    Defaults, then ``preset``, then the file at ``path`` (if any).

    Args:
        path (str | Path | None): Config file in ``key = value`` syntax.
        preset (str): Name of a block of ``PRESETS``.

    Returns:
        RunConfig: Every key of ``DEFAULTS`` resolved.

    Raises:
        ConfigError: On an unknown preset.
        FileNotFoundError: When ``path`` does not exist.
        ConfigParseError: Unknown key, type mismatch or duplicate key; the
            message names the line.
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset '{preset}'; choose from {sorted(PRESETS)}")
    config = RunConfig(preset=preset)
    config.values.update(PRESETS[preset])
    if path is None:
        return config
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    config.source = path
    with open(path, mode="r", encoding="utf-8") as fh:
        parse_lines(fh, config)
    logger.info("Loaded configuration from %s (preset %s).", path, preset)
    return config
