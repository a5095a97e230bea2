"""
Generative-flow-network recommendation policy.

Four networks cooperate: the state encoder, a Gaussian forward policy over
action vectors, a backward estimator P_B(s_t | s_{t+1}) and the retention
flow F_R(s). They are trained jointly with the log-scale detailed-balance
objective in which the total flow factors into the learned retention flow
and the non-parametric immediate flow exp(alpha * sum of past rewards).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from retention_lab.exceptions import CheckpointError, DimensionError, NonFiniteError
from retention_lab.nn_core import (
    AdamState,
    MLPSpec,
    ParamSet,
    adam_step,
    backprop,
    init_mlp,
    mlp_forward,
    read_tensors,
    sigmoid,
    softplus,
    write_tensors,
)
from retention_lab.state_encoder import (
    EncoderSpec,
    Request,
    StateEmbedding,
    build_encoder,
    encode_batch,
    encode_batch_backward,
    encode_state,
)

logger = logging.getLogger(__name__)

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
FLOW_CLAMP = 30.0
NETWORKS = ("encoder", "forward", "backward", "flow")

ActionVector = np.ndarray


@dataclass(frozen=True)
class Hyper:
    alpha: float = 1.0
    beta_F: float = 1.0
    beta_B: float = 1.0
    beta_r: float = 0.5
    lr_flow: float = 0.00002
    lr_forward: float = 0.0001
    lr_backward: float = 0.0001
    batch_size: int = 128
    sigma_min: float = 0.05
    d_action: int = 8
    slate_size: int = 6
    hidden_dim: int = 128
    sif: bool = False

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        for name in ("beta_F", "beta_B", "beta_r", "sigma_min"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("lr_flow", "lr_forward", "lr_backward"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if min(self.batch_size, self.d_action, self.slate_size, self.hidden_dim) < 1:
            raise ValueError("batch_size, d_action, slate_size and hidden_dim must be positive")

    def learning_rate(self, network: str) -> float:
        return {
            "encoder": self.lr_forward,
            "forward": self.lr_forward,
            "backward": self.lr_backward,
            "flow": self.lr_flow,
        }[network]


@dataclass(frozen=True)
class GaussianParams:
    mu: np.ndarray
    sigma: np.ndarray


@dataclass(frozen=True)
class Transition:
    """
    One step of a session as consumed by the detailed-balance loss.

    Requests are stored raw so the encoder is re-run with current weights.
    ``reward_prefix`` is the sum of rewards before this step; on the terminal
    transition ``session_reward`` is the sum over r_1..r_{T-1}.
    """

    request: Request
    action: ActionVector
    reward: float
    next_request: Request
    is_terminal: bool
    retention: Optional[float] = None
    reward_prefix: float = 0.0
    session_reward: float = 0.0

    def __post_init__(self) -> None:
        if self.reward < 0:
            raise ValueError(f"immediate reward must be >= 0, got {self.reward}")
        if self.is_terminal != (self.retention is not None):
            raise ValueError("retention must be set exactly on terminal transitions")
        if self.retention is not None and not 0.0 < self.retention <= 1.0:
            raise ValueError(f"retention must lie in (0, 1], got {self.retention}")


@dataclass
class FlowNetworks:
    encoder_spec: EncoderSpec
    hyper: Hyper
    encoder: ParamSet
    forward: ParamSet
    backward: ParamSet
    flow: ParamSet

    def all(self) -> Dict[str, ParamSet]:
        return {name: getattr(self, name) for name in NETWORKS}

    def zero_grad(self) -> None:
        for params in self.all().values():
            params.zero_grad()

    def copy(self) -> "FlowNetworks":
        return FlowNetworks(
            self.encoder_spec,
            self.hyper,
            self.encoder.copy(),
            self.forward.copy(),
            self.backward.copy(),
            self.flow.copy(),
        )


def estimator_spec(in_dim: int, hidden: int, out_dim: int) -> MLPSpec:
    return MLPSpec((in_dim, hidden, out_dim), hidden_activation="tanh", output_activation="identity")


def _spec_from(params: ParamSet) -> MLPSpec:
    """Recover an estimator's widths from its weight shapes."""
    widths = [params.value("W0").shape[0]]
    i = 0
    while f"W{i}" in params:
        widths.append(params.value(f"W{i}").shape[1])
        i += 1
    return MLPSpec(tuple(widths), hidden_activation="tanh", output_activation="identity")


def build_networks(encoder_spec: EncoderSpec, hyper: Hyper, rng: np.random.Generator) -> FlowNetworks:
    if encoder_spec.d_item != hyper.d_action:
        raise DimensionError(
            f"item embedding size {encoder_spec.d_item} != action size {hyper.d_action}"
        )
    s_dim = encoder_spec.state_dim
    encoder = build_encoder(encoder_spec, rng)
    forward = ParamSet("forward")
    init_mlp(estimator_spec(s_dim, hyper.hidden_dim, 2 * hyper.d_action), forward, rng)
    backward = ParamSet("backward")
    init_mlp(estimator_spec(2 * s_dim + hyper.d_action, hyper.hidden_dim, 1), backward, rng)
    flow = ParamSet("flow")
    init_mlp(estimator_spec(s_dim, hyper.hidden_dim, 1), flow, rng)
    return FlowNetworks(encoder_spec, hyper, encoder, forward, backward, flow)


def _state_array(s: StateEmbedding | np.ndarray) -> np.ndarray:
    return s.s if isinstance(s, StateEmbedding) else np.asarray(s, dtype=np.float64)


# -------------------------------------------------------------------
# 1. Forward policy
# -------------------------------------------------------------------

def forward_policy(
    s: StateEmbedding | np.ndarray, params: ParamSet, sigma_min: float = 0.05
) -> GaussianParams:
    """Gaussian statistics: mu is the raw first half, sigma = softplus(second half) + sigma_min."""
    out, _ = mlp_forward(_spec_from(params), params, _state_array(s))
    d = out.shape[-1] // 2
    return GaussianParams(mu=out[..., :d], sigma=softplus(out[..., d:]) + sigma_min)


def sample_action(
    g: GaussianParams, rng: np.random.Generator, z: Optional[np.ndarray] = None
) -> ActionVector:
    """Reparameterized draw a = mu + sigma * z with z ~ N(0, I)."""
    if z is None:
        z = rng.standard_normal(np.shape(g.mu))
    return g.mu + g.sigma * z


def sample_action_backward(
    g: GaussianParams, z: np.ndarray, upstream: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of a sampled action with respect to (mu, sigma)."""
    return upstream, upstream * z


def action_to_slate(a: ActionVector, catalog: np.ndarray, K: int) -> List[int]:
    """Top-K item ids by <a, v_i>; ties go to the smaller id."""
    catalog = np.asarray(catalog, dtype=np.float64)
    if K > catalog.shape[0]:
        raise ValueError(f"K={K} exceeds catalog size {catalog.shape[0]}")
    if catalog.shape[1] != np.shape(a)[-1]:
        raise DimensionError(f"action length {np.shape(a)[-1]} != item embedding length {catalog.shape[1]}")
    scores = catalog @ np.asarray(a, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    return [int(i) for i in order[:K]]


def forward_log_density(g: GaussianParams, a: ActionVector) -> float | np.ndarray:
    """Diagonal Gaussian log density summed over action coordinates."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape != np.shape(g.mu):
        raise DimensionError(f"action shape {a.shape} != mu shape {np.shape(g.mu)}")
    z = (a - g.mu) / g.sigma
    log_density = (-0.5 * z * z - np.log(g.sigma) - LOG_SQRT_2PI).sum(axis=-1)
    return float(log_density) if np.ndim(log_density) == 0 else log_density


# -------------------------------------------------------------------
# 2. Flow and backward estimators
# -------------------------------------------------------------------

def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def flow_value(s: StateEmbedding | np.ndarray, params: ParamSet) -> float | np.ndarray:
    """Retention flow F_R(s) in (0, 1); the pre-activation is clamped to +-30."""
    pre, _ = mlp_forward(_spec_from(params), params, _state_array(s))
    value = sigmoid(np.clip(pre[..., 0], -FLOW_CLAMP, FLOW_CLAMP))
    return float(value) if np.ndim(value) == 0 else value


def backward_prob(
    s: StateEmbedding | np.ndarray,
    a: ActionVector,
    s_next: StateEmbedding | np.ndarray,
    params: ParamSet,
) -> float | np.ndarray:
    x = np.concatenate([_state_array(s), np.asarray(a, dtype=np.float64), _state_array(s_next)], axis=-1)
    pre, _ = mlp_forward(_spec_from(params), params, x)
    value = sigmoid(np.clip(pre[..., 0], -FLOW_CLAMP, FLOW_CLAMP))
    return float(value) if np.ndim(value) == 0 else value


# -------------------------------------------------------------------
# 3. Reward integration
# -------------------------------------------------------------------

def log_reward_integrate(retention: float, immediate: Sequence[float], alpha: float) -> float:
    if retention <= 0:
        raise ValueError(f"retention must be > 0, got {retention}")
    return math.log(retention) + alpha * math.fsum(immediate)


def reward_integrate(retention: float, immediate: Sequence[float], alpha: float) -> float:
    """R * exp(alpha * sum r); large exponents go through log space."""
    if retention <= 0:
        raise ValueError(f"retention must be > 0, got {retention}")
    if any(r < 0 for r in immediate):
        raise ValueError("immediate rewards must be >= 0")
    exponent = alpha * math.fsum(immediate)
    if exponent == 0.0:
        return float(retention)
    if exponent <= 500.0:
        return retention * math.exp(exponent)
    log_value = log_reward_integrate(retention, immediate, alpha)
    if log_value > 709.0:
        raise NonFiniteError(
            f"integrated reward exp({log_value:.1f}) overflows; use log_reward_integrate"
        )
    return math.exp(log_value)


def immediate_flow(immediate_prefix: Sequence[float]) -> float:
    return math.exp(math.fsum(immediate_prefix))


# -------------------------------------------------------------------
# 4. Detailed-balance objective
# -------------------------------------------------------------------

@dataclass
class LossResult:
    mean_loss: float
    losses: np.ndarray
    residuals: np.ndarray
    terms: Dict[str, np.ndarray] = field(default_factory=dict)


def terminal_target(t: Transition, hyper: Hyper) -> float:
    if hyper.sif:
        log_integrated = math.log(t.retention) + hyper.alpha * t.session_reward
        return float(np.logaddexp(log_integrated, math.log(hyper.beta_r)))
    return math.log(t.retention + hyper.beta_r)


def batch_db_loss(
    transitions: Sequence[Transition],
    nets: FlowNetworks,
    hyper: Optional[Hyper] = None,
    compute_grad: bool = False,
) -> LossResult:
    """
    Mean detailed-balance loss over a batch of transitions.

    Non-terminal residual:
        ln F_R(s_t) + ln(P_F + beta_F) - ln F_R(s_{t+1}) - ln(P_B + beta_B) - alpha * r_t
    Terminal residual:
        ln F_R(s_T) - ln(R + beta_r)

    With ``compute_grad`` the gradients of the mean loss are accumulated into
    all four networks.
    """
    hyper = hyper or nets.hyper
    B = len(transitions)
    if B == 0:
        raise ValueError("empty batch")
    requests = [t.request for t in transitions] + [t.next_request for t in transitions]
    S, enc_cache = encode_batch(nets.encoder_spec, nets.encoder, requests)
    S_t, S_n = S[:B], S[B:]
    A = np.stack([np.asarray(t.action, dtype=np.float64) for t in transitions])
    rewards = np.array([t.reward for t in transitions])
    terminal = np.array([t.is_terminal for t in transitions])
    step_mask = (~terminal).astype(np.float64)

    flow_pre, flow_cache = mlp_forward(_spec_from(nets.flow), nets.flow, S)
    flow_pre = flow_pre[:, 0]
    flow_clipped = np.clip(flow_pre, -FLOW_CLAMP, FLOW_CLAMP)
    log_flow = _log_sigmoid(flow_clipped)
    log_flow_t, log_flow_n = log_flow[:B], log_flow[B:]

    fwd_out, fwd_cache = mlp_forward(_spec_from(nets.forward), nets.forward, S_t)
    d = hyper.d_action
    mu, raw_sigma = fwd_out[:, :d], fwd_out[:, d:]
    sigma = softplus(raw_sigma) + hyper.sigma_min
    z = (A - mu) / sigma
    log_density = (-0.5 * z * z - np.log(sigma) - LOG_SQRT_2PI).sum(axis=1)
    log_pf = np.logaddexp(log_density, math.log(hyper.beta_F))

    bwd_in = np.concatenate([S_t, A, S_n], axis=1)
    bwd_pre, bwd_cache = mlp_forward(_spec_from(nets.backward), nets.backward, bwd_in)
    bwd_pre = bwd_pre[:, 0]
    p_b = sigmoid(np.clip(bwd_pre, -FLOW_CLAMP, FLOW_CLAMP))
    log_pb = np.log(p_b + hyper.beta_B)

    reward_term = 0.0 if hyper.sif else hyper.alpha
    step_residual = log_flow_t + log_pf - log_flow_n - log_pb - reward_term * rewards
    targets = np.array(
        [terminal_target(t, hyper) if t.is_terminal else 0.0 for t in transitions]
    )
    residuals = np.where(terminal, log_flow_t - targets, step_residual)
    bad = np.flatnonzero(~np.isfinite(residuals))
    if bad.size:
        raise NonFiniteError(
            f"non-finite detailed-balance residual at transition {int(bad[0])}", index=int(bad[0])
        )
    losses = residuals * residuals
    result = LossResult(
        mean_loss=float(losses.mean()),
        losses=losses,
        residuals=residuals,
        terms={
            "log_flow_t": log_flow_t,
            "log_flow_next": log_flow_n,
            "log_pf": log_pf,
            "log_pb": log_pb,
        },
    )
    if not compute_grad:
        return result

    g = 2.0 * residuals / B
    inside = (np.abs(flow_pre) < FLOW_CLAMP).astype(np.float64)
    d_log_flow = np.concatenate([g, -g * step_mask])
    d_flow_pre = d_log_flow * sigmoid(-flow_clipped) * inside
    dS = backprop(flow_cache, d_flow_pre[:, None])

    d_log_density = g * step_mask * np.exp(log_density - log_pf)
    d_mu = d_log_density[:, None] * z / sigma
    d_sigma = d_log_density[:, None] * (z * z - 1.0) / sigma
    d_raw = d_sigma * sigmoid(raw_sigma)
    dS[:B] += backprop(fwd_cache, np.concatenate([d_mu, d_raw], axis=1))

    inside_b = (np.abs(bwd_pre) < FLOW_CLAMP).astype(np.float64)
    d_bwd_pre = -g * step_mask * p_b * (1.0 - p_b) / (p_b + hyper.beta_B) * inside_b
    d_bwd_in = backprop(bwd_cache, d_bwd_pre[:, None])
    s_dim = S.shape[1]
    dS[:B] += d_bwd_in[:, :s_dim]
    dS[B:] += d_bwd_in[:, s_dim + d:]

    encode_batch_backward(enc_cache, dS)
    return result


def db_loss(t: Transition, nets: FlowNetworks, hyper: Optional[Hyper] = None) -> float:
    return batch_db_loss([t], nets, hyper).mean_loss


def decomposed_residual(t: Transition, nets: FlowNetworks, hyper: Optional[Hyper] = None) -> float:
    """
    Residual written with the full flow F = F_R * F_I ** alpha.

    ln F(s_t) + ln(P_F + beta_F) - ln F(s_{t+1}) - ln(P_B + beta_B), where
    F_I(s_t) = exp(reward_prefix) and F_I(s_{t+1}) = exp(reward_prefix + r_t).
    Every term is evaluated on its own through the single-state estimators.
    """
    hyper = hyper or nets.hyper
    spec = nets.encoder_spec
    s = encode_state(t.request.features, t.request.history, nets.encoder, spec)
    s_next = encode_state(t.next_request.features, t.next_request.history, nets.encoder, spec)
    g = forward_policy(s, nets.forward, hyper.sigma_min)
    log_pf = float(np.logaddexp(forward_log_density(g, t.action), math.log(hyper.beta_F)))
    log_pb = math.log(backward_prob(s, t.action, s_next, nets.backward) + hyper.beta_B)
    log_total_t = math.log(flow_value(s, nets.flow)) + hyper.alpha * math.log(
        immediate_flow([t.reward_prefix])
    )
    log_total_n = math.log(flow_value(s_next, nets.flow)) + hyper.alpha * math.log(
        immediate_flow([t.reward_prefix, t.reward])
    )
    return log_total_t + log_pf - log_total_n - log_pb


def check_finite_grads(nets: FlowNetworks) -> None:
    """Raise NonFiniteError before any network is stepped if a gradient is NaN/inf."""
    for net, params in nets.all().items():
        for name, _, grad in params.items():
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError(f"non-finite gradient in '{net}.{name}'", name=f"{net}.{name}")


def train_step(
    batch: Sequence[Transition],
    nets: FlowNetworks,
    opt: Dict[str, AdamState],
    hyper: Optional[Hyper] = None,
) -> float:
    """
    One Adam step per network on the mean detailed-balance loss.

    Args:
        batch (Sequence[Transition]): Exactly ``hyper.batch_size`` transitions.
        nets (FlowNetworks): Networks to update in place.
        opt (Dict[str, AdamState]): Adam state per network name.
        hyper (Optional[Hyper]): Defaults to ``nets.hyper``.

    Returns:
        float: Mean loss of the batch before the update.

    Raises:
        ValueError: On an empty batch or a batch of the wrong size.
        NonFiniteError: On a non-finite loss or gradient; no network is touched.
    """
    hyper = hyper or nets.hyper
    if not batch:
        raise ValueError("train_step needs a non-empty batch")
    if len(batch) != hyper.batch_size:
        raise ValueError(f"batch holds {len(batch)} transitions, expected {hyper.batch_size}")
    nets.zero_grad()
    result = batch_db_loss(batch, nets, hyper, compute_grad=True)
    check_finite_grads(nets)
    for name, params in nets.all().items():
        adam_step(params, opt[name], hyper.learning_rate(name))
    return result.mean_loss


def make_optimizers(nets: FlowNetworks) -> Dict[str, AdamState]:
    return {name: AdamState.for_params(params) for name, params in nets.all().items()}


# -------------------------------------------------------------------
# 5. Acting
# -------------------------------------------------------------------

class FlowPolicy:
    """Samples actions from the Gaussian forward policy of a network snapshot."""

    tag = "gfn"

    def __init__(self, nets: FlowNetworks) -> None:
        self.nets = nets

    def state(self, request: Request) -> np.ndarray:
        S, _ = encode_batch(self.nets.encoder_spec, self.nets.encoder, [request])
        return S[0]

    def act(self, request: Request, rng: np.random.Generator) -> ActionVector:
        g = forward_policy(self.state(request), self.nets.forward, self.nets.hyper.sigma_min)
        return sample_action(g, rng)


# -------------------------------------------------------------------
# 6. Checkpoints
# -------------------------------------------------------------------

def save_checkpoint(fh: TextIO, nets: FlowNetworks) -> None:
    h = nets.hyper
    fh.write(
        " ".join(repr(float(v)) for v in (h.alpha, h.beta_F, h.beta_B, h.beta_r))
        + f" {h.d_action} {h.slate_size}\n"
    )
    write_tensors(
        fh,
        [
            (f"{net}.{name}", value)
            for net, params in nets.all().items()
            for name, value, _ in params.items()
        ],
    )


def load_checkpoint(fh: TextIO, nets: FlowNetworks) -> FlowNetworks:
    """Fill ``nets`` (built from the current config) with checkpointed values."""
    lines = iter(fh)
    try:
        header = next(lines).split()
        d_action, slate_size = int(header[4]), int(header[5])
    except (StopIteration, IndexError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    if d_action != nets.hyper.d_action or slate_size != nets.hyper.slate_size:
        raise CheckpointError(
            f"checkpoint has d_action={d_action}, K={slate_size}; "
            f"config has d_action={nets.hyper.d_action}, K={nets.hyper.slate_size}"
        )
    try:
        tensors = read_tensors(lines)
    except (StopIteration, ValueError) as exc:
        raise CheckpointError(f"truncated or malformed checkpoint: {exc}") from exc
    for net, params in nets.all().items():
        for name, value, _ in params.items():
            key = f"{net}.{name}"
            if key not in tensors:
                raise CheckpointError(f"checkpoint lacks tensor '{key}'")
            if tensors[key].shape != value.shape:
                raise CheckpointError(
                    f"tensor '{key}' has shape {tensors[key].shape}, config expects {value.shape}"
                )
            value[...] = tensors[key]
        params.version += 1
    return nets
