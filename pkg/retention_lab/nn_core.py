"""
Minimal differentiable-network substrate.

Dense layers, a single-block multi-head self-attention encoder, hand-written
reverse-mode gradients, Adam and a finite-difference gradient checker. All
arithmetic is float64; layers compute ``y = x @ W + b`` with ``W`` shaped
``(fan_in, fan_out)`` and ``b`` shaped ``(1, fan_out)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, TextIO, Tuple

import numpy as np

from retention_lab.exceptions import DimensionError, NonFiniteError, UsageError

logger = logging.getLogger(__name__)

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("identity", "sigmoid", "softplus")


# -------------------------------------------------------------------
# 1. Parameters
# -------------------------------------------------------------------

class ParamSet:
    """
    Ordered collection of named float64 tensors, each with a gradient slot.

    ``version`` increases whenever the optimizer rewrites the values; caches
    created by a forward pass remember it so a stale backprop is detected.
    """

    def __init__(self, name: str = "") -> None:
        self.name = name
        self.version = 0
        self._values: Dict[str, np.ndarray] = {}
        self._grads: Dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._values:
            raise ValueError(f"duplicate parameter name '{name}' in ParamSet '{self.name}'")
        value = np.array(value, dtype=np.float64, copy=True)
        if value.ndim != 2:
            raise DimensionError(f"parameter '{name}' must be 2-D, got shape {value.shape}")
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def value(self, name: str) -> np.ndarray:
        try:
            return self._values[name]
        except KeyError:
            raise DimensionError(f"ParamSet '{self.name}' has no parameter '{name}'") from None

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def names(self) -> List[str]:
        return list(self._values)

    def items(self) -> Iterator[Tuple[str, np.ndarray, np.ndarray]]:
        for name, value in self._values.items():
            yield name, value, self._grads[name]

    def zero_grad(self) -> None:
        for grad in self._grads.values():
            grad.fill(0.0)

    def num_elements(self) -> int:
        return int(sum(v.size for v in self._values.values()))

    def copy(self) -> "ParamSet":
        clone = ParamSet(self.name)
        for name, value in self._values.items():
            clone.add(name, value)
        clone.version = self.version
        return clone

    def __contains__(self, name: object) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# -------------------------------------------------------------------
# 2. Dense networks
# -------------------------------------------------------------------

@dataclass(frozen=True)
class MLPSpec:
    layer_widths: Tuple[int, ...]
    hidden_activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self) -> None:
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or min(widths) < 1:
            raise DimensionError(f"MLP needs at least 2 positive widths, got {widths}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation '{self.hidden_activation}'")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation '{self.output_activation}'")

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths) - 1


def init_mlp(spec: MLPSpec, params: ParamSet, rng: np.random.Generator, prefix: str = "") -> None:
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
        params.add(f"{prefix}W{i}", glorot_uniform(rng, fan_in, fan_out))
        params.add(f"{prefix}b{i}", np.zeros((1, fan_out)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _activate(kind: str, pre: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return pre
    if kind == "relu":
        return np.maximum(pre, 0.0)
    if kind == "tanh":
        return np.tanh(pre)
    if kind == "sigmoid":
        return sigmoid(pre)
    return softplus(pre)


def _activation_grad(kind: str, pre: np.ndarray, out: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return np.ones_like(pre)
    if kind == "relu":
        return (pre > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - out * out
    if kind == "sigmoid":
        return out * (1.0 - out)
    return sigmoid(pre)


@dataclass
class MLPCache:
    spec: MLPSpec
    params: ParamSet
    prefix: str
    version: int
    inputs: List[np.ndarray]
    pre: List[np.ndarray]
    outputs: List[np.ndarray]
    squeeze: bool


def mlp_forward(
    spec: MLPSpec, params: ParamSet, x: np.ndarray, prefix: str = ""
) -> Tuple[np.ndarray, MLPCache]:
    """
    Run a dense network on a vector or a batch of row vectors.

    Args:
        spec (MLPSpec): Layer widths and activations.
        params (ParamSet): Holds ``{prefix}W{i}`` and ``{prefix}b{i}``.
        x (np.ndarray): ``(n_in,)`` or ``(B, n_in)`` input.
        prefix (str): Name prefix of this network's tensors.

    Returns:
        Tuple[np.ndarray, MLPCache]: Output with the same leading shape as
        ``x``, and the cache ``backprop`` needs for exact gradients.

    Raises:
        DimensionError: On an input or weight with the wrong shape.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != spec.layer_widths[0]:
        raise DimensionError(
            f"MLP input has shape {x.shape}, expected last dim {spec.layer_widths[0]}"
        )
    inputs, pres, outs = [], [], []
    for i in range(spec.num_layers):
        W = params.value(f"{prefix}W{i}")
        b = params.value(f"{prefix}b{i}")
        if W.shape != (spec.layer_widths[i], spec.layer_widths[i + 1]):
            raise DimensionError(f"parameter '{prefix}W{i}' has shape {W.shape}")
        inputs.append(h)
        pre = h @ W + b
        kind = spec.output_activation if i == spec.num_layers - 1 else spec.hidden_activation
        h = _activate(kind, pre)
        pres.append(pre)
        outs.append(h)
    cache = MLPCache(spec, params, prefix, params.version, inputs, pres, outs, squeeze)
    return (h[0] if squeeze else h), cache


def backprop(cache: MLPCache, upstream_grad: np.ndarray) -> np.ndarray:
    """
    Accumulate parameter gradients for one forward call and return dL/dx.

    Gradients are added to the ParamSet slots, never overwritten.

    Args:
        cache (MLPCache): From the matching ``mlp_forward`` call.
        upstream_grad (np.ndarray): dL/d(output), shaped like the output.

    Returns:
        np.ndarray: dL/dx, shaped like the forward input.

    Raises:
        UsageError: When the parameters changed after the forward pass.
    """
    if cache.params.version != cache.version:
        raise UsageError(
            f"stale MLP cache: parameters of '{cache.params.name}' changed since the forward pass"
        )
    g = np.asarray(upstream_grad, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != cache.outputs[-1].shape:
        raise UsageError(f"upstream gradient shape {g.shape} != output shape {cache.outputs[-1].shape}")
    spec, params, prefix = cache.spec, cache.params, cache.prefix
    for i in reversed(range(spec.num_layers)):
        kind = spec.output_activation if i == spec.num_layers - 1 else spec.hidden_activation
        g = g * _activation_grad(kind, cache.pre[i], cache.outputs[i])
        params.grad(f"{prefix}W{i}")[...] += cache.inputs[i].T @ g
        params.grad(f"{prefix}b{i}")[...] += g.sum(axis=0, keepdims=True)
        g = g @ params.value(f"{prefix}W{i}").T
    return g[0] if cache.squeeze else g


# -------------------------------------------------------------------
# 3. Self-attention block
# -------------------------------------------------------------------

@dataclass(frozen=True)
class AttentionSpec:
    model_dim: int = 32
    num_heads: int = 4

    def __post_init__(self) -> None:
        if self.model_dim < 1 or self.num_heads < 1 or self.model_dim % self.num_heads:
            raise DimensionError(
                f"model_dim {self.model_dim} must be divisible by num_heads {self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def init_attention(
    spec: AttentionSpec, params: ParamSet, rng: np.random.Generator, prefix: str = "attn_"
) -> None:
    d = spec.model_dim
    for name in ("Wq", "Wk", "Wv", "Wo"):
        params.add(f"{prefix}{name}", glorot_uniform(rng, d, d))


@dataclass
class AttentionCache:
    spec: AttentionSpec
    params: ParamSet
    prefix: str
    version: int
    X: np.ndarray
    lengths: np.ndarray
    last: np.ndarray
    q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    P: np.ndarray
    ctx: np.ndarray


def attention_forward(
    spec: AttentionSpec,
    params: ParamSet,
    X: np.ndarray,
    lengths: np.ndarray,
    prefix: str = "attn_",
) -> Tuple[np.ndarray, AttentionCache]:
    """
    Batched single attention block, returning only the last valid position.

    ``X`` is ``(B, L, d)`` left-aligned; row ``b`` is valid up to ``lengths[b]``.
    Only the last position's output is needed downstream, so the query is
    formed from that token alone; keys and values cover the valid prefix.
    """
    X = np.asarray(X, dtype=np.float64)
    lengths = np.asarray(lengths, dtype=np.int64)
    B, L, d = X.shape
    if d != spec.model_dim:
        raise DimensionError(f"attention input dim {d} != model_dim {spec.model_dim}")
    if np.any(lengths < 1) or np.any(lengths > L):
        raise DimensionError("every sequence needs between 1 and L valid positions")
    H, dh = spec.num_heads, spec.head_dim
    Wq, Wk, Wv, Wo = (params.value(f"{prefix}{n}") for n in ("Wq", "Wk", "Wv", "Wo"))

    last = X[np.arange(B), lengths - 1]
    q = (last @ Wq).reshape(B, H, dh)
    K = (X @ Wk).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
    V = (X @ Wv).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
    scores = np.einsum("bhd,bhld->bhl", q, K) / np.sqrt(dh)
    valid = (np.arange(L)[None, :] < lengths[:, None])[:, None, :]
    scores = np.where(valid, scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    P = np.where(valid, np.exp(scores), 0.0)
    P = P / P.sum(axis=-1, keepdims=True)
    ctx = np.einsum("bhl,bhld->bhd", P, V).reshape(B, d)
    out = last + ctx @ Wo
    cache = AttentionCache(spec, params, prefix, params.version, X, lengths, last, q, K, V, P, ctx)
    return out, cache


def attention_backward(cache: AttentionCache, dout: np.ndarray) -> np.ndarray:
    """Accumulate attention parameter gradients and return dL/dX (B, L, d)."""
    if cache.params.version != cache.version:
        raise UsageError("stale attention cache: parameters changed since the forward pass")
    spec, params, prefix = cache.spec, cache.params, cache.prefix
    X, P, q, K, V = cache.X, cache.P, cache.q, cache.K, cache.V
    B, L, d = X.shape
    H, dh = spec.num_heads, spec.head_dim
    Wq, Wk, Wv, Wo = (params.value(f"{prefix}{n}") for n in ("Wq", "Wk", "Wv", "Wo"))
    scale = 1.0 / np.sqrt(dh)

    params.grad(f"{prefix}Wo")[...] += cache.ctx.T @ dout
    dctx = (dout @ Wo.T).reshape(B, H, dh)
    dP = np.einsum("bhd,bhld->bhl", dctx, V)
    dV = np.einsum("bhl,bhd->bhld", P, dctx)
    dscores = P * (dP - (P * dP).sum(axis=-1, keepdims=True))
    dq = np.einsum("bhl,bhld->bhd", dscores, K) * scale
    dK = np.einsum("bhl,bhd->bhld", dscores, q) * scale

    dK = dK.transpose(0, 2, 1, 3).reshape(B, L, d)
    dV = dV.transpose(0, 2, 1, 3).reshape(B, L, d)
    dq = dq.reshape(B, d)
    params.grad(f"{prefix}Wk")[...] += np.einsum("bli,blj->ij", X, dK)
    params.grad(f"{prefix}Wv")[...] += np.einsum("bli,blj->ij", X, dV)
    params.grad(f"{prefix}Wq")[...] += cache.last.T @ dq

    dX = dK @ Wk.T + dV @ Wv.T
    dX[np.arange(B), cache.lengths - 1] += dq @ Wq.T + dout
    return dX


def attention_encode(
    spec: AttentionSpec, params: ParamSet, sequence: Iterable[np.ndarray], prefix: str = "attn_"
) -> np.ndarray:
    """Encode one sequence and return the last position's output."""
    seq = np.asarray(list(sequence), dtype=np.float64)
    if seq.size == 0:
        raise ValueError("attention_encode needs a non-empty sequence; substitute the pad token")
    if seq.ndim != 2:
        raise DimensionError(f"sequence must be a list of vectors, got shape {seq.shape}")
    out, _ = attention_forward(spec, params, seq[None], np.array([seq.shape[0]]), prefix)
    return out[0]


# -------------------------------------------------------------------
# 4. Optimizer
# -------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamSet, **kwargs) -> "AdamState":
        m = {name: np.zeros_like(value) for name, value, _ in params.items()}
        v = {name: np.zeros_like(value) for name, value, _ in params.items()}
        return cls(m=m, v=v, **kwargs)


def adam_step(params: ParamSet, state: AdamState, lr: float) -> Tuple[ParamSet, AdamState]:
    """
    Bias-corrected Adam update in place; gradients are zeroed afterwards.

    Args:
        params (ParamSet): Values and accumulated gradients of one network.
        state (AdamState): Moment estimates for ``params``.
        lr (float): Step size.

    Returns:
        Tuple[ParamSet, AdamState]: The updated ``params`` and ``state``.

    Raises:
        NonFiniteError: If any gradient holds NaN/inf. No parameter is touched.
    """
    step = state.step_count + 1
    for name, _, grad in params.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(
                f"non-finite gradient in '{params.name}.{name}' at step {step}",
                name=name,
                step=step,
            )
    state.step_count = step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, value, grad in params.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.zero_grad()
    params.version += 1
    return params, state


# -------------------------------------------------------------------
# 5. Finite-difference gradient checker
# -------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    offending_name: Optional[str]
    tol: float
    checked: int = 0
    per_tensor: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)


def gradient_check(
    fn: Callable[[], float],
    params: ParamSet,
    eps: float = 1e-3,
    tol: float = 1e-4,
    scale_floor: float = 1e-2,
    max_per_tensor: int = 64,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """
    Compare analytic gradients with central finite differences.

    Args:
        fn (Callable[[], float]): Deterministic scalar function; each call
            must accumulate its analytic gradient into ``params``.
        params (ParamSet): Parameters to perturb. At most ``max_per_tensor``
            elements per tensor are checked (all of them when smaller).
        eps (float): Central-difference step.
        tol (float): Largest accepted relative error.
        scale_floor (float): Lower bound on the relative-error denominator, so
            near-zero gradients are judged on absolute error.
        max_per_tensor (int): Sample size per tensor.
        rng (Optional[np.random.Generator]): Picks the sampled elements.

    Returns:
        GradCheckReport: Worst relative error overall and per tensor.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    params.zero_grad()
    fn()
    analytic = {name: grad.copy() for name, _, grad in params.items()}

    report = GradCheckReport(max_rel_error=0.0, offending_name=None, tol=tol)
    for name, value, _ in params.items():
        flat = value.reshape(-1)
        if flat.size <= max_per_tensor:
            indices = np.arange(flat.size)
        else:
            indices = np.sort(rng.choice(flat.size, size=max_per_tensor, replace=False))
        worst = 0.0
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + eps
            f_plus = fn()
            flat[idx] = original - eps
            f_minus = fn()
            flat[idx] = original
            numeric = (f_plus - f_minus) / (2.0 * eps)
            exact = analytic[name].reshape(-1)[idx]
            denom = max(abs(exact), abs(numeric), scale_floor)
            worst = max(worst, abs(exact - numeric) / denom)
        report.per_tensor[name] = worst
        report.checked += len(indices)
        if worst > report.max_rel_error:
            report.max_rel_error = worst
            report.offending_name = name
    params.zero_grad()
    logger.debug(
        "Gradient check on '%s': %d elements, max relative error %.3e (%s).",
        params.name,
        report.checked,
        report.max_rel_error,
        report.offending_name,
    )
    return report


# -------------------------------------------------------------------
# 6. Text tensor format
# -------------------------------------------------------------------

def write_tensors(fh: TextIO, tensors: Iterable[Tuple[str, np.ndarray]]) -> None:
    """Write ``name rows cols`` headers followed by rows of full-precision reals, sorted by name."""
    for name, value in sorted(tensors, key=lambda item: item[0]):
        value = np.atleast_2d(np.asarray(value, dtype=np.float64))
        rows, cols = value.shape
        fh.write(f"{name} {rows} {cols}\n")
        for row in value:
            fh.write(" ".join(repr(float(x)) for x in row))
            fh.write("\n")


def read_tensors(lines: Iterator[str]) -> Dict[str, np.ndarray]:
    """
    Parse blocks written by ``write_tensors``.

    Args:
        lines (Iterator[str]): Remaining lines of an open file.

    Returns:
        Dict[str, np.ndarray]: Tensors by name.

    Raises:
        ValueError: On a malformed header or row.
        StopIteration: When the file ends inside a block.
    """
    tensors: Dict[str, np.ndarray] = {}
    for header in lines:
        header = header.strip()
        if not header:
            continue
        name, rows, cols = header.split()
        rows, cols = int(rows), int(cols)
        data = [list(map(float, next(lines).split())) for _ in range(rows)]
        tensor = np.array(data, dtype=np.float64).reshape(rows, cols)
        tensors[name] = tensor
    return tensors
