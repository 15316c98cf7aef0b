"""Dense float64 building blocks with hand-written reverse-mode gradients.

Everything here is deliberately small and fixed-function: affine layers with
identity/relu/tanh nonlinearities, batched cosine similarity, an Adam step
over flat parameter dicts, and a central-difference gradient checker. Forward
passes that need gradients return a tape of recorded values; the matching
``*_backward`` function consumes it. All arrays are float64 and all
operations are pure functions of their inputs, so repeated evaluation is
bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericalError, ShapeError

ACTIVATIONS = ("identity", "relu", "tanh")

ParamDict = dict[str, np.ndarray]


def as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def finite_or_raise(arr: np.ndarray, context: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {context}")


@dataclass
class Layer:
    """One affine layer: out = act(x @ weight + bias)."""

    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = as_f64(self.weight)
        self.bias = as_f64(self.bias)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError(
                f"layer wants 2-d weight and 1-d bias, got {self.weight.shape} and {self.bias.shape}"
            )
        if self.weight.shape[1] != self.bias.shape[0]:
            raise ShapeError(
                f"weight out-dim {self.weight.shape[1]} != bias dim {self.bias.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class MlpParams:
    """A stack of affine layers; consecutive dimensions must chain."""

    layers: list[Layer]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ShapeError(
                    f"layer out-dim {a.weight.shape[1]} != next layer in-dim {b.weight.shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def copy(self) -> "MlpParams":
        return MlpParams(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def param_items(self, prefix: str) -> list[tuple[str, np.ndarray]]:
        """Named parameter arrays in declaration order (w0, b0, w1, ...)."""
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"{prefix}.w{i}", layer.weight))
            out.append((f"{prefix}.b{i}", layer.bias))
        return out


def mlp_init(
    dims: list[int], activations: list[str] | str, rng: np.random.Generator
) -> MlpParams:
    """Random MLP with the given dimension chain, scaled by fan-in."""
    if isinstance(activations, str):
        activations = [activations] * (len(dims) - 1)
    if len(activations) != len(dims) - 1:
        raise ShapeError(
            f"{len(dims) - 1} layers but {len(activations)} activation tags"
        )
    layers = []
    for i, act in enumerate(activations):
        fan_in = dims[i]
        gain = math.sqrt(2.0) if act == "relu" else 1.0
        w = rng.normal(0.0, gain / math.sqrt(fan_in), size=(dims[i], dims[i + 1]))
        b = np.zeros(dims[i + 1])
        layers.append(Layer(w, b, act))
    return MlpParams(layers)


def identity_mlp(dim: int) -> MlpParams:
    """Single identity layer (W=I, b=0), used as a pass-through encoder."""
    return MlpParams([Layer(np.eye(dim), np.zeros(dim), "identity")])


def _act_forward(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "identity":
        return pre
    if activation == "relu":
        return np.maximum(pre, 0.0)
    return np.tanh(pre)


def _act_backward(grad_out: np.ndarray, pre: np.ndarray, out: np.ndarray, activation: str) -> np.ndarray:
    if activation == "identity":
        return grad_out
    if activation == "relu":
        return grad_out * (pre > 0.0)
    return grad_out * (1.0 - out * out)


@dataclass
class MlpTape:
    """Recorded forward values: per-layer inputs, preactivations, outputs."""

    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, MlpTape]:
    """Forward pass recording a tape. x is (batch, in_dim)."""
    x = as_f64(x)
    if x.ndim != 2:
        raise ShapeError(f"mlp input wants 2-d (batch, features), got shape {x.shape}")
    if x.shape[1] != params.in_dim:
        raise ShapeError(
            f"mlp input has {x.shape[1]} features but first layer wants {params.in_dim}"
        )
    tape = MlpTape()
    out = x
    for layer in params.layers:
        tape.inputs.append(out)
        pre = out @ layer.weight + layer.bias
        tape.preacts.append(pre)
        out = _act_forward(pre, layer.activation)
        tape.outputs.append(out)
    return out, tape


def mlp_apply(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Forward pass without a tape; deterministic pure function."""
    out, _ = mlp_forward(params, x)
    return out


def mlp_backward(
    params: MlpParams, tape: MlpTape, grad_out: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Backprop grad_out (batch, out_dim) through the tape.

    Returns per-layer (dW, db) plus the gradient w.r.t. the input batch.
    """
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)  # type: ignore[list-item]
    g = as_f64(grad_out)
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        g_pre = _act_backward(g, tape.preacts[i], tape.outputs[i], layer.activation)
        dw = tape.inputs[i].T @ g_pre
        db = g_pre.sum(axis=0)
        grads[i] = (dw, db)
        g = g_pre @ layer.weight.T
    return grads, g


@dataclass
class CosineTape:
    """Recorded values for the cosine-similarity backward pass."""

    h_hat: np.ndarray  # (B, n) rows normalized; zero rows left as zero
    c_hat: np.ndarray  # (K, n)
    h_norm: np.ndarray  # (B,)
    c_norm: np.ndarray  # (K,)
    sims: np.ndarray  # (B, K)
    live: np.ndarray  # (B,) bool, False where ||h|| == 0


def cosine_sim_forward(h: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, CosineTape]:
    """Row-wise cosine similarities sims[i, k] = cos(h[i], c[k]).

    Rows of h with zero norm produce an all-zero similarity row and are
    excluded from the backward pass. Zero rows in c are rejected (the
    codebook invariant forbids them under cosine scoring).
    """
    h = as_f64(h)
    c = as_f64(c)
    h_norm = np.linalg.norm(h, axis=1)
    c_norm = np.linalg.norm(c, axis=1)
    if np.any(c_norm == 0.0):
        raise NumericalError("zero-norm codebook row under cosine similarity")
    live = h_norm > 0.0
    safe_h = np.where(live, h_norm, 1.0)
    h_hat = h / safe_h[:, None]
    c_hat = c / c_norm[:, None]
    sims = h_hat @ c_hat.T
    return sims, CosineTape(h_hat, c_hat, safe_h, c_norm, sims, live)


def cosine_sim_backward(
    tape: CosineTape, grad_sims: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (dH, dC) of a scalar loss given d(loss)/d(sims)."""
    g = as_f64(grad_sims) * tape.live[:, None]
    row_dot = (g * tape.sims).sum(axis=1)
    dh = (g @ tape.c_hat - tape.h_hat * row_dot[:, None]) / tape.h_norm[:, None]
    dh *= tape.live[:, None]
    col_dot = (g * tape.sims).sum(axis=0)
    dc = (g.T @ tape.h_hat - tape.c_hat * col_dot[:, None]) / tape.c_norm[:, None]
    return dh, dc


@dataclass
class AdamState:
    """First/second moment buffers plus a step counter, keyed like params."""

    step: int
    m: ParamDict
    v: ParamDict

    @classmethod
    def init(cls, params: ParamDict) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: ParamDict,
    grads: ParamDict,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ParamDict, AdamState]:
    """Standard Adam with bias correction; updates params/state in place."""
    if set(params) != set(grads):
        raise ShapeError(
            f"param keys {sorted(params)} != grad keys {sorted(grads)}"
        )
    state.step += 1
    t = state.step
    for k in sorted(params):
        p, g = params[k], grads[k]
        if p.shape != g.shape:
            raise ShapeError(f"{k}: param shape {p.shape} != grad shape {g.shape}")
        m, v = state.m[k], state.v[k]
        m[:] = beta1 * m + (1.0 - beta1) * g
        v[:] = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_key: str
    worst_index: tuple
    max_abs_analytic: float
    max_abs_fd: float
    n_coords: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    loss_fn: Callable[[ParamDict], tuple[float, ParamDict]],
    params: ParamDict,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    rel_floor: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    loss_fn(params) must return (scalar loss, grads keyed like params) and be
    smooth at params (discrete choices such as code assignments held fixed
    while coordinates are perturbed). Per-coordinate relative error is
    |a - f| / max(|a|, |f|, floor) with floor = rel_floor * max(1, ||f||_inf),
    absorbing the ~1e-10 noise floor of central differences at eps=1e-5.
    """
    loss0, analytic = loss_fn(params)
    if not math.isfinite(loss0):
        raise NumericalError(f"loss is not finite at the evaluation point: {loss0}")
    fd = {k: np.zeros_like(p) for k, p in params.items()}
    for k in sorted(params):
        p = params[k]
        flat = p.reshape(-1)
        fd_flat = fd[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp, _ = loss_fn(params)
            flat[i] = orig - epsilon
            lm, _ = loss_fn(params)
            flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise NumericalError(f"non-finite loss while perturbing {k}[{i}]")
            fd_flat[i] = (lp - lm) / (2.0 * epsilon)
    max_abs_fd = max((float(np.max(np.abs(a))) for a in fd.values()), default=0.0)
    max_abs_an = max(
        (float(np.max(np.abs(analytic[k]))) for k in params), default=0.0
    )
    floor = rel_floor * max(1.0, max_abs_fd)
    worst = (0.0, "", ())
    n_coords = 0
    for k in sorted(params):
        a, f = analytic[k], fd[k]
        if a.shape != f.shape:
            raise ShapeError(f"{k}: analytic shape {a.shape} != param shape {f.shape}")
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
        rel = np.abs(a - f) / denom
        n_coords += rel.size
        idx = np.unravel_index(int(np.argmax(rel)), rel.shape)
        if rel[idx] > worst[0]:
            worst = (float(rel[idx]), k, idx)
    return GradCheckReport(
        max_rel_error=worst[0],
        worst_key=worst[1],
        worst_index=worst[2],
        max_abs_analytic=max_abs_an,
        max_abs_fd=max_abs_fd,
        n_coords=n_coords,
        tolerance=tolerance,
    )
