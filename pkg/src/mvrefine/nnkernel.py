"""Minimal dense-network kernel: MLPs with exact reverse-mode gradients.

Everything runs in float64. Layers are plain affine maps with optional relu,
an optional residual branch (input added to the stack output), and an
optional final layer norm with learnable gain/bias. A forward pass records a
Tape of intermediates; the matching backward pass replays it exactly once.

Parameter containers are flat name->array dicts wherever optimizers or
checkpoints are involved; DenseParams owns the structured view.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimMismatch, ShapeMismatch, TapeReuse

LN_EPS = 1e-12


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class DenseLayer:
    weights: np.ndarray   # (out, in)
    bias: np.ndarray      # (out,)


@dataclass
class DenseParams:
    """An MLP: affine layers, per-layer activation tags, optional extras.

    activations[i] is 'relu' or 'none' and applies after layer i. When
    `residual` is set the input is added to the stack output (dims must
    match); `layer_norm` then normalizes per vector with learnable
    gain/bias.
    """

    layers: list[DenseLayer]
    activations: list[str]
    residual: bool = False
    layer_norm: bool = False
    ln_gain: np.ndarray | None = None
    ln_bias: np.ndarray | None = None

    def __post_init__(self):
        if len(self.layers) != len(self.activations):
            raise ShapeMismatch("one activation tag per layer required")
        for i in range(1, len(self.layers)):
            need = self.layers[i].weights.shape[1]
            have = self.layers[i - 1].weights.shape[0]
            if need != have:
                raise ShapeMismatch(f"layer {i} expects input dim {need}, got {have}")
        if self.residual and self.layers[-1].weights.shape[0] != self.layers[0].weights.shape[1]:
            raise ShapeMismatch("residual branch requires matching in/out dims")
        if self.layer_norm:
            d = self.layers[-1].weights.shape[0]
            if self.ln_gain is None:
                self.ln_gain = np.ones(d)
            if self.ln_bias is None:
                self.ln_bias = np.zeros(d)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weights.shape[0]

    def named_tensors(self, prefix: str = ""):
        for i, layer in enumerate(self.layers):
            yield f"{prefix}layers.{i}.W", layer.weights
            yield f"{prefix}layers.{i}.b", layer.bias
        if self.layer_norm:
            yield f"{prefix}ln.gain", self.ln_gain
            yield f"{prefix}ln.bias", self.ln_bias

    def replace_tensors(self, values: dict, prefix: str = "") -> "DenseParams":
        layers = [
            DenseLayer(values[f"{prefix}layers.{i}.W"], values[f"{prefix}layers.{i}.b"])
            for i in range(len(self.layers))
        ]
        out = DenseParams(layers, list(self.activations), self.residual, self.layer_norm)
        if self.layer_norm:
            out.ln_gain = values[f"{prefix}ln.gain"]
            out.ln_bias = values[f"{prefix}ln.bias"]
        return out


@dataclass
class Tape:
    """Primal intermediates of one forward pass; consumable exactly once."""

    x: np.ndarray
    pre_acts: list = field(default_factory=list)
    post_acts: list = field(default_factory=list)
    ln_normed: np.ndarray | None = None
    ln_inv_std: np.ndarray | None = None
    consumed: bool = False


def mlp_forward_batch(params: DenseParams, x: np.ndarray):
    """Forward an (n, in_dim) batch; returns ((n, out_dim), Tape)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise DimMismatch(f"expected (n, {params.in_dim}) input, got {x.shape}")
    tape = Tape(x=x)
    h = x
    for layer, act in zip(params.layers, params.activations):
        z = h @ layer.weights.T + layer.bias
        tape.pre_acts.append(z)
        h = relu(z) if act == "relu" else z
        tape.post_acts.append(h)
    if params.residual:
        h = h + x
    if params.layer_norm:
        mu = h.mean(axis=1, keepdims=True)
        c = h - mu
        var = (c * c).mean(axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + LN_EPS)
        normed = c * inv_std
        tape.ln_normed = normed
        tape.ln_inv_std = inv_std
        h = normed * params.ln_gain + params.ln_bias
    return h, tape


def mlp_backward_batch(params: DenseParams, tape: Tape, upstream: np.ndarray):
    """Exact reverse-mode pass. Returns (grads dict, input gradient).

    Gradient keys mirror DenseParams.named_tensors. Raises TapeReuse when the
    tape was already consumed.
    """
    if tape.consumed:
        raise TapeReuse("tape already consumed by a backward pass")
    tape.consumed = True
    g = np.asarray(upstream, dtype=float)
    grads: dict[str, np.ndarray] = {}

    if params.layer_norm:
        n, s = tape.ln_normed, tape.ln_inv_std
        grads["ln.gain"] = (g * n).sum(axis=0)
        grads["ln.bias"] = g.sum(axis=0)
        dn = g * params.ln_gain
        g = s * (dn - dn.mean(axis=1, keepdims=True)
                 - n * (dn * n).mean(axis=1, keepdims=True))

    dx_residual = g if params.residual else None

    for i in reversed(range(len(params.layers))):
        z = tape.pre_acts[i]
        if params.activations[i] == "relu":
            g = g * (z > 0)
        h_prev = tape.post_acts[i - 1] if i > 0 else tape.x
        grads[f"layers.{i}.W"] = g.T @ h_prev
        grads[f"layers.{i}.b"] = g.sum(axis=0)
        g = g @ params.layers[i].weights

    if dx_residual is not None:
        g = g + dx_residual
    return grads, g


def mlp_forward(params: DenseParams, x: np.ndarray):
    """Single-vector forward; see mlp_forward_batch."""
    y, tape = mlp_forward_batch(params, np.asarray(x, dtype=float)[None, :])
    return y[0], tape


def mlp_backward(params: DenseParams, tape: Tape, upstream: np.ndarray):
    grads, gx = mlp_backward_batch(params, tape, np.asarray(upstream, dtype=float)[None, :])
    return grads, gx[0]


# ---------------------------------------------------------------------------
# Initialization and the named architectures
# ---------------------------------------------------------------------------

def init_dense(rng: np.random.Generator, dims: Sequence[int], activations: Sequence[str],
               residual: bool = False, layer_norm: bool = False,
               zero_last: bool = False) -> DenseParams:
    """Fan-in-scaled centered-uniform weights, zero biases.

    `zero_last` zeroes the final layer (residual heads start as identity
    refinements).
    """
    layers = []
    for i in range(len(dims) - 1):
        fan_in = dims[i]
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(dims[i + 1], dims[i]))
        layers.append(DenseLayer(W, np.zeros(dims[i + 1])))
    if zero_last:
        layers[-1].weights[:] = 0.0
    return DenseParams(layers, list(activations), residual=residual, layer_norm=layer_norm)


def make_residual_head(rng, feature_dim: int, hidden: int = 256, zero_last: bool = True) -> DenseParams:
    """Per-view refinement head: feature -> (2D offset, confidence logit)."""
    return init_dense(rng, [feature_dim, hidden, hidden, 3], ["relu", "relu", "none"],
                      zero_last=zero_last)


def make_fusion_linear(rng, feature_dim: int) -> DenseParams:
    """Single linear map applied to the mean attention feature."""
    return init_dense(rng, [feature_dim, feature_dim], ["none"])


def make_fusion_ffn(rng, feature_dim: int, hidden: int = 1024) -> DenseParams:
    """Two-layer feed-forward block with residual branch and layer norm."""
    return init_dense(rng, [feature_dim, hidden, feature_dim], ["relu", "none"],
                      residual=True, layer_norm=True)


def make_classifier(rng, feature_dim: int) -> DenseParams:
    """Linear map to two logits; callers sigmoid them into scores."""
    return init_dense(rng, [feature_dim, 2], ["none"])


# ---------------------------------------------------------------------------
# Losses (sum reduction, with gradients)
# ---------------------------------------------------------------------------

def l1_loss(pred: np.ndarray, target: np.ndarray):
    """Sum of absolute errors and its gradient w.r.t. pred."""
    pred = np.asarray(pred, dtype=float)
    diff = pred - np.asarray(target, dtype=float)
    return float(np.abs(diff).sum()), np.sign(diff)


BCE_CLIP = 1e-7


def bce_loss(prob: np.ndarray, label: np.ndarray):
    """Sum of binary cross-entropies and its gradient w.r.t. prob.

    Probabilities are clipped to [1e-7, 1 - 1e-7]; the gradient is zero where
    clipping was active, consistent with the clipped forward value.
    """
    p = np.asarray(prob, dtype=float)
    y = np.asarray(label, dtype=float)
    pc = np.clip(p, BCE_CLIP, 1.0 - BCE_CLIP)
    loss = float(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).sum())
    grad = (pc - y) / (pc * (1.0 - pc))
    grad = np.where((p > BCE_CLIP) & (p < 1.0 - BCE_CLIP), grad, 0.0)
    return loss, grad


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable, theta: np.ndarray, step: float = 1e-5,
               indices: Sequence[int] | None = None) -> float:
    """Max relative error of analytic vs central-difference gradients.

    `f(theta) -> (value, grad)` over a flat parameter vector. Error per
    coordinate is |analytic - central| / max(1, |central|); `indices`
    restricts the sweep (all coordinates by default).
    """
    theta = np.asarray(theta, dtype=float)
    _, grad = f(theta)
    grad = np.asarray(grad, dtype=float)
    idx = range(theta.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        tp = theta.copy()
        tp[i] += step
        tm = theta.copy()
        tm[i] -= step
        central = (f(tp)[0] - f(tm)[0]) / (2.0 * step)
        worst = max(worst, abs(grad[i] - central) / max(1.0, abs(central)))
    return worst


def grad_check_adaptive(f: Callable, theta: np.ndarray,
                        steps: Sequence[float] = (1e-5, 1e-6, 1e-7),
                        indices: Sequence[int] | None = None) -> float:
    """grad_check with a per-coordinate step sweep, taking the best agreement.

    A perturbation of one parameter can push some relu pre-activation (or a
    bilinear sample) across its kink; the resulting central-difference error
    shrinks with the step while a genuine gradient bug does not. Sweeping a
    few steps and keeping the smallest error separates the two.
    """
    theta = np.asarray(theta, dtype=float)
    _, grad = f(theta)
    grad = np.asarray(grad, dtype=float)
    idx = range(theta.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        best = np.inf
        for step in steps:
            h = step * max(1.0, abs(theta[i]))
            tp = theta.copy()
            tp[i] += h
            tm = theta.copy()
            tm[i] -= h
            central = (f(tp)[0] - f(tm)[0]) / (2.0 * h)
            best = min(best, abs(grad[i] - central) / max(1.0, abs(central)))
            if best < 1e-7:
                break
        worst = max(worst, best)
    return worst


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @staticmethod
    def zeros_like(params: dict[str, np.ndarray]) -> "AdamState":
        return AdamState(step=0,
                         m={k: np.zeros_like(a) for k, a in params.items()},
                         v={k: np.zeros_like(a) for k, a in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One moment-tracked adaptive update; returns (new params, new state)."""
    if set(params) != set(grads):
        raise ShapeMismatch(f"param/grad name sets differ: {set(params) ^ set(grads)}")
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{k}: grad shape {g.shape} != param shape {p.shape}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k] = m
        new_v[k] = v
    return new_params, AdamState(step=t, m=new_m, v=new_v)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named tensors (plus a JSON metadata blob) to an .npz container."""
    import json

    payload = {f"param:{k}": np.asarray(v, dtype=float) for k, v in params.items()}
    payload["__meta__"] = np.frombuffer(
        json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8
    )
    np.savez(path, **payload)


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (params, meta)."""
    import json

    with np.load(path) as data:
        params = {k[len("param:"):]: data[k].copy() for k in data.files if k.startswith("param:")}
        meta = json.loads(bytes(data["__meta__"]).decode()) if "__meta__" in data.files else {}
    return params, meta
