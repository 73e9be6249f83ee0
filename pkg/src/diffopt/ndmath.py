"""Minimal dense MLP with exact reverse-mode gradients.

Everything here is plain numpy in float64. Networks are small (a few
thousand parameters), so we keep the layout explicit: a list of
(weight, bias) pairs plus a spec describing widths, activation and the
optional time-embedding appended to the input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TimeInput",
    "MlpSpec",
    "ParamSet",
    "OptimizerState",
    "mlp_init",
    "mlp_apply",
    "mlp_apply_batch",
    "mlp_backprop",
    "mlp_backprop_batch",
    "mlp_grad_of_input_grad_batch",
    "optimizer_step",
    "finite_diff_grad",
]


@dataclass(frozen=True)
class TimeInput:
    """How (if at all) a scalar time is appended to the network input."""

    kind: str = "none"  # none | scalar_concat | fourier_concat
    num_features: int = 0  # fourier only, must be even
    scale: float = 30.0  # fourier only, top frequency

    def __post_init__(self):
        if self.kind not in ("none", "scalar_concat", "fourier_concat"):
            raise ValueError(f"unknown time_input kind {self.kind!r}")
        if self.kind == "fourier_concat":
            if self.num_features <= 0 or self.num_features % 2 != 0:
                raise ValueError("fourier num_features must be positive and even")
            if self.scale <= 0:
                raise ValueError("fourier scale must be positive")

    @property
    def width(self) -> int:
        if self.kind == "none":
            return 0
        if self.kind == "scalar_concat":
            return 1
        return self.num_features

    def embed(self, t: float) -> np.ndarray:
        if self.kind == "none":
            return np.zeros(0)
        if self.kind == "scalar_concat":
            return np.array([t], dtype=float)
        # Log-spaced frequencies from 1 to scale; half sines, half cosines.
        m = self.num_features // 2
        if m == 1:
            freqs = np.array([self.scale])
        else:
            freqs = np.exp(np.linspace(0.0, math.log(self.scale), m))
        ang = freqs * t
        return np.concatenate([np.sin(ang), np.cos(ang)])

    def to_json(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "fourier_concat":
            d["num_features"] = self.num_features
            d["scale"] = self.scale
        return d

    @staticmethod
    def from_json(d: dict) -> "TimeInput":
        return TimeInput(
            kind=d["kind"],
            num_features=int(d.get("num_features", 0)),
            scale=float(d.get("scale", 30.0)),
        )


@dataclass(frozen=True)
class MlpSpec:
    """Feedforward network shape: affine layers with an elementwise
    activation between them, last layer affine only.

    layer_widths[0] includes the time-embedding width when time_input is
    not "none"; callers pass x of length layer_widths[0] - time width.
    """

    layer_widths: tuple
    activation: str = "relu"  # relu | tanh
    time_input: TimeInput = field(default_factory=TimeInput)

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("need at least 2 layers (input and output widths)")
        if any(w < 1 for w in widths):
            raise ValueError("all layer widths must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.time_input.width >= widths[0]:
            raise ValueError("time embedding leaves no room for x in input layer")

    @property
    def x_width(self) -> int:
        return self.layer_widths[0] - self.time_input.width

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]

    def layer_shapes(self):
        w = self.layer_widths
        return [((w[i + 1], w[i]), (w[i + 1],)) for i in range(len(w) - 1)]

    def to_json(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "activation": self.activation,
            "time_input": self.time_input.to_json(),
        }

    @staticmethod
    def from_json(d: dict) -> "MlpSpec":
        return MlpSpec(
            layer_widths=tuple(d["layer_widths"]),
            activation=d["activation"],
            time_input=TimeInput.from_json(d["time_input"]),
        )


class ParamSet:
    """Per-layer weights and biases, flat-indexable as one vector."""

    def __init__(self, weights, biases):
        if len(weights) != len(biases):
            raise ValueError("weights/biases length mismatch")
        self.weights = [np.asarray(W, dtype=float) for W in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def to_flat(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts.append(W.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    @staticmethod
    def from_flat(flat: np.ndarray, spec: MlpSpec) -> "ParamSet":
        flat = np.asarray(flat, dtype=float)
        weights, biases = [], []
        idx = 0
        for (wshape, bshape) in spec.layer_shapes():
            n = wshape[0] * wshape[1]
            weights.append(flat[idx : idx + n].reshape(wshape).copy())
            idx += n
            biases.append(flat[idx : idx + bshape[0]].copy())
            idx += bshape[0]
        if idx != flat.size:
            raise ValueError(f"flat length {flat.size} != expected {idx}")
        return ParamSet(weights, biases)

    @staticmethod
    def zeros_like(spec: MlpSpec) -> "ParamSet":
        weights = [np.zeros(ws) for ws, _ in spec.layer_shapes()]
        biases = [np.zeros(bs) for _, bs in spec.layer_shapes()]
        return ParamSet(weights, biases)

    def copy(self) -> "ParamSet":
        return ParamSet([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def __eq__(self, other):
        if not isinstance(other, ParamSet):
            return NotImplemented
        return all(
            np.array_equal(a, b)
            for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        )


@dataclass
class OptimizerState:
    """Adam state over the flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @staticmethod
    def fresh(num_params: int, learning_rate: float = 0.001) -> "OptimizerState":
        return OptimizerState(
            m=np.zeros(num_params), v=np.zeros(num_params), learning_rate=learning_rate
        )


def mlp_init(spec: MlpSpec, seed: int) -> ParamSet:
    """Fan-in-scaled random weights (He for relu, Xavier for tanh), zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for (wshape, bshape) in spec.layer_shapes():
        fan_in = wshape[1]
        if spec.activation == "relu":
            std = math.sqrt(2.0 / fan_in)
        else:
            std = math.sqrt(1.0 / fan_in)
        weights.append(rng.normal(0.0, std, size=wshape))
        biases.append(np.zeros(bshape))
    return ParamSet(weights, biases)


def _act(spec: MlpSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_prime(spec: MlpSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        return (z > 0).astype(float)
    return 1.0 - np.tanh(z) ** 2


def _act_second(spec: MlpSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        return np.zeros_like(z)
    th = np.tanh(z)
    return -2.0 * th * (1.0 - th**2)


def _full_input_batch(spec: MlpSpec, X: np.ndarray, ts) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != spec.x_width:
        raise ValueError(f"x width {X.shape[1]} != expected {spec.x_width}")
    if spec.time_input.kind == "none":
        if ts is not None:
            raise ValueError("t supplied but spec has no time input")
        return X
    if ts is None:
        raise ValueError("spec requires a time input")
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    if ts.size == 1 and X.shape[0] > 1:
        ts = np.full(X.shape[0], ts[0])
    emb = np.stack([spec.time_input.embed(float(t)) for t in ts])
    return np.concatenate([X, emb], axis=1)


def _forward_batch(params: ParamSet, spec: MlpSpec, A0: np.ndarray):
    """Returns (activations, pre_activations, output); A0 is the full input."""
    acts = [A0]
    zs = []
    A = A0
    n_layers = params.num_layers
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        Z = A @ W.T + b
        zs.append(Z)
        if i < n_layers - 1:
            A = _act(spec, Z)
            acts.append(A)
        else:
            A = Z
    return acts, zs, A


def mlp_apply_batch(params: ParamSet, spec: MlpSpec, X: np.ndarray, ts=None) -> np.ndarray:
    A0 = _full_input_batch(spec, X, ts)
    _, _, out = _forward_batch(params, spec, A0)
    return out


def mlp_apply(params: ParamSet, spec: MlpSpec, x: np.ndarray, t: float | None = None) -> np.ndarray:
    out = mlp_apply_batch(params, spec, np.asarray(x, dtype=float)[None, :], None if t is None else [t])
    return out[0]


def mlp_backprop_batch(params: ParamSet, spec: MlpSpec, X, ts, upstream: np.ndarray):
    """Gradients of sum_n <upstream[n], mlp(x[n])> w.r.t. params and each x.

    Returns (param_grad: ParamSet, input_grad: (n, x_width) array). The
    input gradient covers x only, never the time embedding.
    """
    A0 = _full_input_batch(spec, X, ts)
    upstream = np.atleast_2d(np.asarray(upstream, dtype=float))
    if upstream.shape[1] != spec.out_width:
        raise ValueError("upstream width mismatch")
    acts, zs, _ = _forward_batch(params, spec, A0)
    n_layers = params.num_layers
    gW = [None] * n_layers
    gb = [None] * n_layers
    G = upstream  # d objective / d z for the current layer
    for i in range(n_layers - 1, -1, -1):
        gW[i] = G.T @ acts[i]
        gb[i] = G.sum(axis=0)
        if i > 0:
            GA = G @ params.weights[i]
            G = GA * _act_prime(spec, zs[i - 1])
    input_grad = (G @ params.weights[0])[:, : spec.x_width]
    return ParamSet(gW, gb), input_grad


def mlp_backprop(params: ParamSet, spec: MlpSpec, x, t, upstream):
    pg, ig = mlp_backprop_batch(
        params, spec, np.asarray(x, dtype=float)[None, :], None if t is None else [t],
        np.asarray(upstream, dtype=float)[None, :],
    )
    return pg, ig[0]


def mlp_grad_of_input_grad_batch(params: ParamSet, spec: MlpSpec, X, ts, U: np.ndarray):
    """Parameter gradient of sum_n <U[n], d/dx <c[n], mlp(x[n])>> style terms.

    Concretely: let N(x) = mlp(x) and s(x) = -J(x)^T N(x), the input
    gradient of the energy -0.5 ||N(x)||^2. This returns the exact
    parameter gradient of sum_n <U[n], s(x[n])>, computed
    forward-over-reverse: a joint primal/tangent forward pass (tangent
    direction U in input space) followed by one reverse pass through the
    doubled computation graph.
    """
    A0 = _full_input_batch(spec, X, ts)
    U = np.atleast_2d(np.asarray(U, dtype=float))
    n = A0.shape[0]
    # Tangent of the full input: U on the x slice, zero on the time slice.
    T0 = np.zeros_like(A0)
    T0[:, : spec.x_width] = U

    n_layers = params.num_layers
    acts, tacts = [A0], [T0]
    zs, tzs = [], []
    A, Tn = A0, T0
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        Z = A @ W.T + b
        Tz = Tn @ W.T
        zs.append(Z)
        tzs.append(Tz)
        if i < n_layers - 1:
            A = _act(spec, Z)
            Tn = _act_prime(spec, Z) * Tz
            acts.append(A)
            tacts.append(Tn)
    N, Ndot = zs[-1], tzs[-1]
    # Scalar objective: sum_n <U, s> = -sum_n <N, Ndot>.
    gW = [np.zeros_like(W) for W in params.weights]
    gb = [np.zeros_like(b) for b in params.biases]
    GZ = -Ndot  # adjoint of z at the output layer
    GT = -N     # adjoint of the tangent tz at the output layer
    for i in range(n_layers - 1, -1, -1):
        gW[i] = GZ.T @ acts[i] + GT.T @ tacts[i]
        gb[i] = GZ.sum(axis=0)
        if i > 0:
            GA = GZ @ params.weights[i]
            GTa = GT @ params.weights[i]
            zp = _act_prime(spec, zs[i - 1])
            zpp = _act_second(spec, zs[i - 1])
            GZ = GA * zp + GTa * zpp * tzs[i - 1]
            GT = GTa * zp
    return ParamSet(gW, gb)


def optimizer_step(params: ParamSet, grads: ParamSet, state: OptimizerState, spec: MlpSpec):
    """One Adam step with bias correction; returns (new params, new state)."""
    p = params.to_flat()
    g = grads.to_flat()
    if p.shape != g.shape or p.shape != state.m.shape:
        raise ValueError("parameter/gradient/state shape mismatch")
    step = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g**2
    m_hat = m / (1 - state.beta1**step)
    v_hat = v / (1 - state.beta2**step)
    p_new = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = OptimizerState(
        m=m, v=v, step=step,
        learning_rate=state.learning_rate,
        beta1=state.beta1, beta2=state.beta2, epsilon=state.epsilon,
    )
    return ParamSet.from_flat(p_new, spec), new_state


def finite_diff_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function; the test oracle."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        fp, fm = f(xp), f(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value near component {i}")
        g[i] = (fp - fm) / (2 * eps)
    return g
