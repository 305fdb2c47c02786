"""Dense multilayer perceptrons in plain numpy.

Parameters of an :class:`Mlp` live in a single flat float64 vector ``theta``;
the per-layer weight and bias arrays are views into it.  Gradients returned by
:func:`backward` use the same flat layout, so optimizers and target-network
updates work on one array per network.

Weights are stored as ``(fan_in, fan_out)`` so a batch of row vectors is
propagated with ``x @ W + b``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("linear", "relu", "tanh", "sigmoid")
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}
MAGIC = b"ETCRL1"


class NonFiniteError(FloatingPointError):
    """Raised when NaN or inf shows up where only finite values are allowed."""


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "linear":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    # a = act(z), reused to avoid recomputing transcendental functions
    if name == "linear":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    raise ValueError(f"unknown activation {name!r}")


class Mlp:
    """Fully connected network with one hidden activation and per-unit output heads.

    ``output_activation`` may be a single name applied to every output unit or
    a sequence with one name per output unit (e.g. two linear score heads and a
    tanh control head).  The activated output is multiplied by ``output_scale``.
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        hidden_activation: str = "relu",
        output_activation: str | Sequence[str] = "linear",
        output_scale: float | Sequence[float] | None = None,
        rng: np.random.Generator | None = None,
    ):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"need at least input and output layer, got {sizes}")
        if hidden_activation not in ("relu", "tanh"):
            raise ValueError(f"hidden activation must be relu or tanh, got {hidden_activation!r}")
        n_out = sizes[-1]
        if isinstance(output_activation, str):
            out_acts = (output_activation,) * n_out
        else:
            out_acts = tuple(output_activation)
        if len(out_acts) != n_out:
            raise ValueError("one output activation per output unit required")
        for a in out_acts:
            if a not in ("linear", "tanh", "sigmoid"):
                raise ValueError(f"output activation must be linear, tanh or sigmoid, got {a!r}")
        if output_scale is None:
            scale = np.ones(n_out)
        else:
            scale = np.broadcast_to(np.asarray(output_scale, dtype=np.float64), (n_out,)).copy()

        self.layer_sizes = tuple(sizes)
        self.hidden_activation = hidden_activation
        self.output_activations = out_acts
        self.output_scale = scale
        self.version = 0

        n_params = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
        self.theta = np.zeros(n_params)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for W, b in self._split(self.theta):
            self.weights.append(W)
            self.biases.append(b)
        # group output units by activation so the head costs one call per kind
        self._out_groups = {
            name: np.array([i for i, a in enumerate(out_acts) if a == name])
            for name in sorted(set(out_acts))
        }
        if rng is not None:
            self.init_uniform(rng)

    def _split(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        views = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = flat[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = flat[offset : offset + fan_out]
            offset += fan_out
            views.append((W, b))
        return views

    def unflatten(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-layer ``(W, b)`` views of a flat vector laid out like ``theta``."""
        if flat.shape != self.theta.shape:
            raise ValueError(f"expected flat vector of length {self.theta.size}, got {flat.shape}")
        return self._split(flat)

    def init_uniform(self, rng: np.random.Generator) -> None:
        """Draw every weight and bias from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        for W, b in zip(self.weights, self.biases):
            bound = 1.0 / np.sqrt(W.shape[0])
            W[...] = rng.uniform(-bound, bound, size=W.shape)
            b[...] = rng.uniform(-bound, bound, size=b.shape)
        self.version += 1

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def architecture(self) -> tuple:
        return (
            self.layer_sizes,
            self.hidden_activation,
            self.output_activations,
            tuple(self.output_scale.tolist()),
        )

    def set_params(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != self.theta.shape:
            raise ValueError(f"expected {self.theta.shape} parameters, got {theta.shape}")
        self.theta[...] = theta
        self.version += 1

    def copy(self) -> "Mlp":
        clone = Mlp(
            self.layer_sizes,
            self.hidden_activation,
            self.output_activations,
            self.output_scale,
        )
        clone.theta[...] = self.theta
        return clone

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]


@dataclass
class Cache:
    net_id: int
    version: int
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activations of each layer
    out_act: np.ndarray  # output head activation before scaling


def _as_batch(x: np.ndarray, width: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"input must have {width} columns, got shape {x.shape}")
    return x


def forward(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, Cache]:
    """Propagate a batch of row vectors; returns the output and a cache for :func:`backward`."""
    a = _as_batch(x, net.n_inputs)
    inputs, pre = [], []
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(a)
        z = a @ W + b
        pre.append(z)
        if i < last:
            a = _act(net.hidden_activation, z)
    if len(net._out_groups) == 1:
        (name,) = net._out_groups
        head = _act(name, z)
    else:
        head = np.empty_like(z)
        for name, idx in net._out_groups.items():
            head[:, idx] = _act(name, z[:, idx])
    out = head * net.output_scale
    return out, Cache(id(net), net.version, inputs, pre, head)


def backward(
    net: Mlp, cache: Cache, output_grad: np.ndarray, param_grads: bool = True, input_grad: bool = True
) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Gradients of ``sum(output * output_grad)``.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` is flat with the
    layout of ``net.theta`` and ``input_grad`` has the shape of the forward input.
    Either part can be skipped (returned as None) to save work.
    """
    if cache.net_id != id(net) or cache.version != net.version:
        raise ValueError("cache does not belong to the current parameters of this network")
    g = np.asarray(output_grad, dtype=np.float64)
    z = cache.pre[-1]
    if g.shape != z.shape:
        raise ValueError(f"output_grad shape {g.shape} does not match output {z.shape}")
    g = g * net.output_scale
    if len(net._out_groups) == 1:
        (name,) = net._out_groups
        if name != "linear":
            g = g * _act_grad(name, z, cache.out_act)
    else:
        g = g.copy()
        for name, idx in net._out_groups.items():
            if name != "linear":
                g[:, idx] *= _act_grad(name, z[:, idx], cache.out_act[:, idx])

    grads = np.empty_like(net.theta) if param_grads else None
    views = net._split(grads) if param_grads else None
    for i in range(len(net.weights) - 1, -1, -1):
        a_in = cache.inputs[i]
        if param_grads:
            dW, db = views[i]
            np.matmul(a_in.T, g, out=dW)
            np.sum(g, axis=0, out=db)
        if i == 0 and not input_grad:
            return grads, None
        g = g @ net.weights[i].T
        if i > 0:
            z_prev = cache.pre[i - 1]
            if net.hidden_activation == "relu":
                g = g * (z_prev > 0.0)
            else:
                g = g * (1.0 - a_in * a_in)
    return grads, g


@dataclass
class AdamState:
    n_params: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.n_params)
        if self.v is None:
            self.v = np.zeros(self.n_params)


def adam_step(params: Mlp | np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """One in-place Adam descent step; pass negated gradients to ascend.

    Accepts either a flat parameter array or an :class:`Mlp` (whose cache
    version is then invalidated).
    """
    theta = params.theta if isinstance(params, Mlp) else params
    if theta.shape != grads.shape or theta.shape != state.m.shape:
        raise ValueError("parameter, gradient and optimizer state shapes differ")
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise NonFiniteError(
            f"non-finite gradient at {bad.size} of {grads.size} entries (first index {bad[0]})"
        )
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * (grads * grads)
    m_hat_scale = 1.0 / (1.0 - b1**state.step)
    v_hat_scale = 1.0 / (1.0 - b2**state.step)
    theta -= state.lr * (state.m * m_hat_scale) / (np.sqrt(state.v * v_hat_scale) + state.eps)
    if isinstance(params, Mlp):
        params.version += 1
    return theta


def soft_update(target: Mlp, online: Mlp, kappa: float) -> Mlp:
    """Move target parameters towards the online ones: t <- kappa*o + (1-kappa)*t."""
    if not 0.0 <= kappa <= 1.0:
        raise ValueError(f"kappa must lie in [0, 1], got {kappa}")
    if target.architecture() != online.architecture():
        raise ValueError("target and online networks have different architectures")
    if kappa == 1.0:
        target.theta[...] = online.theta
    elif kappa > 0.0:
        target.theta *= 1.0 - kappa
        target.theta += kappa * online.theta
    target.version += 1
    return target


def gradient_check(
    net: Mlp, x: np.ndarray, eps: float = 1e-5, rng: np.random.Generator | None = None
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    The default step sits near the cube root of machine epsilon, where the
    truncation and round-off errors of a central difference balance.

    The checked scalar is ``sum(output * P)`` for a fixed random projection P,
    which exercises every output unit.  Covers all parameters and all inputs.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    x = _as_batch(x, net.n_inputs).copy()
    out, cache = forward(net, x)
    proj = rng.standard_normal(out.shape)
    g_theta, g_x = backward(net, cache, proj)

    def objective() -> float:
        return float(np.sum(forward(net, x)[0] * proj))

    def numeric(arr: np.ndarray) -> np.ndarray:
        flat = arr.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = objective()
            flat[i] = orig - eps
            f_minus = objective()
            flat[i] = orig
            num[i] = (f_plus - f_minus) / (2.0 * eps)
        return num

    saved = net.theta.copy()
    try:
        n_theta = numeric(net.theta)
        n_x = numeric(x)
    finally:
        net.theta[...] = saved
    analytic = np.concatenate([g_theta, g_x.reshape(-1)])
    num = np.concatenate([n_theta, n_x])
    rel = np.abs(analytic - num) / np.maximum(1e-8, np.abs(analytic) + np.abs(num))
    return float(rel.max())


def dumps(net: Mlp) -> bytes:
    """Serialize a network to the versioned ``ETCRL1`` little-endian blob."""
    n_out = net.n_outputs
    parts = [
        MAGIC,
        struct.pack("<I", len(net.layer_sizes)),
        struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes),
        struct.pack("<B", _ACT_CODE[net.hidden_activation]),
        struct.pack(f"<{n_out}B", *(_ACT_CODE[a] for a in net.output_activations)),
        net.output_scale.astype("<f8").tobytes(),
        net.theta.astype("<f8").tobytes(),
    ]
    return b"".join(parts)


def loads(blob: bytes) -> Mlp:
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError("not an ETCRL1 checkpoint")
    pos = len(MAGIC)
    (n_layers,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    sizes = struct.unpack_from(f"<{n_layers}I", blob, pos)
    pos += 4 * n_layers
    (hidden,) = struct.unpack_from("<B", blob, pos)
    pos += 1
    n_out = sizes[-1]
    out_codes = struct.unpack_from(f"<{n_out}B", blob, pos)
    pos += n_out
    scale = np.frombuffer(blob, dtype="<f8", count=n_out, offset=pos)
    pos += 8 * n_out
    net = Mlp(sizes, ACTIVATIONS[hidden], [ACTIVATIONS[c] for c in out_codes], scale.copy())
    theta = np.frombuffer(blob, dtype="<f8", count=net.theta.size, offset=pos)
    pos += 8 * net.theta.size
    if pos != len(blob):
        raise ValueError(f"trailing or missing bytes in checkpoint ({len(blob) - pos})")
    net.set_params(theta)
    return net


def save(net: Mlp, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(net))


def load(path) -> Mlp:
    with open(path, "rb") as fh:
        return loads(fh.read())
