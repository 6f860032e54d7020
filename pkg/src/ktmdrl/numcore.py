"""Dense MLPs with hand-written reverse mode, Adam, Polyak averaging and seeded RNG.

Every network keeps all of its parameters in a single contiguous float64
vector (``Mlp.flat``); the per-layer weight matrices and bias vectors are
views into it.  Optimizer and target-network updates therefore operate on one
array, and gradients come back in the same flat layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LINEAR = "linear"
TANH = "tanh"

DTYPE = np.float64


class ContractError(ValueError):
    """Raised when an operation is called with inconsistent shapes or values."""


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the same seed always yields the same draw sequence."""
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed derived from a tuple of integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0] >> 1)


def gaussian(rng: np.random.Generator, sigma: float, size=None):
    if sigma < 0:
        raise ContractError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return 0.0 if size is None else np.zeros(size, dtype=DTYPE)
    return rng.normal(0.0, sigma, size)


def _layer_shapes(sizes):
    return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]


def param_count(sizes) -> int:
    return sum(o * i + o for o, i in _layer_shapes(sizes))


@dataclass(eq=False)
class Mlp:
    """Feed-forward ReLU network with a linear or bound-scaled tanh output.

    ``sizes`` lists layer widths from input to output, e.g. ``(8, 400, 400, 2)``.
    Weights are stored ``[out, in]``; the layout of ``flat`` is, layer by
    layer, the row-major weight matrix followed by the bias vector.
    """

    sizes: tuple[int, ...]
    output: str = LINEAR
    bound: float = 1.0
    flat: np.ndarray | None = None
    weights: list[np.ndarray] = field(init=False, repr=False)
    biases: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ContractError(f"bad layer sizes {self.sizes}")
        if self.output not in (LINEAR, TANH):
            raise ContractError(f"unknown output activation {self.output!r}")
        if self.output == TANH and not self.bound > 0:
            raise ContractError("tanh output needs a positive bound")
        n = param_count(self.sizes)
        if self.flat is None:
            self.flat = np.zeros(n, dtype=DTYPE)
        else:
            self.flat = np.ascontiguousarray(self.flat, dtype=DTYPE)
            if self.flat.shape != (n,):
                raise ContractError(f"expected {n} parameters, got {self.flat.shape}")
        self.weights, self.biases = [], []
        off = 0
        for o, i in _layer_shapes(self.sizes):
            self.weights.append(self.flat[off:off + o * i].reshape(o, i))
            off += o * i
            self.biases.append(self.flat[off:off + o])
            off += o

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def like(self, flat: np.ndarray) -> Mlp:
        """A network of the same architecture wrapping ``flat``."""
        return Mlp(self.sizes, self.output, self.bound, flat)

    def copy(self) -> Mlp:
        return self.like(self.flat.copy())

    def same_shape(self, other: Mlp) -> bool:
        return self.sizes == other.sizes


def init_mlp(sizes, rng: np.random.Generator, output: str = LINEAR, bound: float = 1.0) -> Mlp:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases of each layer."""
    net = Mlp(sizes, output, bound)
    for w, b in zip(net.weights, net.biases):
        lim = 1.0 / np.sqrt(w.shape[1])
        w[...] = rng.uniform(-lim, lim, w.shape)
        b[...] = rng.uniform(-lim, lim, b.shape)
    return net


def _check_input(net: Mlp, x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim not in (1, 2) or x.shape[-1] != net.n_in:
        raise ContractError(f"input shape {x.shape} does not match network input {net.n_in}")
    if not np.isfinite(x).all():
        raise ContractError("non-finite network input")
    return x


def forward_cached(net: Mlp, x):
    """Forward pass that also returns what ``backward`` needs.

    The cache holds each layer's input and the final pre-activation output.
    """
    x = _check_input(net, x)
    h = x
    inputs = []
    last = len(net.weights) - 1
    for li, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w.T + b
        if li < last:
            h = np.maximum(z, 0.0)
        elif net.output == TANH:
            t = np.tanh(z)
            h = net.bound * t
            inputs.append(t)
        else:
            h = z
    return h, inputs


def forward(net: Mlp, x) -> np.ndarray:
    return forward_cached(net, x)[0]


def backward(net: Mlp, x, output_grad, cache=None, param_grads: bool = True):
    """Gradients of ``<forward(net, x), output_grad>`` w.r.t. parameters and input.

    For a batched input the inner product runs over the whole batch, so the
    parameter gradient is a sum over samples.  Returns ``(grad_net, input_grad)``
    where ``grad_net`` is an ``Mlp`` view over the flat gradient (``None`` if
    ``param_grads`` is false).  ReLU's derivative at exactly 0 is 0.
    """
    if cache is None:
        _, cache = forward_cached(net, x)
    x = cache[0]
    g = np.asarray(output_grad, dtype=DTYPE)
    if g.shape != x.shape[:-1] + (net.n_out,):
        raise ContractError(f"output_grad shape {g.shape} does not match output")
    n_layers = len(net.weights)
    if net.output == TANH:
        t = cache[n_layers]
        g = g * (net.bound * (1.0 - t * t))
    grad = net.like(np.zeros_like(net.flat)) if param_grads else None
    batched = x.ndim == 2
    for li in range(n_layers - 1, -1, -1):
        h_in = cache[li]
        w = net.weights[li]
        if param_grads:
            if batched:
                np.matmul(g.T, h_in, out=grad.weights[li])
                g.sum(axis=0, out=grad.biases[li])
            else:
                np.outer(g, h_in, out=grad.weights[li])
                grad.biases[li][...] = g
        g = g @ w
        if li > 0:
            # h_in is this layer's input = ReLU output of the previous layer
            g = g * (h_in > 0.0)
    return grad, g


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, net: Mlp, lr: float = 3e-4) -> AdamState:
        return cls(np.zeros_like(net.flat), np.zeros_like(net.flat), lr=lr)


def adam_step(state: AdamState, net: Mlp, grad) -> Mlp:
    """One bias-corrected Adam descent step, applied in place to ``net``."""
    g = grad.flat if isinstance(grad, Mlp) else np.asarray(grad, dtype=DTYPE)
    if g.shape != net.flat.shape or state.m.shape != net.flat.shape:
        raise ContractError("gradient / optimizer state shape does not match parameters")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    denom = np.sqrt(state.v / c2)
    denom += state.eps
    net.flat -= (state.lr / c1) * state.m / denom
    return net


def polyak_update(target: Mlp, online: Mlp, tau: float) -> Mlp:
    """target <- tau * online + (1 - tau) * target, in place."""
    if not target.same_shape(online):
        raise ContractError("target and online networks differ in shape")
    if not 0.0 < tau <= 1.0:
        raise ContractError(f"tau must lie in (0, 1], got {tau}")
    target.flat *= 1.0 - tau
    target.flat += tau * online.flat
    return target


def copy_into(target: Mlp, source: Mlp) -> Mlp:
    if not target.same_shape(source):
        raise ContractError("shape mismatch in copy")
    target.flat[...] = source.flat
    return target
