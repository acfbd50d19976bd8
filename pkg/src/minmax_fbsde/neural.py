"""Two-layer LSTM stack with an affine read-out, plus Adam.

Parameters are held in small dataclasses whose fields may be either plain
ndarrays (evaluation) or tape Vars (training); the forward functions are
written against the dual-mode expression helpers so one implementation
serves both paths.

Gate layout inside each fused (4h, .) parameter block is
(input, forget, cell-candidate, output), in that row order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import autodiff as ad


class NonFiniteGradient(FloatingPointError):
    """An optimizer step saw a non-finite gradient; nothing was updated."""


def xavier_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform on [-a, a] with a = sqrt(6 / (rows + cols))."""
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


@dataclass
class LstmLayerParams:
    """Fused gate parameters: W (4h, d), U (4h, h), b (4h, 1)."""

    W: Any
    U: Any
    b: Any

    @property
    def hidden_size(self) -> int:
        return self.U.shape[1]


@dataclass
class NetParams:
    """Two stacked LSTM layers and an affine map from the top hidden state."""

    layer1: LstmLayerParams
    layer2: LstmLayerParams
    out_w: Any  # (out_dim, h)
    out_b: Any  # (out_dim, 1)

    def named_arrays(self) -> list[tuple[str, Any]]:
        return [
            ("lstm1.W", self.layer1.W),
            ("lstm1.U", self.layer1.U),
            ("lstm1.b", self.layer1.b),
            ("lstm2.W", self.layer2.W),
            ("lstm2.U", self.layer2.U),
            ("lstm2.b", self.layer2.b),
            ("out.W", self.out_w),
            ("out.b", self.out_b),
        ]

    def map(self, fn) -> "NetParams":
        return NetParams(
            layer1=LstmLayerParams(fn(self.layer1.W), fn(self.layer1.U), fn(self.layer1.b)),
            layer2=LstmLayerParams(fn(self.layer2.W), fn(self.layer2.U), fn(self.layer2.b)),
            out_w=fn(self.out_w),
            out_b=fn(self.out_b),
        )


def init_net(
    input_dim: int,
    hidden_size: int,
    output_dim: int,
    rng: np.random.Generator,
    forget_bias: float = 1.0,
) -> NetParams:
    """Xavier-uniform weights, zero biases except the forget-gate block."""

    def bias(h: int) -> np.ndarray:
        b = np.zeros((4 * h, 1))
        b[h : 2 * h] = forget_bias
        return b

    h = hidden_size
    return NetParams(
        layer1=LstmLayerParams(
            W=xavier_init(4 * h, input_dim, rng),
            U=xavier_init(4 * h, h, rng),
            b=bias(h),
        ),
        layer2=LstmLayerParams(
            W=xavier_init(4 * h, h, rng),
            U=xavier_init(4 * h, h, rng),
            b=bias(h),
        ),
        out_w=xavier_init(output_dim, h, rng),
        out_b=np.zeros((output_dim, 1)),
    )


def lstm_cell_forward(layer: LstmLayerParams, x, h_prev, c_prev):
    """One cell update; x is (d, M), states are (h, M). Returns (h, c)."""
    h = layer.hidden_size
    pre = ad.add(
        ad.add(ad.matmul(layer.W, x), ad.matmul(layer.U, h_prev)),
        ad.matmul(layer.b, ad.ones_row(x)),
    )
    gate_i = ad.sigmoid(ad.rows(pre, 0, h))
    gate_f = ad.sigmoid(ad.rows(pre, h, 2 * h))
    cand = ad.tanh(ad.rows(pre, 2 * h, 3 * h))
    gate_o = ad.sigmoid(ad.rows(pre, 3 * h, 4 * h))
    c_new = ad.add(ad.mul(gate_f, c_prev), ad.mul(gate_i, cand))
    h_new = ad.mul(gate_o, ad.tanh(c_new))
    return h_new, c_new


def zero_state(net: NetParams, batch: int) -> tuple:
    h1 = net.layer1.hidden_size
    h2 = net.layer2.hidden_size
    return (
        (np.zeros((h1, batch)), np.zeros((h1, batch))),
        (np.zeros((h2, batch)), np.zeros((h2, batch))),
    )


def lstm_stack_forward(net: NetParams, x, state=None):
    """Both layers plus the read-out. Returns (output, new_state).

    ``state`` is ((h1, c1), (h2, c2)); None starts from zeros. The hidden
    state after step n depends only on inputs up to n.
    """
    if state is None:
        state = zero_state(net, x.shape[1] if isinstance(x, ad.Var) else np.asarray(x).shape[1])
    (h1, c1), (h2, c2) = state
    h1n, c1n = lstm_cell_forward(net.layer1, x, h1, c1)
    h2n, c2n = lstm_cell_forward(net.layer2, h1n, h2, c2)
    out = ad.add(ad.matmul(net.out_w, h2n), ad.matmul(net.out_b, ad.ones_row(h2n)))
    return out, ((h1n, c1n), (h2n, c2n))


@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter name, plus step count."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = None
    v: dict = None

    @classmethod
    def for_params(cls, named_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0, m={}, v={})
        for name, p in named_params:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state


def adam_step(state: AdamState, named_params, grads: dict) -> None:
    """Bias-corrected Adam update, in place on the parameter arrays.

    All gradients are validated finite before anything mutates, so a bad
    step leaves parameters and moments untouched.
    """
    for name, _ in named_params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in named_params:
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
